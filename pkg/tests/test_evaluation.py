import csv
import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occcot.dataset import ObjectRecord, build_annotation, derive_attributes
from occcot.evaluation import (
    MissingGoldError,
    ScoreReport,
    load_table1,
    normalize_answer,
    relative_improvement,
    render_report,
    score_runs,
)
from occcot.pipeline import Clarity, PipelineRun


def gold(n, unclear=()):
    out = []
    for i in range(n):
        r = ObjectRecord(f"s{i}", "mug", f"img/{i}.png", 0.8 if i in unclear else 0.1)
        out.append(build_annotation(r, derive_attributes(r)))
    return out


def run(sid, answer, clear=True):
    return PipelineRun(sid, sr_answer=Clarity.CLEAR if clear else Clarity.UNCLEAR, fd_answer=answer)


# --- normalization ----------------------------------------------------------


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("A Cell Phone.", "cell phone"),
        ("  the   mug!! ", "mug"),
        ("An apple", "apple"),
        ("a the bowl", "bowl"),
        ("remote-control", "remotecontrol"),
        ("", ""),
        ("The", ""),
        ("bottle", "bottle"),
    ],
)
def test_normalize_examples(raw, expected):
    assert normalize_answer(raw) == expected


def test_normalize_synonyms():
    assert normalize_answer("A cellphone", {"cellphone": "cell phone"}) == "cell phone"


@settings(max_examples=300)
@given(st.text())
def test_normalize_idempotent(s):
    once = normalize_answer(s)
    assert normalize_answer(once) == once


# --- scoring ----------------------------------------------------------------


def test_score_all_correct():
    g = gold(5)
    r = score_runs([run(a.sample_id, "A mug.") for a in g], g)
    assert (r.description, r.reflection, r.decision, r.n_samples) == (1.0, 1.0, 1.0, 5)


def test_score_twelve_fourteen_fifteen_of_twenty():
    g = gold(20, unclear=range(14, 20))
    # every run says clear and 14 of 20 are gold-clear
    runs = [run(f"s{i}", "mug" if i < 15 else "bowl", clear=True) for i in range(20)]
    probes = [run(f"s{i}", "mug" if i < 12 else "cup", clear=True) for i in range(20)]
    rep = score_runs(runs, g, probe_runs=probes, model_label="m", setting_label="s")
    assert (rep.description, rep.reflection, rep.decision) == (0.60, 0.70, 0.75)


def test_score_description_without_probes_counts_clear_only():
    g = gold(4)
    runs = [run("s0", "mug"), run("s1", "mug", clear=False), run("s2", "bowl"), run("s3", "mug")]
    rep = score_runs(runs, g)
    assert rep.description == 0.5
    assert rep.decision == 0.75


def test_score_errors():
    with pytest.raises(ValueError):
        score_runs([], gold(1))
    with pytest.raises(MissingGoldError, match="zz"):
        score_runs([run("zz", "mug")], gold(1))
    with pytest.raises(MissingGoldError):
        score_runs([run("s0", "mug")], gold(1), probe_runs=[])


def test_score_report_validates():
    with pytest.raises(ValueError):
        ScoreReport("m", "s", 0.5, 0.5, 1.2)
    with pytest.raises(ValueError):
        ScoreReport("m", "s", None, None, 0.5, n_samples=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=30), st.randoms())
def test_score_permutation_invariant(correct, rnd):
    g = gold(len(correct))
    runs = [run(f"s{i}", "mug" if c else "bowl") for i, c in enumerate(correct)]
    shuffled = runs[:]
    rnd.shuffle(shuffled)
    assert score_runs(runs, g) == score_runs(shuffled, g)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.booleans(), min_size=1, max_size=20), st.lists(st.booleans(), min_size=1, max_size=20))
def test_score_concatenation_is_weighted_mean(a, b):
    g = gold(len(a) + len(b))
    flags = a + b
    runs = [run(f"s{i}", "mug" if c else "bowl") for i, c in enumerate(flags)]
    whole = score_runs(runs, g)
    left, right = score_runs(runs[: len(a)], g), score_runs(runs[len(a):], g)
    expected = (left.decision * len(a) + right.decision * len(b)) / len(flags)
    assert whole.decision == pytest.approx(expected, abs=1e-12)


# --- improvements and rendering ---------------------------------------------


@pytest.mark.parametrize(
    "base,method,pct,display",
    [
        (0.55, 0.6366, 15.745454545454546, "+15.75%"),
        (0.6412, 0.7098, 10.698689956331876, "+10.70%"),
        (0.6, 0.6, 0.0, "+0.00%"),
        (0.5, 0.45, -10.0, "-10.00%"),
    ],
)
def test_relative_improvement(base, method, pct, display):
    row = relative_improvement(base, method)
    assert row.relative_improvement_pct == pytest.approx(pct, abs=1e-9)
    assert row.display == display


def test_relative_improvement_zero_base():
    with pytest.raises(ValueError):
        relative_improvement(0.0, 0.5)


def test_render_report_pairs_baseline():
    method = ScoreReport("M", "10K", 0.61, 0.66, 0.6366)
    base = ScoreReport("M", "10K", None, None, 0.55)
    out = render_report([method], [base])
    rows = list(csv.DictReader(io.StringIO(out.csv)))
    assert [r["model"] for r in rows] == ["M (base)", "M"]
    assert rows[1]["improvement_pct"] == "15.75"
    assert rows[0]["description"] == ""
    assert "+15.75%" in out.markdown
    assert out.flagged == []


def test_render_report_flags_missing_baseline():
    out = render_report([ScoreReport("X", "s", 0.1, 0.2, 0.3)])
    assert out.flagged == ["X / s: no baseline"]
    assert out.comparisons[0][1] is None
    assert "flagged" in out.markdown
    assert list(csv.DictReader(io.StringIO(out.csv)))[0]["improvement_pct"] == ""


def test_render_threshold_note():
    out = render_report([ScoreReport("X", "s", 0.1, 0.2, 0.3, clarity_threshold=0.5)])
    assert "0.5 counts as unclear" in out.markdown


def test_bundled_comparison_fixture():
    methods, baselines, refs, raw = load_table1()
    assert len(methods) == len(baselines) == 8
    assert len(refs) == 3
    phi = next(m for m in methods if m.model_label == "Phi3-4B" and m.setting_label == "100K-Learning")
    assert phi.reflection == 0.72227
    out = render_report(methods, baselines, refs)
    assert out.flagged == []
    pcts = [c.relative_improvement_pct for _, c in out.comparisons]
    for got, want in zip(pcts, raw["reported_improvements_pct"]):
        assert abs(got - want) <= 0.01
    assert "0.72227" in out.csv
