"""Description / Reflection / Decision scores and model comparison reports."""

from __future__ import annotations

import csv
import io
import json
import re
import string
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

from .dataset import CoTAnnotation
from .pipeline import Clarity, PipelineRun

ARTICLES = frozenset({"a", "an", "the"})
_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")

CSV_COLUMNS = ("model", "setting", "description", "reflection", "decision", "improvement_pct")


def normalize_answer(raw: str, synonyms: Mapping[str, str] | None = None) -> str:
    """Lowercase, drop punctuation and leading articles, collapse whitespace.

    >>> normalize_answer("A Cell Phone.")
    'cell phone'
    """
    tokens = _PUNCT.sub("", (raw or "").lower()).split()
    while tokens and tokens[0] in ARTICLES:
        tokens.pop(0)
    out = " ".join(tokens)
    if synonyms:
        out = synonyms.get(out, out)
    return out


class MissingGoldError(KeyError):
    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class ScoreReport:
    model_label: str
    setting_label: str
    description: float | None
    reflection: float | None
    decision: float
    n_samples: int = 1
    clarity_threshold: float | None = None

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        for name in ("description", "reflection", "decision"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} score {v!r} outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ComparisonRow:
    base_decision: float
    method_decision: float
    relative_improvement_pct: float

    @property
    def display(self) -> str:
        return f"{self.relative_improvement_pct:+.2f}%"


def relative_improvement(base: float, method: float) -> ComparisonRow:
    if base <= 0:
        raise ValueError("baseline decision score must be positive")
    return ComparisonRow(base, method, (method / base - 1.0) * 100.0)


def _gold_index(gold: Mapping[str, CoTAnnotation] | Iterable[CoTAnnotation]) -> Mapping[str, CoTAnnotation]:
    if isinstance(gold, Mapping):
        return gold
    return {a.sample_id: a for a in gold}


def score_runs(
    runs: Sequence[PipelineRun],
    gold: Mapping[str, CoTAnnotation] | Iterable[CoTAnnotation],
    probe_runs: Sequence[PipelineRun] | None = None,
    model_label: str = "",
    setting_label: str = "",
    clarity_threshold: float | None = None,
    synonyms: Mapping[str, str] | None = None,
) -> ScoreReport:
    """Exact-match accuracies after normalization.

    Description uses the final answer of ``probe_runs`` (gating disabled) when
    given; otherwise the CoT run's own answer counts only where the run judged
    the sample clear, since unclear runs have no pre-expert answer.
    """
    if not runs:
        raise ValueError("cannot score an empty run set")
    index = _gold_index(gold)
    probes = {r.sample_id: r for r in probe_runs} if probe_runs is not None else None

    def matches(answer: str | None, target: str) -> bool:
        return answer is not None and normalize_answer(answer, synonyms) == normalize_answer(target, synonyms)

    desc = refl = dec = 0
    for run in runs:
        ann = index.get(run.sample_id)
        if ann is None:
            raise MissingGoldError(f"no gold annotation for sample {run.sample_id!r}")
        target = ann.gold_object
        if probes is not None:
            probe = probes.get(run.sample_id)
            if probe is None:
                raise MissingGoldError(f"no probe run for sample {run.sample_id!r}")
            desc += matches(probe.fd_answer, target)
        else:
            desc += run.sr_answer is Clarity.CLEAR and matches(run.fd_answer, target)
        gold_clarity = Clarity.CLEAR if ann.gold_clear else Clarity.UNCLEAR
        refl += run.sr_answer is gold_clarity
        dec += matches(run.fd_answer, target)
    n = len(runs)
    return ScoreReport(model_label, setting_label, desc / n, refl / n, dec / n, n, clarity_threshold)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderedReport:
    markdown: str
    csv: str
    comparisons: list[tuple[ScoreReport, ComparisonRow | None]] = field(default_factory=list)
    flagged: list[str] = field(default_factory=list)


def _fmt(v: float | None) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}" if round(v, 4) == v else repr(v)


def render_report(
    reports: Sequence[ScoreReport],
    baselines: Sequence[ScoreReport] = (),
    references: Sequence[ScoreReport] = (),
) -> RenderedReport:
    """Markdown and CSV tables grouped by setting, with decision improvements over baselines.

    Method rows without a baseline of the same (model, setting) are emitted
    with an empty improvement cell and listed in ``flagged``.
    """
    base_index = {(b.model_label, b.setting_label): b for b in baselines}
    settings: list[str] = []
    for r in (*references, *baselines, *reports):
        if r.setting_label not in settings:
            settings.append(r.setting_label)

    out = RenderedReport("", "")
    md = [
        "| Model | Setting | Description | Reflection | Decision | Improvement |",
        "|---|---|---|---|---|---|",
    ]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)

    def emit(r: ScoreReport, label: str, imp: ComparisonRow | None) -> None:
        md.append(
            f"| {label} | {r.setting_label} | {_fmt(r.description)} | {_fmt(r.reflection)} "
            f"| {_fmt(r.decision)} | {imp.display if imp else ''} |"
        )
        writer.writerow([
            label,
            r.setting_label,
            "" if r.description is None else _fmt(r.description),
            "" if r.reflection is None else _fmt(r.reflection),
            _fmt(r.decision),
            "" if imp is None else f"{imp.relative_improvement_pct:.2f}",
        ])

    for setting in settings:
        for r in references:
            if r.setting_label == setting:
                emit(r, r.model_label, None)
        for r in reports:
            if r.setting_label != setting:
                continue
            base = base_index.get((r.model_label, r.setting_label))
            if base is not None:
                emit(base, f"{r.model_label} (base)", None)
                imp = relative_improvement(base.decision, r.decision)
            else:
                imp = None
                out.flagged.append(f"{r.model_label} / {r.setting_label}: no baseline")
            emit(r, r.model_label, imp)
            out.comparisons.append((r, imp))
    thresholds = sorted({r.clarity_threshold for r in reports if r.clarity_threshold is not None})
    if thresholds:
        md.append("")
        md.append("Reflection gold: occlusion ratio >= " + ", ".join(f"{t:g}" for t in thresholds) + " counts as unclear.")
    for note in out.flagged:
        md.append(f"\n> flagged: {note}")
    out.markdown = "\n".join(md) + "\n"
    out.csv = buf.getvalue()
    return out


def load_table1() -> tuple[list[ScoreReport], list[ScoreReport], list[ScoreReport], dict[str, Any]]:
    """Bundled comparison-table scores as ``(methods, baselines, references, raw)``."""
    raw = json.loads(resources.files("occcot").joinpath("data/table1.json").read_text("utf-8"))
    groups: dict[str, list[ScoreReport]] = {"method": [], "baseline": [], "reference": []}
    for row in raw["rows"]:
        groups[row["role"]].append(
            ScoreReport(
                model_label=row["model"],
                setting_label=row["setting"],
                description=row["description"],
                reflection=row["reflection"],
                decision=row["decision"],
            )
        )
    return groups["method"], groups["baseline"], groups["reference"], raw
