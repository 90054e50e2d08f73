import threading

import pytest

from occcot.backends import STAGE_ORDER, MockBackend, MockExpert, Stage, TransportError
from occcot.pipeline import (
    Clarity,
    InvalidSampleError,
    PipelineConfig,
    PipelineRun,
    QuestionTemplates,
    Sample,
    StageFailure,
    build_stage_prompts,
    parse_reflection,
    probe_config,
    run_batch,
    run_description_stage,
    run_final_decision_stage,
    run_pipeline,
    run_reflection_stage,
)

FAST = PipelineConfig(backoff_s=0.0)


def sample(sid="s1", image="img/001.png"):
    return Sample(sid, image, "mug", {"round": True, "long": False, "thin": False}, 0.3)


def script_for(sid, reflection="yes", answer="a mug", attrs=("yes", "no", "no")):
    texts = dict(zip(STAGE_ORDER, (*attrs, reflection, answer)))
    return {(sid, st): t for st, t in texts.items()}


# --- prompts ---------------------------------------------------------------


def test_prompts_in_order_with_templates():
    prompts = build_stage_prompts(sample())
    assert [p.stage for p in prompts] == [Stage.ROUNDNESS, Stage.LENGTH, Stage.THICKNESS]
    assert [p.text for p in prompts] == [
        "Is the object in the hand round?",
        "Is the object in the hand long?",
        "Is the object in the hand thin?",
    ]
    assert all(p.attachments == ("img/001.png",) for p in prompts)
    assert prompts[0].context == ()


def test_prompt_context_accumulates_answers():
    prompts = build_stage_prompts(sample(), answers=["yes", "no"])
    assert prompts[1].context == (("Is the object in the hand round?", "yes"),)
    assert len(prompts[2].context) == 2


def test_custom_templates():
    t = QuestionTemplates(roundness="Round?")
    assert build_stage_prompts(sample(), t)[0].text == "Round?"


def test_empty_image_ref_rejected():
    with pytest.raises(InvalidSampleError):
        sample(image="")
    with pytest.raises(InvalidSampleError):
        Sample("s", "img", "mug", {}, 1.5)


# --- description ------------------------------------------------------------


def test_description_stage_answers():
    backend = MockBackend(script_for("s1"))
    run = PipelineRun("s1")
    answers = run_description_stage(backend, sample(), FAST, run)
    assert answers == {"round": "yes", "long": "no", "thin": "no"}
    assert [i.stage for i in run.interactions] == list(STAGE_ORDER[:3])


def test_description_missing_key_is_stage_failure():
    script = script_for("s1")
    del script[("s1", Stage.LENGTH)]
    with pytest.raises(StageFailure) as info:
        run_description_stage(MockBackend(script), sample(), FAST)
    assert info.value.stage is Stage.LENGTH
    assert len(info.value.partial.interactions) == 1


# --- reflection -------------------------------------------------------------


@pytest.mark.parametrize(
    "raw,expected,fell_back",
    [
        ("Yes, it is clear.", Clarity.CLEAR, False),
        ("yes", Clarity.CLEAR, False),
        ("no", Clarity.UNCLEAR, False),
        ("  No. It is hidden.", Clarity.UNCLEAR, False),
        ("maybe", Clarity.UNCLEAR, True),
        ("", Clarity.UNCLEAR, True),
        ("yesterday", Clarity.UNCLEAR, True),
    ],
)
def test_parse_reflection(raw, expected, fell_back):
    assert parse_reflection(raw) == (expected, fell_back)


def test_parse_reflection_custom_fallback():
    assert parse_reflection("perhaps", Clarity.CLEAR) == (Clarity.CLEAR, True)


def test_reflection_stage_flags_unparsed():
    backend = MockBackend(script_for("s1", reflection="maybe"))
    run = run_pipeline(backend, MockExpert(), sample(), FAST)
    assert run.sr_answer is Clarity.UNCLEAR
    assert "reflection_unparsed" in run.flags
    assert run.expert_invoked


def test_reflection_requires_all_attributes():
    backend = MockBackend(script_for("s1"))
    with pytest.raises(ValueError):
        run_reflection_stage(backend, sample(), {"round": "yes"}, FAST)
    full = {"round": "yes", "long": "no", "thin": "no"}
    assert run_reflection_stage(backend, sample(), full, FAST) is Clarity.CLEAR


# --- final decision ---------------------------------------------------------


def test_final_decision_clear_path():
    backend = MockBackend(script_for("s1"))
    expert = MockExpert()
    text, invoked, recon = run_final_decision_stage(backend, expert, sample(), Clarity.CLEAR, config=FAST)
    assert (text, invoked, recon) == ("a mug", False, None)
    assert expert.calls == 0


def test_final_decision_unclear_path_attaches_reconstruction():
    backend = MockBackend(script_for("s1", reflection="no", answer="bowl"), assisted={"s1": "a mug"})
    expert = MockExpert()
    run = run_pipeline(backend, expert, sample(), FAST)
    fd = run.interactions[-1]
    assert fd.attachments == ("img/001.png", "img/001.png#recon")
    assert run.fd_answer == "a mug"
    assert run.expert_output_ref == "img/001.png#recon"
    assert expert.calls == 1
    run.check()


def test_final_decision_degrades_on_expert_failure():
    backend = MockBackend(script_for("s1", reflection="no", answer="bowl"), assisted={"s1": "a mug"})
    run = run_pipeline(backend, MockExpert(failure_rate=1.0), sample(), FAST)
    assert run.expert_invoked and run.expert_output_ref is None
    assert "expert_failed" in run.flags
    assert run.fd_answer == "bowl"
    assert run.interactions[-1].attachments == ("img/001.png",)
    run.check()


def test_final_decision_fail_policy():
    backend = MockBackend(script_for("s1", reflection="no"))
    cfg = PipelineConfig(expert_failure_policy="fail", backoff_s=0.0)
    with pytest.raises(StageFailure) as info:
        run_pipeline(backend, MockExpert(failure_rate=1.0), sample(), cfg)
    assert info.value.stage is Stage.FINAL_DECISION
    assert len(info.value.partial.interactions) == 4


def test_final_decision_gets_full_context():
    backend = MockBackend(script_for("s1"))
    run = run_pipeline(backend, MockExpert(), sample(), FAST)
    assert [i.prompt for i in run.interactions][-1] == "What is the object in the hand?"
    seen = []

    class Spy:
        def complete(self, request):
            seen.append(request)
            return backend.complete(request)

    run_pipeline(Spy(), MockExpert(), sample(), FAST)
    lengths = [len(r.context) for r in seen]
    assert lengths == [0, 1, 2, 3, 4]
    assert seen[-1].context[3] == ("Is it clear to identify the object?", "yes")


def test_invalid_config():
    with pytest.raises(ValueError):
        PipelineConfig(expert_failure_policy="ignore")
    with pytest.raises(ValueError):
        PipelineConfig(workers=0)


# --- whole runs -------------------------------------------------------------


def test_run_is_deterministic_and_serialisable():
    backend = MockBackend(script_for("s1", reflection="no"), assisted={"s1": "mug"})
    a = run_pipeline(backend, MockExpert(), sample(), FAST)
    b = run_pipeline(backend, MockExpert(), sample(), FAST)
    assert a.to_json() == b.to_json()
    again = PipelineRun.from_dict(a.to_dict())
    assert again.to_json() == a.to_json()
    again.check()


def test_batch_keeps_order_and_gates_expert():
    samples = [sample(f"s{i}") for i in range(10)]
    script = {}
    for i in range(10):
        script.update(script_for(f"s{i}", reflection="no" if i in (2, 5, 7) else "yes"))
    expert = MockExpert()
    runs = run_batch(MockBackend(script), expert, samples, PipelineConfig(workers=4, backoff_s=0))
    assert [r.sample_id for r in runs] == [s.id for s in samples]
    assert expert.calls == 3
    assert sum(r.expert_invoked for r in runs) == 3
    for r in runs:
        r.check()


def test_batch_rejects_duplicate_ids():
    with pytest.raises(InvalidSampleError):
        run_batch(MockBackend({}), None, [sample("a"), sample("a")])


def test_batch_collects_failures():
    script = script_for("s0")
    runs = run_batch(MockBackend(script), MockExpert(), [sample("s0"), sample("s1")], FAST, raise_on_failure=False)
    assert isinstance(runs[0], PipelineRun)
    assert isinstance(runs[1], StageFailure)
    with pytest.raises(StageFailure):
        run_batch(MockBackend(script), MockExpert(), [sample("s0"), sample("s1")], FAST)


def test_probe_config_skips_expert():
    backend = MockBackend(script_for("s1", reflection="no"))
    expert = MockExpert()
    run = run_pipeline(backend, expert, sample(), probe_config(FAST))
    assert not run.expert_invoked and expert.calls == 0
    assert not run.gated
    run.check()


class Flaky:
    """Fails transiently a fixed number of times per request."""

    def __init__(self, inner, failures, transient=True):
        self.inner = inner
        self.failures = failures
        self.transient = transient
        self.calls = 0
        self._lock = threading.Lock()
        self._left = {}

    def complete(self, request):
        key = (request.sample_id, request.stage)
        with self._lock:
            self.calls += 1
            left = self._left.setdefault(key, self.failures)
            if left:
                self._left[key] = left - 1
                raise TransportError("flaky", status=None, transient=self.transient)
        return self.inner.complete(request)


def test_transient_errors_are_retried():
    backend = Flaky(MockBackend(script_for("s1")), failures=2)
    run = run_pipeline(backend, MockExpert(), sample(), FAST)
    assert [i.attempts for i in run.interactions] == [3] * 5
    assert backend.calls == 15


def test_retries_exhausted_or_permanent():
    with pytest.raises(StageFailure):
        run_pipeline(Flaky(MockBackend(script_for("s1")), failures=3), MockExpert(), sample(), FAST)
    permanent = Flaky(MockBackend(script_for("s1")), failures=1, transient=False)
    with pytest.raises(StageFailure):
        run_pipeline(permanent, MockExpert(), sample(), FAST)
    assert permanent.calls == 1
