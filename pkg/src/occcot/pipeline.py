"""Description -> self-reflection -> gated final decision.

Each sample goes through five model calls in a fixed order. The three
attribute answers accumulate in the prompt context, the reflection verdict
decides whether the 3D expert is consulted, and the final-decision prompt
carries the full context plus any reconstruction locator as an attachment.
"""

from __future__ import annotations

import enum
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Sequence

from .backends import (
    DESCRIPTION_STAGES,
    STAGE_ORDER,
    BackendError,
    BackendRequest,
    BackendResponse,
    Expert,
    ExpertError,
    ModelBackend,
    Stage,
)

log = logging.getLogger(__name__)

ATTRIBUTE_FOR_STAGE = {Stage.ROUNDNESS: "round", Stage.LENGTH: "long", Stage.THICKNESS: "thin"}


class Clarity(str, enum.Enum):
    CLEAR = "clear"
    UNCLEAR = "unclear"


class InvalidSampleError(ValueError):
    pass


class StageFailure(RuntimeError):
    """A stage could not complete; ``partial`` holds the trace up to the failure."""

    def __init__(self, stage: Stage, message: str, partial: "PipelineRun"):
        self.stage = stage
        self.partial = partial
        super().__init__(f"{partial.sample_id}: stage {stage.value} failed: {message}")


@dataclass(frozen=True)
class QuestionTemplates:
    roundness: str = "Is the object in the hand round?"
    length: str = "Is the object in the hand long?"
    thickness: str = "Is the object in the hand thin?"
    self_reflection: str = "Is it clear to identify the object?"
    final_decision: str = "What is the object in the hand?"

    def for_stage(self, stage: Stage) -> str:
        return getattr(self, Stage(stage).value)


@dataclass(frozen=True)
class PipelineConfig:
    templates: QuestionTemplates = field(default_factory=QuestionTemplates)
    reflection_fallback: Clarity = Clarity.UNCLEAR
    expert_failure_policy: str = "degrade"  # or "fail"
    use_expert: bool = True
    max_retries: int = 2
    backoff_s: float = 0.05
    workers: int = 8
    want_logprobs: bool = False

    def __post_init__(self) -> None:
        if self.expert_failure_policy not in ("degrade", "fail"):
            raise ValueError(f"unknown expert failure policy {self.expert_failure_policy!r}")
        if self.max_retries < 0 or self.workers < 1:
            raise ValueError("max_retries must be >= 0 and workers >= 1")
        object.__setattr__(self, "reflection_fallback", Clarity(self.reflection_fallback))


@dataclass(frozen=True)
class Sample:
    id: str
    image_ref: str
    gold_object: str
    gold_attributes: dict[str, bool]
    occlusion_ratio: float

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidSampleError("sample id must be non-empty")
        if not self.image_ref:
            raise InvalidSampleError(f"sample {self.id!r} has an empty image_ref")
        if not 0.0 <= self.occlusion_ratio <= 1.0:
            raise InvalidSampleError(f"sample {self.id!r}: occlusion_ratio outside [0, 1]")


@dataclass(frozen=True)
class StagePrompt:
    stage: Stage
    text: str
    context: tuple[tuple[str, str], ...]
    attachments: tuple[str, ...]

    def to_request(self, sample_id: str, want_logprobs: bool = False) -> BackendRequest:
        return BackendRequest(
            sample_id=sample_id,
            stage=self.stage,
            prompt_text=self.text,
            context=self.context,
            attachments=self.attachments,
            want_logprobs=want_logprobs,
        )


@dataclass(frozen=True)
class Interaction:
    stage: Stage
    prompt: str
    response: str
    latency_ms: int
    attempts: int = 1
    attachments: tuple[str, ...] = ()
    token_logps: tuple[float, ...] | None = None


@dataclass
class PipelineRun:
    sample_id: str
    sd_answers: dict[str, str] = field(default_factory=dict)
    sr_answer: Clarity | None = None
    expert_invoked: bool = False
    expert_output_ref: str | None = None
    fd_answer: str | None = None
    interactions: list[Interaction] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    gated: bool = True

    def check(self) -> None:
        """Assert the invariants of a completed run."""
        if len(self.interactions) != 5:
            raise AssertionError(f"{self.sample_id}: {len(self.interactions)} interactions, expected 5")
        if [i.stage for i in self.interactions] != list(STAGE_ORDER):
            raise AssertionError(f"{self.sample_id}: interactions out of stage order")
        if self.gated and self.expert_invoked != (self.sr_answer is Clarity.UNCLEAR):
            raise AssertionError(f"{self.sample_id}: expert gating violated")
        if self.expert_output_ref is not None and not self.expert_invoked:
            raise AssertionError(f"{self.sample_id}: expert output without invocation")

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "sd_answers": {k: self.sd_answers[k] for k in ("round", "long", "thin") if k in self.sd_answers},
            "sr_answer": self.sr_answer.value if self.sr_answer else None,
            "expert_invoked": self.expert_invoked,
            "expert_output_ref": self.expert_output_ref,
            "fd_answer": self.fd_answer,
            "gated": self.gated,
            "flags": list(self.flags),
            "interactions": [
                {
                    "sample_id": self.sample_id,
                    "stage": i.stage.value,
                    "prompt": i.prompt,
                    "text": i.response,
                    "attachments": list(i.attachments),
                    "latency_ms": i.latency_ms,
                    "attempts": i.attempts,
                    "token_logps": list(i.token_logps) if i.token_logps is not None else None,
                }
                for i in self.interactions
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "PipelineRun":
        inter = [
            Interaction(
                stage=Stage(i["stage"]),
                prompt=i["prompt"],
                response=i["text"],
                latency_ms=int(i.get("latency_ms", 0)),
                attempts=int(i.get("attempts", 1)),
                attachments=tuple(i.get("attachments", ())),
                token_logps=tuple(i["token_logps"]) if i.get("token_logps") is not None else None,
            )
            for i in obj.get("interactions", [])
        ]
        return cls(
            sample_id=obj["sample_id"],
            sd_answers=dict(obj.get("sd_answers", {})),
            sr_answer=Clarity(obj["sr_answer"]) if obj.get("sr_answer") else None,
            expert_invoked=bool(obj.get("expert_invoked", False)),
            expert_output_ref=obj.get("expert_output_ref"),
            fd_answer=obj.get("fd_answer"),
            interactions=inter,
            flags=list(obj.get("flags", [])),
            gated=bool(obj.get("gated", True)),
        )


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def build_stage_prompts(
    sample: Sample,
    templates: QuestionTemplates | None = None,
    answers: Sequence[str] = (),
) -> list[StagePrompt]:
    """The three attribute prompts, roundness -> length -> thickness.

    ``answers`` holds the answers received so far; prompt ``k`` carries the
    QA pairs of prompts ``0..k-1`` that have been answered.
    """
    if not sample.image_ref:
        raise InvalidSampleError(f"sample {sample.id!r} has an empty image_ref")
    templates = templates or QuestionTemplates()
    prompts = []
    context: list[tuple[str, str]] = []
    for k, stage in enumerate(DESCRIPTION_STAGES):
        text = templates.for_stage(stage)
        prompts.append(StagePrompt(stage, text, tuple(context), (sample.image_ref,)))
        if k < len(answers):
            context.append((text, answers[k]))
    return prompts


def _call(
    backend: ModelBackend,
    request: BackendRequest,
    run: PipelineRun,
    config: PipelineConfig,
) -> tuple[BackendResponse, int]:
    attempt = 0
    while True:
        attempt += 1
        try:
            return backend.complete(request), attempt
        except BackendError as exc:
            if exc.transient and attempt <= config.max_retries:
                delay = config.backoff_s * 2 ** (attempt - 1)
                log.info("%s/%s: transient error (%s); retry %d in %.3fs",
                         request.sample_id, request.stage.value, exc, attempt, delay)
                time.sleep(delay)
                continue
            raise StageFailure(request.stage, str(exc), run) from exc


def _record(run: PipelineRun, prompt: StagePrompt, resp: BackendResponse, attempts: int) -> None:
    run.interactions.append(
        Interaction(
            stage=prompt.stage,
            prompt=prompt.text,
            response=resp.text,
            latency_ms=resp.latency_ms,
            attempts=attempts,
            attachments=prompt.attachments,
            token_logps=resp.token_logps,
        )
    )


def run_description_stage(
    backend: ModelBackend,
    sample: Sample,
    config: PipelineConfig | None = None,
    run: PipelineRun | None = None,
) -> dict[str, str]:
    config = config or PipelineConfig()
    run = run if run is not None else PipelineRun(sample.id)
    answers: list[str] = []
    for k in range(len(DESCRIPTION_STAGES)):
        prompt = build_stage_prompts(sample, config.templates, answers)[k]
        resp, attempts = _call(backend, prompt.to_request(sample.id, config.want_logprobs), run, config)
        _record(run, prompt, resp, attempts)
        answers.append(resp.text)
        run.sd_answers[ATTRIBUTE_FOR_STAGE[prompt.stage]] = resp.text
    return dict(run.sd_answers)


_LEADING_WORD = re.compile(r"^\W*([a-zA-Z]+)")


def parse_reflection(raw: str, fallback: Clarity = Clarity.UNCLEAR) -> tuple[Clarity, bool]:
    """Map a reflection answer to a verdict; the flag is True when the fallback was used."""
    m = _LEADING_WORD.match(raw or "")
    word = m.group(1).lower() if m else ""
    if word == "yes":
        return Clarity.CLEAR, False
    if word == "no":
        return Clarity.UNCLEAR, False
    return Clarity(fallback), True


def _context(run: PipelineRun) -> tuple[tuple[str, str], ...]:
    return tuple((i.prompt, i.response) for i in run.interactions)


def run_reflection_stage(
    backend: ModelBackend,
    sample: Sample,
    sd_answers: dict[str, str],
    config: PipelineConfig | None = None,
    run: PipelineRun | None = None,
) -> Clarity:
    config = config or PipelineConfig()
    if set(sd_answers) != {"round", "long", "thin"}:
        raise ValueError(f"{sample.id}: description answers incomplete: {sorted(sd_answers)}")
    if run is None:
        run = PipelineRun(sample.id, sd_answers=dict(sd_answers))
        context = tuple(
            (config.templates.for_stage(st), sd_answers[ATTRIBUTE_FOR_STAGE[st]])
            for st in DESCRIPTION_STAGES
        )
    else:
        context = _context(run)
    prompt = StagePrompt(
        Stage.SELF_REFLECTION, config.templates.self_reflection, context, (sample.image_ref,)
    )
    resp, attempts = _call(backend, prompt.to_request(sample.id, config.want_logprobs), run, config)
    _record(run, prompt, resp, attempts)
    verdict, fell_back = parse_reflection(resp.text, config.reflection_fallback)
    if fell_back:
        run.flags.append("reflection_unparsed")
    run.sr_answer = verdict
    return verdict


def run_final_decision_stage(
    backend: ModelBackend,
    expert: Expert | None,
    sample: Sample,
    sr_answer: Clarity,
    context: Sequence[tuple[str, str]] = (),
    config: PipelineConfig | None = None,
    run: PipelineRun | None = None,
) -> tuple[str, bool, str | None]:
    """Query the final answer, consulting the expert first when the sample is unclear."""
    config = config or PipelineConfig()
    run = run if run is not None else PipelineRun(sample.id, sr_answer=Clarity(sr_answer))
    attachments: tuple[str, ...] = (sample.image_ref,)
    invoked = False
    recon: str | None = None
    if config.use_expert and Clarity(sr_answer) is Clarity.UNCLEAR:
        invoked = True
        try:
            if expert is None:
                raise ExpertError("no expert configured")
            recon = expert.reconstruct(sample.image_ref)
        except ExpertError as exc:
            if config.expert_failure_policy == "fail":
                run.expert_invoked = True
                raise StageFailure(Stage.FINAL_DECISION, f"expert failed: {exc}", run) from exc
            log.warning("%s: expert failed (%s); answering without reconstruction", sample.id, exc)
            run.flags.append("expert_failed")
        if recon is not None:
            attachments = attachments + (recon,)
    run.expert_invoked = invoked
    run.expert_output_ref = recon
    prompt = StagePrompt(
        Stage.FINAL_DECISION, config.templates.final_decision, tuple(context), attachments
    )
    resp, attempts = _call(backend, prompt.to_request(sample.id, config.want_logprobs), run, config)
    _record(run, prompt, resp, attempts)
    run.fd_answer = resp.text
    return resp.text, invoked, recon


def run_pipeline(
    backend: ModelBackend,
    expert: Expert | None,
    sample: Sample,
    config: PipelineConfig | None = None,
) -> PipelineRun:
    config = config or PipelineConfig()
    run = PipelineRun(sample.id, gated=config.use_expert)
    sd = run_description_stage(backend, sample, config, run)
    sr = run_reflection_stage(backend, sample, sd, config, run)
    run_final_decision_stage(backend, expert, sample, sr, _context(run), config, run)
    return run


def run_batch(
    backend: ModelBackend,
    expert: Expert | None,
    samples: Iterable[Sample],
    config: PipelineConfig | None = None,
    raise_on_failure: bool = True,
) -> list[PipelineRun | StageFailure]:
    """Run samples concurrently; results keep input order.

    With ``raise_on_failure=False`` failed samples appear as their
    :class:`StageFailure` (the partial trace is ``.partial``).
    """
    config = config or PipelineConfig()
    samples = list(samples)
    ids = [s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise InvalidSampleError("sample ids must be unique within a batch")

    def one(sample: Sample) -> PipelineRun | StageFailure:
        try:
            return run_pipeline(backend, expert, sample, config)
        except StageFailure as exc:
            if raise_on_failure:
                raise
            return exc

    if config.workers == 1:
        return [one(s) for s in samples]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(one, samples))


def probe_config(config: PipelineConfig | None = None) -> PipelineConfig:
    """Same configuration with gating disabled, for direct-recognition probes."""
    return replace(config or PipelineConfig(), use_expert=False)
