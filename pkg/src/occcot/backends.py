"""Model and 3D-expert backends.

Three model backends share one ``complete(request) -> BackendResponse`` surface:

* :class:`MockBackend` answers from an in-memory script keyed by ``(sample_id, stage)``.
* :class:`FixtureBackend` replays a JSONL recording (see :func:`load_fixture`).
* :class:`HttpChatBackend` POSTs a chat-completion request to a configured endpoint.

:class:`MockExpert` stands in for the reconstruction model.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import requests

log = logging.getLogger(__name__)

TOKEN_ENV = "OCC_BACKEND_TOKEN"


class Stage(str, enum.Enum):
    ROUNDNESS = "roundness"
    LENGTH = "length"
    THICKNESS = "thickness"
    SELF_REFLECTION = "self_reflection"
    FINAL_DECISION = "final_decision"

    @property
    def order(self) -> int:
        return STAGE_ORDER.index(self)


STAGE_ORDER = (
    Stage.ROUNDNESS,
    Stage.LENGTH,
    Stage.THICKNESS,
    Stage.SELF_REFLECTION,
    Stage.FINAL_DECISION,
)
DESCRIPTION_STAGES = STAGE_ORDER[:3]


class BackendError(RuntimeError):
    """Base class for backend failures. ``transient`` marks retryable errors."""

    transient = False


class MissingKeyError(BackendError, KeyError):
    def __init__(self, sample_id: str, stage: Stage | str):
        self.sample_id = sample_id
        self.stage = Stage(stage)
        super().__init__(f"no scripted response for ({sample_id!r}, {self.stage.value!r})")

    def __str__(self) -> str:
        return self.args[0]


class TransportError(BackendError):
    def __init__(self, message: str, status: int | None = None, transient: bool = False):
        super().__init__(message)
        self.status = status
        self.transient = transient


class ExpertError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackendRequest:
    sample_id: str
    stage: Stage
    prompt_text: str
    context: tuple[tuple[str, str], ...] = ()
    attachments: tuple[str, ...] = ()
    want_logprobs: bool = False

    def __post_init__(self) -> None:
        if not self.prompt_text:
            raise ValueError("prompt_text must be non-empty")
        object.__setattr__(self, "stage", Stage(self.stage))
        object.__setattr__(self, "context", tuple((str(q), str(a)) for q, a in self.context))
        object.__setattr__(self, "attachments", tuple(self.attachments))


def validate_logps(values: Iterable[Any] | None) -> tuple[float, ...] | None:
    if values is None:
        return None
    out = tuple(float(v) for v in values)
    for v in out:
        if not math.isfinite(v) or v > 0:
            raise ValueError(f"token log-probs must be finite and <= 0, got {v!r}")
    return out


@dataclass(frozen=True)
class BackendResponse:
    text: str
    token_logps: tuple[float, ...] | None = None
    latency_ms: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_logps", validate_logps(self.token_logps))
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")


class ModelBackend(Protocol):
    def complete(self, request: BackendRequest) -> BackendResponse: ...


class Expert(Protocol):
    def reconstruct(self, image_ref: str) -> str: ...


# ---------------------------------------------------------------------------
# Mock
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MockScript:
    """``(sample_id, stage) -> text`` with an optional catch-all."""

    responses: Mapping[tuple[str, Stage], str]
    default_text: str | None = None

    def __post_init__(self) -> None:
        normalized = {(sid, Stage(stage)): text for (sid, stage), text in self.responses.items()}
        object.__setattr__(self, "responses", normalized)

    def lookup(self, sample_id: str, stage: Stage) -> str:
        try:
            return self.responses[(sample_id, Stage(stage))]
        except KeyError:
            if self.default_text is not None:
                return self.default_text
            raise MissingKeyError(sample_id, stage) from None


class MockBackend:
    """Deterministic scripted backend.

    ``assisted`` overrides the final-decision text for a sample when the request
    carries more than the sample image, i.e. when expert output is attached.
    """

    def __init__(
        self,
        script: MockScript | Mapping[tuple[str, Stage], str],
        default_text: str | None = None,
        assisted: Mapping[str, str] | None = None,
        token_logps: Mapping[tuple[str, Stage], Sequence[float]] | None = None,
    ):
        if not isinstance(script, MockScript):
            script = MockScript(script, default_text)
        self.script = script
        self.assisted = dict(assisted or {})
        self._logps = {
            (sid, Stage(st)): validate_logps(v) for (sid, st), v in (token_logps or {}).items()
        }

    def complete(self, request: BackendRequest) -> BackendResponse:
        if (
            request.stage is Stage.FINAL_DECISION
            and len(request.attachments) > 1
            and request.sample_id in self.assisted
        ):
            text = self.assisted[request.sample_id]
        else:
            text = self.script.lookup(request.sample_id, request.stage)
        logps = self._logps.get((request.sample_id, request.stage)) if request.want_logprobs else None
        return BackendResponse(text=text, token_logps=logps, latency_ms=0)


# ---------------------------------------------------------------------------
# Fixture replay
# ---------------------------------------------------------------------------


class FixtureError(ValueError):
    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class FixtureBackend:
    """Replays recorded responses; immutable after construction."""

    def __init__(self, entries: Mapping[tuple[str, Stage], BackendResponse]):
        self._entries = dict(entries)

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self) -> list[tuple[str, Stage]]:
        return list(self._entries)

    def complete(self, request: BackendRequest) -> BackendResponse:
        try:
            resp = self._entries[(request.sample_id, request.stage)]
        except KeyError:
            raise MissingKeyError(request.sample_id, request.stage) from None
        if not request.want_logprobs and resp.token_logps is not None:
            return BackendResponse(resp.text, None, resp.latency_ms)
        return resp


def load_fixture(path: str | os.PathLike) -> FixtureBackend:
    """Load a JSONL fixture: one ``{sample_id, stage, text[, token_logps]}`` object per line.

    Extra keys are ignored so interaction logs from ``runs.jsonl`` can be
    replayed directly. Later duplicates replace earlier ones with a warning.
    """
    path = str(path)
    entries: dict[tuple[str, Stage], BackendResponse] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise FixtureError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise FixtureError(path, lineno, "expected a JSON object")
            for key in ("sample_id", "stage", "text"):
                if not isinstance(obj.get(key), str):
                    raise FixtureError(path, lineno, f"field {key!r} missing or not a string")
            try:
                key = (obj["sample_id"], Stage(obj["stage"]))
                resp = BackendResponse(
                    text=obj["text"],
                    token_logps=obj.get("token_logps"),
                    latency_ms=int(obj.get("latency_ms", 0)),
                )
            except (ValueError, TypeError) as exc:
                raise FixtureError(path, lineno, str(exc)) from None
            if key in entries:
                log.warning("%s:%d: duplicate key %s replaces earlier entry", path, lineno, key)
            entries[key] = resp
    return FixtureBackend(entries)


# ---------------------------------------------------------------------------
# HTTP chat-completion client
# ---------------------------------------------------------------------------


def build_chat_body(request: BackendRequest, model: str) -> dict[str, Any]:
    """Chat-completion JSON body: prior QA turns, then the question plus attachments."""
    messages: list[dict[str, Any]] = []
    for question, answer in request.context:
        messages.append({"role": "user", "content": question})
        messages.append({"role": "assistant", "content": answer})
    content: list[dict[str, Any]] = [{"type": "text", "text": request.prompt_text}]
    for ref in request.attachments:
        content.append({"type": "image_url", "image_url": {"url": ref}})
    messages.append({"role": "user", "content": content})
    return {"model": model, "messages": messages, "logprobs": bool(request.want_logprobs)}


def parse_chat_response(body: Any) -> tuple[str, tuple[float, ...] | None]:
    try:
        choice = body["choices"][0]
        text = choice["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise TransportError("malformed response body: no choices[0].message.content") from None
    if not isinstance(text, str):
        raise TransportError("malformed response body: content is not a string")
    logps = None
    lp = choice.get("logprobs") if isinstance(choice, dict) else None
    if lp and isinstance(lp, dict) and lp.get("content") is not None:
        try:
            logps = validate_logps(tok["logprob"] for tok in lp["content"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed logprobs: {exc}") from None
    return text, logps


@dataclass
class HttpChatBackend:
    """Minimal chat-completion client. Retries are the caller's job."""

    base_url: str
    model: str
    path: str = "/v1/chat/completions"
    timeout_s: float = 30.0
    max_in_flight: int = 8
    token: str | None = None
    _sem: threading.BoundedSemaphore = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.token is None:
            self.token = os.environ.get(TOKEN_ENV)
        self._sem = threading.BoundedSemaphore(self.max_in_flight)

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/" + self.path.lstrip("/")

    def complete(self, request: BackendRequest) -> BackendResponse:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        body = build_chat_body(request, self.model)
        start = time.perf_counter()
        with self._sem:
            try:
                resp = requests.post(self.url, json=body, headers=headers, timeout=self.timeout_s)
            except requests.Timeout:
                raise TransportError(f"timeout after {self.timeout_s}s", transient=True) from None
            except requests.ConnectionError as exc:
                raise TransportError(f"connection failed: {exc}", transient=True) from None
        latency = int(round((time.perf_counter() - start) * 1000))
        if not 200 <= resp.status_code < 300:
            raise TransportError(
                f"HTTP {resp.status_code}: {resp.text[:200]}",
                status=resp.status_code,
                transient=resp.status_code == 429 or resp.status_code >= 500,
            )
        try:
            payload = resp.json()
        except ValueError:
            raise TransportError("malformed response body: not JSON", status=resp.status_code) from None
        text, logps = parse_chat_response(payload)
        if not request.want_logprobs:
            logps = None
        return BackendResponse(text=text, token_logps=logps, latency_ms=latency)


# ---------------------------------------------------------------------------
# Expert
# ---------------------------------------------------------------------------


class MockExpert:
    """Appends ``#recon`` to the image locator.

    Failures are simulated deterministically: a call fails when a hash of
    ``(seed, image_ref)`` falls below ``failure_rate``.
    """

    SUFFIX = "#recon"

    def __init__(self, failure_rate: float = 0.0, seed: int = 0):
        if not 0.0 <= failure_rate <= 1.0:
            raise ValueError(f"failure_rate must lie in [0, 1], got {failure_rate!r}")
        self.failure_rate = failure_rate
        self.seed = seed
        self._lock = threading.Lock()
        self.calls = 0

    def _draw(self, image_ref: str) -> float:
        digest = hashlib.sha256(f"{self.seed}:{image_ref}".encode()).digest()
        return int.from_bytes(digest[:8], "big") / 2**64

    def reconstruct(self, image_ref: str) -> str:
        if not image_ref:
            raise ExpertError("image_ref must be non-empty")
        with self._lock:
            self.calls += 1
        if self.failure_rate > 0 and self._draw(image_ref) < self.failure_rate:
            raise ExpertError(f"simulated reconstruction failure for {image_ref!r}")
        return image_ref + self.SUFFIX
