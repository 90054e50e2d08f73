"""Training objectives: staged supervised losses and mixed preference optimization.

All functions are pure. Sequence log-probabilities are sums of per-token
log-probabilities; only :func:`generation_loss` normalizes by length.
Sigmoid log-terms are evaluated as ``softplus`` so no sum of log-probs is ever
exponentiated (except in the opt-in ``quality_arg="ratio"`` mode).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from . import _accel

PROB_FLOOR = 1e-12
DIST_TOL = 1e-9


class InvalidInputError(ValueError):
    """Raised when a loss receives inputs outside its domain."""


def _finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise InvalidInputError(f"{name} must be finite, got {value!r}")
    return value


def _nonneg(name: str, value: float) -> float:
    value = _finite(name, value)
    if value < 0:
        raise InvalidInputError(f"{name} must be >= 0, got {value!r}")
    return value


def softplus(x: float) -> float:
    """``log(1 + exp(x))`` without overflow."""
    if x > 0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def neg_log_sigmoid(x: float) -> float:
    return softplus(-x)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogProbTrace:
    """Per-token log-probs of one response under the policy and the reference."""

    token_logps_policy: np.ndarray
    token_logps_ref: np.ndarray

    def __post_init__(self) -> None:
        pol = np.asarray(self.token_logps_policy, dtype=np.float64).ravel()
        ref = np.asarray(self.token_logps_ref, dtype=np.float64).ravel()
        if pol.size == 0 or ref.size == 0:
            raise InvalidInputError("log-prob trace must be non-empty")
        if pol.size != ref.size:
            raise InvalidInputError(
                f"policy and reference traces differ in length ({pol.size} vs {ref.size})"
            )
        for name, arr in (("policy", pol), ("reference", ref)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} log-probs must be finite")
            if np.any(arr > 0):
                raise InvalidInputError(f"{name} log-probs must be <= 0")
        pol.setflags(write=False)
        ref.setflags(write=False)
        object.__setattr__(self, "token_logps_policy", pol)
        object.__setattr__(self, "token_logps_ref", ref)

    @classmethod
    def uniform(cls, logp: float, length: int, ref_logp: float | None = None) -> "LogProbTrace":
        ref = logp if ref_logp is None else ref_logp
        return cls(np.full(length, logp), np.full(length, ref))

    def __len__(self) -> int:
        return int(self.token_logps_policy.size)

    @property
    def policy_logp(self) -> float:
        return float(self.token_logps_policy.sum())

    @property
    def ref_logp(self) -> float:
        return float(self.token_logps_ref.sum())

    @property
    def log_ratio(self) -> float:
        """``log pi_theta(y|x) - log pi_ref(y|x)``."""
        return self.policy_logp - self.ref_logp


@dataclass(frozen=True)
class PairTraces:
    chosen: LogProbTrace
    rejected: LogProbTrace


@dataclass(frozen=True)
class MpoWeights:
    w_p: float = 1.0
    w_q: float = 1.0
    w_g: float = 1.0

    def __post_init__(self) -> None:
        for name in ("w_p", "w_q", "w_g"):
            object.__setattr__(self, name, _nonneg(name, getattr(self, name)))


QUALITY_ARGS = ("log_ratio", "ratio")


@dataclass(frozen=True)
class MpoHyper:
    """KL coefficient ``beta``, reward shift ``delta`` and the quality-loss argument form.

    ``quality_arg="log_ratio"`` feeds ``beta * log(pi/pi_ref)`` to the quality
    sigmoids; ``"ratio"`` feeds ``beta * pi/pi_ref`` and will underflow for long
    sequences.
    """

    beta: float = 0.1
    delta: float = 0.0
    quality_arg: str = "log_ratio"

    def __post_init__(self) -> None:
        beta = _finite("beta", self.beta)
        # beta = 0 is accepted so the degenerate limits stay computable
        if beta < 0:
            raise InvalidInputError(f"beta must be >= 0, got {beta!r}")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "delta", _finite("delta", self.delta))
        if self.quality_arg not in QUALITY_ARGS:
            raise InvalidInputError(
                f"quality_arg must be one of {QUALITY_ARGS}, got {self.quality_arg!r}"
            )


@dataclass(frozen=True)
class StagedWeights:
    alpha_r: float = 1.0
    alpha_l: float = 1.0
    alpha_t: float = 1.0
    lambda_sr: float = 1.0
    lambda_fd: float = 1.0

    def __post_init__(self) -> None:
        names = ("alpha_r", "alpha_l", "alpha_t", "lambda_sr", "lambda_fd")
        for name in names:
            object.__setattr__(self, name, _nonneg(name, getattr(self, name)))
        if not any(getattr(self, n) > 0 for n in names):
            raise InvalidInputError("at least one staged weight must be positive")


@dataclass(frozen=True)
class ReconLossInputs:
    image: np.ndarray
    occlusion_mask: np.ndarray
    l3d: float
    l2d: float
    lambda_2d: float

    def __post_init__(self) -> None:
        image = np.asarray(self.image, dtype=np.float64)
        mask = np.asarray(self.occlusion_mask, dtype=np.float64)
        if image.ndim != 2 or mask.ndim != 2:
            raise InvalidInputError("image and occlusion mask must be 2-D grids")
        if image.shape != mask.shape:
            raise InvalidInputError(
                f"image shape {image.shape} does not match mask shape {mask.shape}"
            )
        if not np.all(np.isfinite(image)):
            raise InvalidInputError("image must be finite")
        if np.any(~np.isfinite(mask)) or np.any((mask < 0) | (mask > 1)):
            raise InvalidInputError("occlusion mask entries must lie in [0, 1]")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "occlusion_mask", mask)
        for name in ("l3d", "l2d", "lambda_2d"):
            object.__setattr__(self, name, _nonneg(name, getattr(self, name)))


class TrainPhase(enum.Enum):
    MLP_WARMUP = "MlpWarmup"
    VIT_INCREMENTAL = "VitIncremental"
    FULL_MODEL = "FullModel"


class QualityLoss(NamedTuple):
    l_plus: float
    l_minus: float
    total: float


# ---------------------------------------------------------------------------
# MPO components
# ---------------------------------------------------------------------------


def _check_trace(trace: LogProbTrace) -> LogProbTrace:
    if not isinstance(trace, LogProbTrace):
        raise InvalidInputError(f"expected LogProbTrace, got {type(trace).__name__}")
    return trace


def preference_loss_lr(lr_c: float, lr_r: float, beta: float) -> float:
    """``-log sigmoid(beta * (lr_c - lr_r))`` on log-ratios."""
    return neg_log_sigmoid(beta * (lr_c - lr_r))


def preference_grad_lr(lr_c: float, lr_r: float, beta: float) -> tuple[float, float]:
    g = beta * (1.0 - sigmoid(beta * (lr_c - lr_r)))
    return -g, g


def preference_loss(trace_c: LogProbTrace, trace_r: LogProbTrace, hyper: MpoHyper) -> float:
    """DPO preference loss between a chosen and a rejected response.

    Returned in minimizable form, ``-log sigmoid(beta * (lr_c - lr_r))`` where
    ``lr`` is the policy-minus-reference sequence log-prob.
    """
    _check_trace(trace_c)
    _check_trace(trace_r)
    return preference_loss_lr(trace_c.log_ratio, trace_r.log_ratio, hyper.beta)


def preference_grad(
    trace_c: LogProbTrace, trace_r: LogProbTrace, hyper: MpoHyper
) -> tuple[float, float]:
    """Gradient of :func:`preference_loss` w.r.t. ``(lr_c, lr_r)``."""
    _check_trace(trace_c)
    _check_trace(trace_r)
    return preference_grad_lr(trace_c.log_ratio, trace_r.log_ratio, hyper.beta)


def _quality_arg(lr: float, mode: str) -> tuple[float, float]:
    """Sigmoid argument for a log-ratio and its derivative w.r.t. the log-ratio."""
    if mode == "log_ratio":
        return lr, 1.0
    ratio = math.exp(lr) if lr < 709.0 else math.inf
    return ratio, ratio


def quality_loss_lr(
    lr_c: float, lr_r: float, beta: float, delta: float, quality_arg: str = "log_ratio"
) -> QualityLoss:
    a_c, _ = _quality_arg(lr_c, quality_arg)
    a_r, _ = _quality_arg(lr_r, quality_arg)
    l_plus = neg_log_sigmoid(beta * a_c - delta)
    l_minus = neg_log_sigmoid(-(beta * a_r - delta))
    return QualityLoss(l_plus, l_minus, l_plus + l_minus)


def quality_grad_lr(
    lr_c: float, lr_r: float, beta: float, delta: float, quality_arg: str = "log_ratio"
) -> tuple[float, float]:
    a_c, da_c = _quality_arg(lr_c, quality_arg)
    a_r, da_r = _quality_arg(lr_r, quality_arg)
    d_c = -beta * (1.0 - sigmoid(beta * a_c - delta)) * da_c
    d_r = beta * sigmoid(beta * a_r - delta) * da_r
    return d_c, d_r


def quality_loss(trace_c: LogProbTrace, trace_r: LogProbTrace, hyper: MpoHyper) -> QualityLoss:
    """BCO-style absolute quality loss: chosen pushed above, rejected below the shift."""
    _check_trace(trace_c)
    _check_trace(trace_r)
    return quality_loss_lr(
        trace_c.log_ratio, trace_r.log_ratio, hyper.beta, hyper.delta, hyper.quality_arg
    )


def quality_grad(
    trace_c: LogProbTrace, trace_r: LogProbTrace, hyper: MpoHyper
) -> tuple[float, float]:
    """Gradient of the quality total w.r.t. ``(lr_c, lr_r)``."""
    _check_trace(trace_c)
    _check_trace(trace_r)
    return quality_grad_lr(
        trace_c.log_ratio, trace_r.log_ratio, hyper.beta, hyper.delta, hyper.quality_arg
    )


def generation_loss(trace_c: LogProbTrace) -> float:
    """Length-normalized negative log-likelihood of the chosen response."""
    _check_trace(trace_c)
    return -trace_c.policy_logp / len(trace_c)


def generation_grad(trace_c: LogProbTrace) -> np.ndarray:
    """Gradient of :func:`generation_loss` w.r.t. each policy token log-prob."""
    _check_trace(trace_c)
    n = len(trace_c)
    return np.full(n, -1.0 / n)


def mpo_loss(pair_traces: PairTraces, weights: MpoWeights, hyper: MpoHyper) -> float:
    """``w_p * L_p + w_q * L_q + w_g * L_g`` for one preference pair."""
    c, r = pair_traces.chosen, pair_traces.rejected
    total = 0.0
    if weights.w_p:
        total += weights.w_p * preference_loss(c, r, hyper)
    if weights.w_q:
        total += weights.w_q * quality_loss(c, r, hyper).total
    if weights.w_g:
        total += weights.w_g * generation_loss(c)
    return total


# ---------------------------------------------------------------------------
# Batched MPO (hot path)
# ---------------------------------------------------------------------------


def _ragged(traces: Sequence[LogProbTrace]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.fromiter((len(t) for t in traces), dtype=np.int64, count=len(traces))
    offsets = np.zeros(len(traces) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    pol = np.concatenate([t.token_logps_policy for t in traces])
    ref = np.concatenate([t.token_logps_ref for t in traces])
    return pol, ref, offsets


@dataclass(frozen=True)
class BatchMpo:
    preference: np.ndarray
    quality: np.ndarray
    generation: np.ndarray
    total: np.ndarray

    def mean(self) -> float:
        return float(self.total.mean())


def batch_mpo_from_arrays(
    chosen_policy: np.ndarray,
    chosen_ref: np.ndarray,
    chosen_offsets: np.ndarray,
    rejected_policy: np.ndarray,
    rejected_ref: np.ndarray,
    rejected_offsets: np.ndarray,
    weights: MpoWeights,
    hyper: MpoHyper,
) -> BatchMpo:
    """Per-pair MPO losses from flat ragged token arrays plus offsets."""
    pref, qual, gen = _accel.mpo_batch(
        chosen_policy, chosen_ref, chosen_offsets,
        rejected_policy, rejected_ref, rejected_offsets,
        hyper.beta, hyper.delta, hyper.quality_arg == "ratio",
    )
    total = weights.w_p * pref + weights.w_q * qual + weights.w_g * gen
    return BatchMpo(pref, qual, gen, total)


def batch_mpo_loss(pairs: Sequence[PairTraces], weights: MpoWeights, hyper: MpoHyper) -> BatchMpo:
    if not pairs:
        raise InvalidInputError("batch must contain at least one pair")
    cp, cr, co = _ragged([p.chosen for p in pairs])
    rp, rr, ro = _ragged([p.rejected for p in pairs])
    return batch_mpo_from_arrays(cp, cr, co, rp, rr, ro, weights, hyper)


# ---------------------------------------------------------------------------
# Supervised stage
# ---------------------------------------------------------------------------


def cross_entropy(pred_dist: Sequence[float], label_index: int, floor: float = PROB_FLOOR) -> float:
    p = np.asarray(pred_dist, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidInputError("prediction must be a non-empty probability vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidInputError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > DIST_TOL:
        raise InvalidInputError(f"probabilities sum to {p.sum()!r}, expected 1")
    if isinstance(label_index, bool) or not isinstance(label_index, (int, np.integer)):
        raise InvalidInputError(f"label index must be an integer, got {label_index!r}")
    if not 0 <= label_index < p.size:
        raise InvalidInputError(f"label {label_index} out of range for {p.size} classes")
    return -math.log(max(float(p[label_index]), floor))


ATTRIBUTE_KEYS = ("r", "l", "t")


def staged_supervised_objective(
    attr_losses: Mapping[str, float], sr_loss: float, fd_loss: float, weights: StagedWeights
) -> float:
    """Weighted sum of the three attribute losses, self-reflection and final decision."""
    missing = [k for k in ATTRIBUTE_KEYS if k not in attr_losses]
    if missing:
        raise InvalidInputError(f"missing attribute losses: {missing}")
    alphas = {"r": weights.alpha_r, "l": weights.alpha_l, "t": weights.alpha_t}
    total = 0.0
    for key in ATTRIBUTE_KEYS:
        total += alphas[key] * _nonneg(f"attribute loss {key!r}", attr_losses[key])
    total += weights.lambda_sr * _nonneg("sr_loss", sr_loss)
    total += weights.lambda_fd * _nonneg("fd_loss", fd_loss)
    return total


# ---------------------------------------------------------------------------
# Pre-training stage bookkeeping
# ---------------------------------------------------------------------------


def recon_objective(inputs: ReconLossInputs) -> tuple[np.ndarray, float]:
    """Occlusion-masked image and the combined 3D + weighted 2D loss value."""
    masked = inputs.image * inputs.occlusion_mask
    return masked, inputs.l3d + inputs.lambda_2d * inputs.l2d


_TRAINABLE = {
    TrainPhase.MLP_WARMUP: frozenset({"MLP"}),
    TrainPhase.VIT_INCREMENTAL: frozenset({"ViT", "MLP"}),
    TrainPhase.FULL_MODEL: frozenset({"ViT", "MLP", "LLM"}),
}


def freeze_schedule(phase: TrainPhase | str) -> frozenset[str]:
    """Parameter groups that are trainable in ``phase``; everything else is frozen."""
    return _TRAINABLE[TrainPhase(phase)]


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], Sequence[float]],
    point: Sequence[float],
    epsilon: float = 1e-5,
) -> float:
    """Max over coordinates of ``|a - f| / max(1, |a|)`` for central differences ``f``."""
    if not (0 < epsilon <= 1e-2):
        raise InvalidInputError(f"epsilon must lie in (0, 1e-2], got {epsilon!r}")
    x = np.array(point, dtype=np.float64).ravel()
    analytic = np.asarray(grad_fn(x.copy()), dtype=np.float64).ravel()
    if analytic.shape != x.shape:
        raise InvalidInputError("gradient shape does not match point shape")
    worst = 0.0
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += epsilon
        xm[i] -= epsilon
        fp, fm = float(loss_fn(xp)), float(loss_fn(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise InvalidInputError(f"loss is not finite at perturbed coordinate {i}")
        fd = (fp - fm) / (2 * epsilon)
        a = analytic[i]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
