"""Known-value and gradient checks for the loss kernels (``occcot loss-selftest``)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses as L

VALUE_TOL = 1e-9
GRAD_TOL = 1e-6
GRAD_POINTS = 100


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    expected: float
    tol: float
    kind: str = "abs"  # "abs": |value - expected| <= tol; "max": value < tol

    @property
    def ok(self) -> bool:
        if self.kind == "max":
            return self.value < self.tol
        return abs(self.value - self.expected) <= self.tol

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        if self.kind == "max":
            return f"[{status}] {self.name}: {self.value:.3e} < {self.tol:g}"
        return f"[{status}] {self.name}: {self.value:.12f} (expected {self.expected:.12f})"


def _lr_trace(lr: float, length: int = 4) -> L.LogProbTrace:
    """Trace whose policy-minus-reference log-ratio equals ``lr``."""
    base = -abs(lr) - 1.0
    pol = np.full(length, base / length)
    ref = np.full(length, (base - lr) / length)
    return L.LogProbTrace(pol, ref)


def value_checks() -> list[Check]:
    ln2, ln4 = math.log(2), math.log(4)
    h1 = L.MpoHyper(beta=1.0, delta=0.0)
    zero = _lr_trace(0.0)
    checks = [
        Check("preference identity", L.preference_loss(zero, zero, h1), ln2, VALUE_TOL),
        Check("preference beta=0", L.preference_loss(_lr_trace(3.0), _lr_trace(-1.0), L.MpoHyper(beta=0.0)), ln2, VALUE_TOL),
        Check("preference lr_c=2", L.preference_loss(_lr_trace(2.0), zero, h1), math.log1p(math.exp(-2.0)), VALUE_TOL),
        Check("quality identity", L.quality_loss(zero, zero, h1).total, 2 * ln2, VALUE_TOL),
        Check("quality lr=+-3", L.quality_loss(_lr_trace(3.0), _lr_trace(-3.0), h1).total, 2 * math.log1p(math.exp(-3.0)), VALUE_TOL),
        Check("quality delta=1 l_plus", L.quality_loss(zero, zero, L.MpoHyper(1.0, 1.0)).l_plus, math.log1p(math.exp(1.0)), VALUE_TOL),
        Check("quality delta=1 l_minus", L.quality_loss(zero, zero, L.MpoHyper(1.0, 1.0)).l_minus, math.log1p(math.exp(-1.0)), VALUE_TOL),
        Check("generation uniform-4", L.generation_loss(L.LogProbTrace.uniform(-ln4, 7)), ln4, VALUE_TOL),
        Check("generation mean", L.generation_loss(L.LogProbTrace([-0.5, -1.5], [-1.0, -1.0])), 1.0, VALUE_TOL),
        Check("cross-entropy 0.1", L.cross_entropy([0.9, 0.1], 1), -math.log(0.1), VALUE_TOL),
    ]
    return checks


def gradient_checks(seed: int = 0, n_points: int = GRAD_POINTS) -> list[Check]:
    rng = np.random.default_rng(seed)
    lrs = rng.uniform(-5.0, 5.0, size=(n_points, 2))
    betas = rng.uniform(0.05, 2.0, size=n_points)
    deltas = rng.uniform(-1.0, 1.0, size=n_points)

    pref = max(
        L.finite_diff_check(
            lambda x, b=b: L.preference_loss_lr(x[0], x[1], b),
            lambda x, b=b: np.array(L.preference_grad_lr(x[0], x[1], b)),
            p,
        )
        for p, b in zip(lrs, betas)
    )
    qual = max(
        L.finite_diff_check(
            lambda x, b=b, d=d: L.quality_loss_lr(x[0], x[1], b, d).total,
            lambda x, b=b, d=d: np.array(L.quality_grad_lr(x[0], x[1], b, d)),
            p,
        )
        for p, b, d in zip(lrs, betas, deltas)
    )
    gen = 0.0
    for _ in range(n_points):
        n = int(rng.integers(1, 12))
        x0 = -rng.uniform(0.5, 5.0, size=n)
        ref = np.zeros(n)
        gen = max(
            gen,
            L.finite_diff_check(
                lambda x: L.generation_loss(L.LogProbTrace(x, ref)),
                lambda x: L.generation_grad(L.LogProbTrace(x, ref)),
                x0,
            ),
        )
    return [
        Check(f"preference gradient ({n_points} pts)", pref, 0.0, GRAD_TOL, "max"),
        Check(f"quality gradient ({n_points} pts)", qual, 0.0, GRAD_TOL, "max"),
        Check(f"generation gradient ({n_points} pts)", gen, 0.0, GRAD_TOL, "max"),
    ]


def run_selftest(seed: int = 0) -> tuple[bool, list[Check]]:
    checks = value_checks() + gradient_checks(seed)
    return all(c.ok for c in checks), checks
