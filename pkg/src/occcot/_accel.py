"""Batch kernels for the preference losses.

Every kernel has a numba ``@njit`` version and a pure-numpy version with
identical semantics. The numba path is used when numba imports cleanly and
``OCCCOT_DISABLE_NUMBA`` is unset (or ``0``); set it to ``1`` to force numpy.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLE = os.environ.get("OCCCOT_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLE:
        raise ImportError("numba disabled via OCCCOT_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def segment_sum_numpy(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sum ``values[offsets[i]:offsets[i+1]]`` for every segment."""
    values = np.asarray(values, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    n = offsets.size - 1
    out = np.zeros(n)
    nonempty = offsets[1:] > offsets[:-1]
    if values.size and nonempty.any():
        starts = offsets[:-1][nonempty]
        out[nonempty] = np.add.reduceat(values, starts)[: starts.size]
    return out


def softplus_numpy(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_numpy(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def preference_batch_numpy(lr_c: np.ndarray, lr_r: np.ndarray, beta: float):
    z = beta * (np.asarray(lr_c, dtype=np.float64) - np.asarray(lr_r, dtype=np.float64))
    loss = softplus_numpy(-z)
    g = beta * (1.0 - sigmoid_numpy(z))
    return loss, -g, g


def quality_batch_numpy(arg_c: np.ndarray, arg_r: np.ndarray, beta: float, delta: float):
    """Quality losses on precomputed sigmoid arguments (log-ratio or ratio)."""
    zc = beta * np.asarray(arg_c, dtype=np.float64) - delta
    zr = beta * np.asarray(arg_r, dtype=np.float64) - delta
    l_plus = softplus_numpy(-zc)
    l_minus = softplus_numpy(zr)
    d_plus = -beta * (1.0 - sigmoid_numpy(zc))
    d_minus = beta * sigmoid_numpy(zr)
    return l_plus, l_minus, d_plus, d_minus


def mpo_batch_numpy(cp, cr, co, rp, rr, ro, beta, delta, ratio):
    """Per-pair (preference, quality, generation) from ragged token arrays."""
    pol_c = segment_sum_numpy(cp, co)
    lr_c = pol_c - segment_sum_numpy(cr, co)
    lr_r = segment_sum_numpy(rp, ro) - segment_sum_numpy(rr, ro)
    pref = softplus_numpy(-beta * (lr_c - lr_r))
    if ratio:
        with np.errstate(over="ignore"):
            a_c, a_r = np.exp(lr_c), np.exp(lr_r)
    else:
        a_c, a_r = lr_c, lr_r
    qual = softplus_numpy(-(beta * a_c - delta)) + softplus_numpy(beta * a_r - delta)
    gen = -pol_c / np.diff(np.asarray(co, dtype=np.int64))
    return pref, qual, gen


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _softplus_scalar(x):
        if x > 0.0:
            return x + np.log1p(np.exp(-x))
        return np.log1p(np.exp(x))

    @njit(cache=True)
    def _sigmoid_scalar(x):
        if x >= 0.0:
            return 1.0 / (1.0 + np.exp(-x))
        ex = np.exp(x)
        return ex / (1.0 + ex)

    @njit(cache=True)
    def _segment_sum_nb(values, offsets):
        n = offsets.shape[0] - 1
        out = np.zeros(n)
        for i in range(n):
            acc = 0.0
            for j in range(offsets[i], offsets[i + 1]):
                acc += values[j]
            out[i] = acc
        return out

    @njit(cache=True)
    def _softplus_nb(x):
        out = np.empty(x.shape[0])
        for i in range(x.shape[0]):
            out[i] = _softplus_scalar(x[i])
        return out

    @njit(cache=True)
    def _sigmoid_nb(x):
        out = np.empty(x.shape[0])
        for i in range(x.shape[0]):
            out[i] = _sigmoid_scalar(x[i])
        return out

    @njit(cache=True)
    def _preference_batch_nb(lr_c, lr_r, beta):
        n = lr_c.shape[0]
        loss = np.empty(n)
        dc = np.empty(n)
        dr = np.empty(n)
        for i in range(n):
            z = beta * (lr_c[i] - lr_r[i])
            loss[i] = _softplus_scalar(-z)
            g = beta * (1.0 - _sigmoid_scalar(z))
            dc[i] = -g
            dr[i] = g
        return loss, dc, dr

    @njit(cache=True)
    def _quality_batch_nb(arg_c, arg_r, beta, delta):
        n = arg_c.shape[0]
        l_plus = np.empty(n)
        l_minus = np.empty(n)
        d_plus = np.empty(n)
        d_minus = np.empty(n)
        for i in range(n):
            zc = beta * arg_c[i] - delta
            zr = beta * arg_r[i] - delta
            l_plus[i] = _softplus_scalar(-zc)
            l_minus[i] = _softplus_scalar(zr)
            d_plus[i] = -beta * (1.0 - _sigmoid_scalar(zc))
            d_minus[i] = beta * _sigmoid_scalar(zr)
        return l_plus, l_minus, d_plus, d_minus

    def segment_sum_numba(values, offsets):
        return _segment_sum_nb(
            np.ascontiguousarray(values, dtype=np.float64),
            np.ascontiguousarray(offsets, dtype=np.int64),
        )

    def softplus_numba(x):
        x = np.asarray(x, dtype=np.float64)
        return _softplus_nb(np.ascontiguousarray(x.ravel())).reshape(x.shape)

    def sigmoid_numba(x):
        x = np.asarray(x, dtype=np.float64)
        return _sigmoid_nb(np.ascontiguousarray(x.ravel())).reshape(x.shape)

    def preference_batch_numba(lr_c, lr_r, beta):
        return _preference_batch_nb(
            np.ascontiguousarray(lr_c, dtype=np.float64),
            np.ascontiguousarray(lr_r, dtype=np.float64),
            float(beta),
        )

    def quality_batch_numba(arg_c, arg_r, beta, delta):
        return _quality_batch_nb(
            np.ascontiguousarray(arg_c, dtype=np.float64),
            np.ascontiguousarray(arg_r, dtype=np.float64),
            float(beta),
            float(delta),
        )

    @njit(cache=True)
    def _mpo_batch_nb(cp, cr, co, rp, rr, ro, beta, delta, ratio):
        n = co.shape[0] - 1
        pref = np.empty(n)
        qual = np.empty(n)
        gen = np.empty(n)
        for i in range(n):
            pol_c = 0.0
            ref_c = 0.0
            for j in range(co[i], co[i + 1]):
                pol_c += cp[j]
                ref_c += cr[j]
            pol_r = 0.0
            ref_r = 0.0
            for j in range(ro[i], ro[i + 1]):
                pol_r += rp[j]
                ref_r += rr[j]
            lr_c = pol_c - ref_c
            lr_r = pol_r - ref_r
            pref[i] = _softplus_scalar(-beta * (lr_c - lr_r))
            if ratio:
                a_c = np.exp(lr_c)
                a_r = np.exp(lr_r)
            else:
                a_c = lr_c
                a_r = lr_r
            qual[i] = _softplus_scalar(-(beta * a_c - delta)) + _softplus_scalar(beta * a_r - delta)
            gen[i] = -pol_c / (co[i + 1] - co[i])
        return pref, qual, gen

    def mpo_batch_numba(cp, cr, co, rp, rr, ro, beta, delta, ratio):
        f = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
        i = lambda a: np.ascontiguousarray(a, dtype=np.int64)  # noqa: E731
        return _mpo_batch_nb(f(cp), f(cr), i(co), f(rp), f(rr), i(ro), float(beta), float(delta), bool(ratio))

    segment_sum = segment_sum_numba
    softplus = softplus_numba
    sigmoid = sigmoid_numba
    preference_batch = preference_batch_numba
    quality_batch = quality_batch_numba
    mpo_batch = mpo_batch_numba
    BACKEND = "numba"
else:
    segment_sum = segment_sum_numpy
    softplus = softplus_numpy
    sigmoid = sigmoid_numpy
    preference_batch = preference_batch_numpy
    quality_batch = quality_batch_numpy
    mpo_batch = mpo_batch_numpy
    BACKEND = "numpy"
