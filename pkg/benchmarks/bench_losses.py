"""Numba vs NumPy timings for the batched MPO kernels.

    python benchmarks/bench_losses.py --pairs 200000 --tokens 64

Run with ``OCCCOT_DISABLE_NUMBA=1`` to confirm the library falls back to numpy;
this script times both kernel families directly either way.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from occcot import _accel


def _time(fn, *args, repeat: int = 5) -> float:
    fn(*args)  # warm-up / JIT compile
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def make_batch(n_pairs: int, mean_tokens: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    lengths = rng.integers(1, 2 * mean_tokens, size=n_pairs)
    offsets = np.zeros(n_pairs + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    values = -rng.exponential(1.0, size=int(offsets[-1]))
    return values, offsets


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=200_000)
    ap.add_argument("--tokens", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    values, offsets = make_batch(args.pairs, args.tokens)
    lr_c = np.random.default_rng(1).normal(size=args.pairs)
    lr_r = np.random.default_rng(2).normal(size=args.pairs)
    print(f"active backend: {_accel.BACKEND}; pairs={args.pairs} tokens={values.size}")

    cases = [
        ("segment_sum", (values, offsets)),
        ("preference_batch", (lr_c, lr_r, 0.1)),
        ("quality_batch", (lr_c, lr_r, 0.1, 0.0)),
        ("mpo_batch", (values, values * 0.9, offsets, values * 1.1, values, offsets, 0.1, 0.0, False)),
    ]
    print(f"{'kernel':<18} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, call_args in cases:
        t_np = _time(getattr(_accel, f"{name}_numpy"), *call_args, repeat=args.repeat)
        if _accel.HAVE_NUMBA:
            nb = getattr(_accel, f"{name}_numba")
            t_nb = _time(nb, *call_args, repeat=args.repeat)
            ref = getattr(_accel, f"{name}_numpy")(*call_args)
            got = nb(*call_args)
            ref = ref if isinstance(ref, tuple) else (ref,)
            got = got if isinstance(got, tuple) else (got,)
            assert all(np.allclose(a, b, rtol=1e-10, atol=1e-9) for a, b in zip(ref, got))
            print(f"{name:<18} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>7.1f}x")
        else:
            print(f"{name:<18} {t_np * 1e3:>10.2f} {'n/a':>10} {'':>8}")


if __name__ == "__main__":
    main()
