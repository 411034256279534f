"""Time batched polynomial evaluation: numba kernel vs numpy fallback.

    python3 benchmarks/bench_kernels.py [--batch 20000] [--repeat 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from crgeo._kernels import USING_NUMBA, eval_polys
from crgeo.legendre import random_fibration


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=20000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--n", type=int, default=2)
    ap.add_argument("--degree", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    fib = random_fibration(args.n, rng, args.degree, density=0.8)
    cp = fib.compiled()
    vals = rng.standard_normal((args.batch, cp.nvars)) + 1j * rng.standard_normal((args.batch, cp.nvars))
    print(f"{cp.npoly} polynomials, {cp.coef.size} terms, {cp.nvars} variables, batch {args.batch}")

    t_np = _best(lambda: eval_polys(cp, vals, use_numba=False), args.repeat)
    print(f"numpy : {t_np * 1e3:8.2f} ms")
    if USING_NUMBA:
        eval_polys(cp, vals[:2], use_numba=True)  # compile
        t_nb = _best(lambda: eval_polys(cp, vals, use_numba=True), args.repeat)
        diff = np.max(np.abs(eval_polys(cp, vals, use_numba=True) - eval_polys(cp, vals, use_numba=False)))
        print(f"numba : {t_nb * 1e3:8.2f} ms  (speedup {t_np / t_nb:.1f}x, max diff {diff:.1e})")
    else:
        print("numba : unavailable or disabled (CRGEO_NO_NUMBA=1)")


if __name__ == "__main__":
    main()
