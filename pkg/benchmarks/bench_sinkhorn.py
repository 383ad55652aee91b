"""Compare the compiled and numpy Sinkhorn kernels on random problems.

    python3 benchmarks/bench_sinkhorn.py [--sizes 100 300 1000] [--repeats 5]

Both backends are called directly, so ``SELMAG_PURE_PYTHON`` does not matter
here. Prints wall time per solve and the largest plan difference.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from selmag.kernels import compiled_impl, python_impl


def problem(n: int, m: int, d: int, seed: int):
    rng = np.random.default_rng(seed)
    xs, xt = rng.normal(size=(n, d)), rng.normal(size=(m, d))
    c = ((xs[:, None, :] - xt[None, :, :]) ** 2).sum(-1)
    c /= c.mean()
    log_mu = np.full(n, -np.log(n))
    log_nu = np.full(m, -np.log(m))
    return c, log_mu, log_nu


def best_time(fn, repeats: int) -> tuple[float, tuple]:
    best, out = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 300, 1000])
    ap.add_argument("--eps", type=float, default=0.05)
    ap.add_argument("--tol", type=float, default=1e-9)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    if compiled_impl is None:
        raise SystemExit("compiled extension not built; run pip install -e . --no-build-isolation")

    print(f"{'n':>6}{'iters':>8}{'python ms':>12}{'cython ms':>12}{'speedup':>9}{'max |dgamma|':>14}")
    for n in args.sizes:
        c, lm, ln = problem(n, n, 16, seed=n)
        zeros = np.zeros(n)
        call = lambda impl: impl.sinkhorn_scaling(c, lm, ln, args.eps, args.tol, 100000, zeros, zeros)
        t_py, out_py = best_time(lambda: call(python_impl), args.repeats)
        t_cy, out_cy = best_time(lambda: call(compiled_impl), args.repeats)
        diff = float(np.abs(out_py[0] - out_cy[0]).max())
        print(f"{n:>6}{out_cy[3]:>8}{t_py * 1e3:>12.2f}{t_cy * 1e3:>12.2f}{t_py / t_cy:>9.2f}{diff:>14.2e}")


if __name__ == "__main__":
    main()
