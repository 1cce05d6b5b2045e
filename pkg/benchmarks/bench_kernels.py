"""Throughput of the compiled RK4 Bloch kernel against the pure-Python twin.

Usage::

    python benchmarks/bench_kernels.py [--steps N] [--repeat R]

Both backends integrate the same driven proton problem (250 Hz Larmor
frequency, 500 steps per period).  The script reports steps per second for
each and checks that the two trajectories agree bit for bit.
"""

import argparse
import math
import time

import numpy as np

from spinamp._kernels import _bloch_py
from spinamp.constants import DEFAULT_CONSTANTS

try:
    from spinamp._kernels import _bloch as _compiled
except ImportError:  # extension not built
    _compiled = None

GAMMA_H = DEFAULT_CONSTANTS.gamma("1H")
NU0 = 250.0


def problem(nsteps):
    b0 = 2 * math.pi * NU0 / GAMMA_H
    dt = 1.0 / (500 * NU0)
    return (0.0, 0.0, 1.0, GAMMA_H, b0, 1e-11, 2 * math.pi * NU0, 0.0,
            0.0, 1.0, 0.0, 1.25, 1.25, 0.0, 0.0, dt, nsteps)


def time_backend(fn, nsteps, repeat):
    args = problem(nsteps)
    best = math.inf
    out = np.empty((nsteps + 1, 3))
    for _ in range(repeat):
        start = time.perf_counter()
        fn(out, *args)
        best = min(best, time.perf_counter() - start)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200_000, help="RK4 steps per run")
    ap.add_argument("--repeat", type=int, default=3, help="runs per backend (best is reported)")
    args = ap.parse_args()

    t_py, out_py = time_backend(_bloch_py.rk4_bloch, args.steps, args.repeat)
    print(f"python  : {t_py:8.3f} s  {args.steps / t_py:12.3e} steps/s")
    if _compiled is None:
        print("cython  : not built (run `pip install --no-build-isolation -e .`)")
        return
    t_c, out_c = time_backend(_compiled.rk4_bloch, args.steps, args.repeat)
    print(f"cython  : {t_c:8.3f} s  {args.steps / t_c:12.3e} steps/s")
    print(f"speedup : {t_py / t_c:8.1f}x")
    print(f"identical trajectories: {np.array_equal(out_py, out_c)}")


if __name__ == "__main__":
    main()
