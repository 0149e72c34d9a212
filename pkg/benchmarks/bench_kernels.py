"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel: best wall time of each path, the speedup, and the
max abs difference between the two outputs. The first numba call (compile or
cache load) is excluded.
"""
import argparse
import time

import numpy as np

from poisonlab import _kernels
from poisonlab.envlab import MdpSpec, build_env


def _cases(rng):
    n, n_s = 20_000, 25
    tab = (rng.integers(0, n_s, n), rng.integers(0, 4, n), rng.normal(size=n), rng.integers(0, n_s, n),
           rng.random(n) < 0.05)
    _, r_exp, cont = build_env(MdpSpec.lineworld()).model(201)
    x = rng.random((20_000, 1))
    centers = np.linspace(0, 1, 25).reshape(-1, 1)
    w = rng.lognormal(size=20_000)
    w /= w.max()
    return {
        "tabq_sweeps": lambda f: f(*tab, np.zeros((n_s, 4)), 0.01, 0.9, 50, 0.0)[0],
        "value_iteration": lambda f: f(r_exp, cont, 0.95, 1e-8, 100_000)[0],
        "rbf": lambda f: f(x, centers, 0.08),
        "rbf_jacobian": lambda f: f(x, centers, 0.08),
        "project_ascent": lambda f: f(w, 1.0, 1.0 / np.linalg.norm(w), 1e-13, 100_000)[0],
    }


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _kernels.USE_NUMBA:
        print("numba path disabled (POISONLAB_DISABLE_NUMBA set or numba missing); timing numpy only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<16} {'numpy [ms]':>11} {'numba [ms]':>11} {'speedup':>8} {'max|diff|':>10}")
    for name, call in _cases(rng).items():
        t_np, out_np = _best(lambda: call(_kernels.NUMPY_KERNELS[name]), args.repeat)
        if _kernels.USE_NUMBA:
            call(_kernels.ACTIVE_KERNELS[name])  # warm-up: compile or load from cache
            t_nb, out_nb = _best(lambda: call(_kernels.ACTIVE_KERNELS[name]), args.repeat)
            diff = float(np.max(np.abs(np.asarray(out_nb) - np.asarray(out_np))))
            print(f"{name:<16} {1e3 * t_np:>11.2f} {1e3 * t_nb:>11.2f} {t_np / t_nb:>7.1f}x {diff:>10.1e}")
        else:
            print(f"{name:<16} {1e3 * t_np:>11.2f} {'-':>11} {'-':>8} {'-':>10}")


if __name__ == "__main__":
    main()
