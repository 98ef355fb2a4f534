"""Time the particle stepping kernel on the numba and numpy backends.

    python benchmarks/bench_kernels.py [--steps 200] [--sizes 1000 10000 100000]

Both backends consume the same counter-based noise, so the final states are
compared as well; the max abs difference should be at rounding level.
"""

import argparse
import time

import numpy as np

from mvlab import _accel
from mvlab.model import cross_coupled_2d, double_well, multi_well
from mvlab.particle import ParticleEnsemble

MODELS = {
    "double_well": lambda: double_well(3.0, 0.3),
    "multi_well": lambda: multi_well(24.0, 1.0),
    "cross_2d": lambda: cross_coupled_2d(14.0, 0.3873, 0.3873),
}


def run(model, n, steps, dt, repeat):
    rng = np.random.default_rng(1)
    x0 = rng.normal(0.0, 0.5, size=(n, model.dimension))
    best = np.inf
    out = None
    for _ in range(repeat):
        ens = ParticleEnsemble(x0, 7)
        t = time.perf_counter()
        ens.advance(model, steps, dt)
        best = min(best, time.perf_counter() - t)
        out = ens.states
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 10000, 100000])
    ap.add_argument("--models", nargs="+", default=list(MODELS), choices=list(MODELS))
    ap.add_argument("--dt", type=float, default=1e-3)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    prev = _accel.backend()
    # compile outside the timed region
    _accel.set_backend("numba")
    for name in args.models:
        run(MODELS[name](), 16, 2, args.dt, 1)

    print(f"{'model':<12} {'N':>8} {'numba ms/step':>14} {'numpy ms/step':>14} {'speedup':>8} {'max|diff|':>10}")
    try:
        for name in args.models:
            model = MODELS[name]()
            for n in args.sizes:
                _accel.set_backend("numba")
                tn, xn = run(model, n, args.steps, args.dt, args.repeat)
                _accel.set_backend("numpy")
                tp, xp = run(model, n, args.steps, args.dt, args.repeat)
                diff = float(np.max(np.abs(xn - xp)))
                print(
                    f"{name:<12} {n:>8} {1e3 * tn / args.steps:>14.4f} {1e3 * tp / args.steps:>14.4f}"
                    f" {tp / tn:>8.2f} {diff:>10.2e}"
                )
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
