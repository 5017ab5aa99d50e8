"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both modules are imported directly, so the run does not depend on the
ECL_PURE_PYTHON switch.
"""
import argparse
import json
import timeit

import numpy as np

from ecl import _pykernels
from ecl.losses import simplex_lattice

try:
    from ecl import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    x = rng.random(1_000_000)
    anchors = simplex_lattice(3, 14)
    pts = rng.dirichlet(np.ones(3), 100_000)
    idx = rng.integers(0, 120, 1_000_000).astype(np.intp)
    vals = rng.random((1_000_000, 3))
    B, D = 120, 3
    prox = [rng.random((B, D)), rng.random((B, D)), rng.random((B, D)), rng.random(B) * 5 + 0.1,
            rng.random((B, D)), rng.random(B) * 5 + 0.1, rng.random(B)]

    def run_prox(mod):
        u_s, u_t = prox[0].copy(), prox[1].copy()
        mod.prox_updates(u_s, u_t, *prox[2:], 50)

    return {
        "uniform_bin_index (1e6 scores, 15 bins)": lambda m: m.uniform_bin_index(x, 15),
        "nearest_anchor (1e5 points, 120 anchors)": lambda m: m.nearest_anchor(pts, anchors),
        "binned_sums (1e6 rows, 3 columns)": lambda m: m.binned_sums(idx, vals, 120),
        "prox_updates (120 bins, 50 iterations)": run_prox,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':44s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        if _ckernels is None:
            t_c = float("nan")
        else:
            t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        rows.append({"kernel": name, "numpy_ms": t_py, "cython_ms": t_c, "speedup": t_py / t_c})
        print(f"{name:44s} {t_py:10.2f} {t_c:10.2f} {t_py / t_c:7.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
