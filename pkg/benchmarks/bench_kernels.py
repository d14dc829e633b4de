"""Compare the numba and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeats 20] [--csv out.csv]

Each kernel runs on identical inputs under both backends; the script checks
the outputs agree and prints the median time per call and the speedup.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from presto import _kernels
from presto.models.gmm import GmmOracle


def _median_time(fn, repeats, warmup=3):
    for _ in range(warmup):
        fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts))


def cases(rng):
    x = rng.standard_normal((512, 64))
    y_ln, rstd = _kernels.numpy_backend.layer_norm_fwd(x, 1e-6)
    g = rng.standard_normal(x.shape)
    a = rng.standard_normal((1024, 2))
    b = rng.standard_normal((1024, 2))
    orc = GmmOracle.isotropic(np.full(8, 1 / 8), rng.standard_normal((8, 2)), 0.1)
    pts = rng.standard_normal((4096, 2))
    sig = np.full(len(pts), 0.5)
    gmm_args = (pts, sig, np.log(orc.weights), orc.means, orc.evecs, orc.evals)
    return {
        "layer_norm_fwd": lambda k: k.layer_norm_fwd(x, 1e-6),
        "layer_norm_bwd": lambda k: k.layer_norm_bwd(g, y_ln, rstd),
        "pairwise_sqdist": lambda k: k.pairwise_sqdist(a, b),
        "rbf_sums": lambda k: k.rbf_sums(a, b, 0.5),
        "kth_neighbour_dist": lambda k: k.kth_neighbour_dist(a, 3),
        "gmm_posterior": lambda k: k.gmm_posterior(*gmm_args),
        "silu_fwd": lambda k: k.silu_fwd(x),
    }


def _flat(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.ravel(np.asarray(p, dtype=np.float64)) for p in parts])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--csv", help="also write results to this CSV file")
    args = ap.parse_args(argv)
    if _kernels.numba_backend is None:
        print("numba is not importable; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}{'max |diff|':>14}")
    for name, call in cases(np.random.default_rng(0)).items():
        ref = _flat(call(_kernels.numpy_backend))
        got = _flat(call(_kernels.numba_backend))
        diff = float(np.max(np.abs(ref - got)))
        t_np = _median_time(lambda: call(_kernels.numpy_backend), args.repeats)
        t_nb = _median_time(lambda: call(_kernels.numba_backend), args.repeats)
        rows.append({"kernel": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb, "max_abs_diff": diff})
        print(f"{name:<20}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>10.2f}{diff:>14.2e}")
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=["schema_version", *rows[0]])
            w.writeheader()
            for r in rows:
                w.writerow({"schema_version": "kernel-bench/1", **r})
    return 0


if __name__ == "__main__":
    sys.exit(main())
