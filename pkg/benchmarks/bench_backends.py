"""Compare the numba and pure-numpy sparse attention kernels.

Usage::

    python benchmarks/bench_backends.py [--reps 5] [--threads N] [--precision single]

Each case checks both kernels against each other before timing them.
"""
import argparse
import time

import numpy as np

from tsta import AttentionInputs, GridSpec, sparse_tile_attention
from tsta._backend import HAS_NUMBA, set_threads
from tsta.mask import composite_mask

CASES = [
    (GridSpec(8, 16, 16, 2, 4, 4), (3, 3, 3)),
    (GridSpec(16, 16, 16, 4, 4, 4), (3, 3, 3)),
    (GridSpec(16, 16, 16, 2, 4, 4), (3, 3, 3)),
    (GridSpec(16, 16, 16, 2, 4, 4), (9, 9, 9)),
]


def timed(fn, reps):
    fn()
    out = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        out.append((time.perf_counter_ns() - t0) / 1e6)
    return np.mean(out), np.std(out, ddof=1)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--threads", type=int, default=None)
    ap.add_argument("--precision", choices=["single", "double"], default="single")
    ap.add_argument("--heads", type=int, default=2)
    ap.add_argument("--head-dim", type=int, default=64)
    args = ap.parse_args(argv)
    if not HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    set_threads(args.threads)
    dtype = np.float32 if args.precision == "single" else np.float64
    rng = np.random.default_rng(0)
    print(f"{'grid':>22} {'window':>10} {'seq':>6} {'density':>8} {'numpy ms':>12} {'numba ms':>12} {'ratio':>6}")
    for grid, window in CASES:
        shape = (1, args.heads, grid.seq_len, args.head_dim)
        inp = AttentionInputs(*(rng.standard_normal(shape).astype(dtype) for _ in range(3)))
        mask = composite_mask(grid, window)
        run = {b: (lambda b=b: sparse_tile_attention(inp, mask, grid, backend=b)) for b in ("numpy", "numba")}
        diff = np.max(np.abs(run["numpy"]().out.astype(np.float64) - run["numba"]().out))
        tol = 1e-3 if dtype == np.float32 else 1e-9
        if diff > tol:
            raise SystemExit(f"backends disagree by {diff:.3e} on {grid.shape} / {window}")
        np_ms, np_sd = timed(run["numpy"], args.reps)
        nb_ms, nb_sd = timed(run["numba"], args.reps)
        tag = "x".join(map(str, grid.shape)) + "/" + "x".join(map(str, grid.tile_shape))
        print(
            f"{tag:>22} {str(window):>10} {grid.seq_len:>6} {mask.density:>8.4f} "
            f"{np_ms:>7.1f}±{np_sd:<4.1f} {nb_ms:>7.1f}±{nb_sd:<4.1f} {np_ms / nb_ms:>6.2f}"
        )


if __name__ == "__main__":
    main()
