"""Compare the numba and numpy paths of the hot kernels.

Usage: python3 benchmarks/bench_kernels.py [--repeats 50] [--batch 96]
"""

import argparse
import timeit

import numpy as np

from mmicap import _kernels as K


def bench(fn, repeats):
    fn()  # warm-up (and JIT compile)
    return min(timeit.repeat(fn, number=1, repeat=repeats)) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=50)
    ap.add_argument("--batch", type=int, default=96)
    ap.add_argument("--cells", type=int, default=98)
    ap.add_argument("--att", type=int, default=64)
    ap.add_argument("--seq", type=int, default=20, help="LCS sequence length")
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    vp = rng.standard_normal((args.batch, args.cells, args.att))
    hp = rng.standard_normal((args.batch, args.att))
    u = rng.standard_normal(args.att)
    g = rng.standard_normal((args.batch, args.cells))
    _, t = K.attention_scores_numpy(vp, hp, u)
    a = rng.integers(0, 30, args.seq)
    b = rng.integers(0, 30, args.seq)

    cases = [
        ("attention forward", lambda: K.attention_scores_numpy(vp, hp, u),
         lambda: K.attention_scores_numba(vp, hp, u)),
        ("attention backward", lambda: K.attention_scores_backward_numpy(g, t, u),
         lambda: K.attention_scores_backward_numba(g, t, u)),
        ("lcs length", lambda: K.lcs_length_numpy(a, b), lambda: K.lcs_length_numba(a, b)),
    ]
    print(f"active backend: {K.backend()}")
    print(f"{'kernel':<20} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, f_np, f_nb in cases:
        t_np, t_nb = bench(f_np, args.repeats), bench(f_nb, args.repeats)
        print(f"{name:<20} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
