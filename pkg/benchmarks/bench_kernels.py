"""Time the numba and numpy paths of the proposal kernels side by side.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--scale 1]

Both paths are always importable from ``forgeryloc._kernels``; the
FORGERYLOC_NO_NUMBA flag only changes which one the public wrappers pick.
"""
import argparse
import time

import numpy as np

from forgeryloc import _kernels as K


def _intervals(rng, n, span=60.0):
    s = rng.uniform(0, span, n)
    return s, s + rng.uniform(0.06, 2.0, n)


def cases(scale, rng):
    x = rng.random(20000 * scale)
    a0, a1 = _intervals(rng, 300 * scale)
    b0, b1 = _intervals(rng, 300 * scale)
    n0, n1 = _intervals(rng, 400 * scale, span=8.0)
    sc = rng.random(n0.size)
    n_clips = 50 * scale
    pc = rng.integers(0, n_clips, 1000 * scale)
    p0, p1 = _intervals(rng, pc.size, span=4.0)
    gc = rng.integers(0, n_clips, 150 * scale)
    g0, g1 = _intervals(rng, gc.size, span=4.0)
    thr = np.arange(0.5, 1.0, 0.05)
    return {
        "runs_above": (x, 0.5),
        "tiou_matrix": (a0, a1, b0, b1),
        "soft_nms": (n0, n1, sc, 0.5, 1e-3),
        "greedy_match": (pc, p0, p1, gc, g0, g1, thr),
    }


def _contiguous(v):
    # the numba kernels are typed; the public wrappers normally do this cast
    if isinstance(v, np.ndarray):
        return K._i64(v) if v.dtype.kind in "iu" else K._f64(v)
    return float(v)


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--scale", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if K.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<14}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, a in cases(args.scale, rng).items():
        f_np = getattr(K, name + "_np")
        f_nb = getattr(K, name + "_nb")
        a_nb = tuple(_contiguous(v) for v in a)
        f_nb(*a_nb)  # compile outside the timing loop
        t_np = best_of(f_np, a, args.repeat)
        t_nb = best_of(f_nb, a_nb, args.repeat)
        print(f"{name:<14}{t_np * 1e3:>12.3f}{t_nb * 1e3:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
