"""Time the numba and pure-numpy paths of every hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel is run once untimed (numba compiles on first call) and then
``--repeat`` times; the best wall time is reported.
"""
import argparse
import timeit

import numpy as np

from sdr import _kernels


def cases(rng):
    sim = rng.standard_normal((800, 400))
    labels = rng.integers(0, 4, 400)
    yield "knn_vote 800x400 k=200", (
        lambda: _kernels.knn_vote_numpy(sim, labels, 200, 4),
        lambda: _kernels.knn_vote_numba(sim, labels, 200, 4))

    lk = rng.uniform(-20, 0, (2000, 4))
    lr = np.full(2000, -np.log(2000))
    lc = np.full(4, -np.log(4))
    yield "sinkhorn 2000x4", (
        lambda: _kernels.sinkhorn_log_numpy(lk, lr, lc, 200, 1e-6),
        lambda: _kernels.sinkhorn_log_numba(lk, lr, lc, 200, 1e-6))

    buf = rng.integers(0, 256, 1 << 20).astype(np.uint8)
    raw = buf.tobytes()
    yield "fnv1a64 1 MiB", (
        lambda: _kernels.fnv1a64_numpy(raw),
        lambda: _kernels.fnv1a64_numba(buf))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26}{'numpy s':>10}{'numba s':>10}{'speedup':>9}")
    for name, (np_fn, nb_fn) in cases(rng):
        np_fn()
        nb_fn()
        t_np = min(timeit.repeat(np_fn, number=1, repeat=args.repeat))
        t_nb = min(timeit.repeat(nb_fn, number=1, repeat=args.repeat))
        print(f"{name:<26}{t_np:>10.4f}{t_nb:>10.4f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
