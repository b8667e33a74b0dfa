"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``SDR_NUMBA`` is not set to
``0``.  Both paths are importable directly (``*_numpy`` / ``*_numba``) so
tests and ``benchmarks/bench_kernels.py`` can compare them.
"""
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is optional
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SDR_NUMBA", "1") != "0"

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


# ---------------------------------------------------------------- numpy ----

def knn_vote_numpy(sim, labels, k, n_classes):
    """Majority vote over the ``k`` most similar training rows.

    Neighbours are ranked by similarity, ties by lower training index.
    Vote ties go to the class with the larger summed similarity, then to
    the lower class id.
    """
    q = sim.shape[0]
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    top_sim = np.take_along_axis(sim, order, axis=1)
    top_lab = labels[order]
    counts = np.zeros((q, n_classes), dtype=np.int64)
    sums = np.zeros((q, n_classes))
    rows = np.arange(q)
    for j in range(k):
        counts[rows, top_lab[:, j]] += 1
        sums[rows, top_lab[:, j]] += top_sim[:, j]
    best = counts == counts.max(axis=1, keepdims=True)
    masked = np.where(best, sums, -np.inf)
    best &= masked == masked.max(axis=1, keepdims=True)
    return np.argmax(best, axis=1).astype(np.int64)


def _logsumexp_rows(a):
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def sinkhorn_log_numpy(log_kernel, log_r, log_c, max_iters, tol):
    """Log-domain Sinkhorn scaling.

    Returns ``(log_u, log_v, err, iters)`` with
    ``U = exp(log_u[:, None] + log_kernel + log_v[None, :])``.  ``err`` is the
    larger of the row and column l1 marginal errors after the last sweep.
    """
    n, k = log_kernel.shape
    log_u = np.zeros(n)
    log_v = np.zeros(k)
    r = np.exp(log_r)
    c = np.exp(log_c)
    err = np.inf
    it = 0
    while it < max_iters:
        it += 1
        log_u = log_r - _logsumexp_rows(log_kernel + log_v[None, :])
        log_v = log_c - _logsumexp_rows((log_kernel + log_u[:, None]).T)
        plan = np.exp(log_u[:, None] + log_kernel + log_v[None, :])
        err = max(np.abs(plan.sum(axis=1) - r).sum(), np.abs(plan.sum(axis=0) - c).sum())
        if err <= tol:
            break
    return log_u, log_v, err, it


def fnv1a64_numpy(buf):
    h = int(FNV_OFFSET)
    prime = int(FNV_PRIME)
    mask = 0xFFFFFFFFFFFFFFFF
    for byte in bytes(buf):
        h = ((h ^ byte) * prime) & mask
    return h


# ---------------------------------------------------------------- numba ----

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def knn_vote_numba(sim, labels, k, n_classes):
        q = sim.shape[0]
        out = np.empty(q, dtype=np.int64)
        counts = np.zeros(n_classes, dtype=np.int64)
        sums = np.zeros(n_classes)
        for i in range(q):
            order = np.argsort(-sim[i], kind="mergesort")
            counts[:] = 0
            sums[:] = 0.0
            for j in range(k):
                t = order[j]
                counts[labels[t]] += 1
                sums[labels[t]] += sim[i, t]
            best = 0
            for c in range(1, n_classes):
                if counts[c] > counts[best] or (
                    counts[c] == counts[best] and sums[c] > sums[best]
                ):
                    best = c
            out[i] = best
        return out

    @numba.njit(cache=True)
    def sinkhorn_log_numba(log_kernel, log_r, log_c, max_iters, tol):
        n, k = log_kernel.shape
        log_u = np.zeros(n)
        log_v = np.zeros(k)
        buf = np.empty(max(n, k))
        err = np.inf
        it = 0
        while it < max_iters:
            it += 1
            for i in range(n):
                m = -np.inf
                for j in range(k):
                    buf[j] = log_kernel[i, j] + log_v[j]
                    if buf[j] > m:
                        m = buf[j]
                s = 0.0
                for j in range(k):
                    s += np.exp(buf[j] - m)
                log_u[i] = log_r[i] - (m + np.log(s))
            for j in range(k):
                m = -np.inf
                for i in range(n):
                    buf[i] = log_kernel[i, j] + log_u[i]
                    if buf[i] > m:
                        m = buf[i]
                s = 0.0
                for i in range(n):
                    s += np.exp(buf[i] - m)
                log_v[j] = log_c[j] - (m + np.log(s))
            row_err = 0.0
            col = np.zeros(k)
            for i in range(n):
                rs = 0.0
                for j in range(k):
                    p = np.exp(log_u[i] + log_kernel[i, j] + log_v[j])
                    rs += p
                    col[j] += p
                row_err += abs(rs - np.exp(log_r[i]))
            col_err = 0.0
            for j in range(k):
                col_err += abs(col[j] - np.exp(log_c[j]))
            err = max(row_err, col_err)
            if err <= tol:
                break
        return log_u, log_v, err, it

    @numba.njit(cache=True)
    def fnv1a64_numba(buf):
        h = np.uint64(0xCBF29CE484222325)
        prime = np.uint64(0x100000001B3)
        for i in range(buf.shape[0]):
            h = (h ^ np.uint64(buf[i])) * prime
        return h


def knn_vote(sim, labels, k, n_classes):
    sim = np.ascontiguousarray(sim, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if USE_NUMBA:
        return knn_vote_numba(sim, labels, int(k), int(n_classes))
    return knn_vote_numpy(sim, labels, int(k), int(n_classes))


def sinkhorn_log(log_kernel, log_r, log_c, max_iters, tol):
    log_kernel = np.ascontiguousarray(log_kernel, dtype=np.float64)
    if USE_NUMBA:
        return sinkhorn_log_numba(log_kernel, log_r, log_c, int(max_iters), float(tol))
    return sinkhorn_log_numpy(log_kernel, log_r, log_c, int(max_iters), float(tol))


def fnv1a64(data: bytes) -> int:
    if USE_NUMBA:
        return int(fnv1a64_numba(np.frombuffer(data, dtype=np.uint8)))
    return fnv1a64_numpy(data)
