"""Block-sparse attention forward kernels.

Both backends walk, for every query block, the contiguous runs of admitted key
blocks in ascending order and keep a running row max and normalizer (streaming
softmax), so skipped blocks cost nothing and the result does not depend on how
jobs are scheduled across threads.
"""
import numpy as np

from ._backend import HAS_NUMBA, resolve_backend


def sparse_forward_numpy(q, k, v, starts, row_ptr, run_lo, run_hi, scale):
    """Reference streaming kernel, vectorised over the flattened batch*head axis."""
    bh, s, d = q.shape
    out = np.empty_like(q)
    lse = np.empty((bh, s), dtype=np.float64)
    for i in range(starts.size - 1):
        r0, r1 = starts[i], starts[i + 1]
        qb = q[:, r0:r1] * scale
        m = l = acc = None
        for ptr in range(row_ptr[i], row_ptr[i + 1]):
            c0, c1 = starts[run_lo[ptr]], starts[run_hi[ptr]]
            sc = qb @ k[:, c0:c1].transpose(0, 2, 1)
            block_max = sc.max(axis=-1, keepdims=True)
            if m is None:
                m = block_max
                np.exp(sc - m, out=sc)
                l = sc.sum(axis=-1, keepdims=True, dtype=np.float64)
                acc = sc @ v[:, c0:c1]
            else:
                m_new = np.maximum(m, block_max)
                alpha = np.exp(m - m_new)
                np.exp(sc - m_new, out=sc)
                l = l * alpha + sc.sum(axis=-1, keepdims=True, dtype=np.float64)
                acc = acc * alpha + sc @ v[:, c0:c1]
                m = m_new
        out[:, r0:r1] = acc / l
        lse[:, r0:r1] = (m + np.log(l))[..., 0]
    return out, lse


if HAS_NUMBA:
    import numba

    # Reassociation lets the row reductions vectorise. No nnan/ninf: the
    # running max starts at -inf.
    _FASTMATH = {"reassoc", "contract", "arcp", "nsz"}

    @numba.njit(fastmath=_FASTMATH, inline="always", cache=True)
    def _exp_nonpos(x):
        # exp(x) for x <= 0 as (Taylor_8(x / 1024)) ** 1024; branch-free so it
        # vectorises. Relative error ~1e-13 in double on [-700, 0].
        y = max(x, -700.0) * (1.0 / 1024.0)
        p = 1.0 + y * (1.0 + y * (1.0 / 2 + y * (1.0 / 6 + y * (1.0 / 24 + y * (
            1.0 / 120 + y * (1.0 / 720 + y * (1.0 / 5040 + y * (1.0 / 40320))))))))
        for _ in range(10):
            p = p * p
        return p

    @numba.njit(parallel=True, fastmath=_FASTMATH, cache=True)
    def _sparse_forward_nb(q, k, v, starts, row_ptr, run_lo, run_hi, scale, out, lse):
        bh_total, _, d = q.shape
        nb = starts.size - 1
        for job in numba.prange(bh_total * nb):
            bh = job // nb
            i = job % nb
            r0 = starts[i]
            r1 = starts[i + 1]
            rows = r1 - r0
            qb = q[bh, r0:r1] * scale
            m = np.full(rows, -np.inf)
            l = np.zeros(rows)
            acc = np.zeros((rows, d), dtype=q.dtype)
            for ptr in range(row_ptr[i], row_ptr[i + 1]):
                c0 = starts[run_lo[ptr]]
                c1 = starts[run_hi[ptr]]
                sc = np.dot(qb, k[bh, c0:c1].T)
                for a in range(rows):
                    m_new = m[a]
                    for b in range(c1 - c0):
                        if sc[a, b] > m_new:
                            m_new = sc[a, b]
                    alpha = _exp_nonpos(m[a] - m_new)
                    total = 0.0
                    for b in range(c1 - c0):
                        e = _exp_nonpos(sc[a, b] - m_new)
                        sc[a, b] = e
                        total += e
                    l[a] = l[a] * alpha + total
                    for c in range(d):
                        acc[a, c] *= alpha
                    m[a] = m_new
                acc += np.dot(sc, v[bh, c0:c1])
            for a in range(rows):
                inv = 1.0 / l[a]
                for c in range(d):
                    out[bh, r0 + a, c] = acc[a, c] * inv
                lse[bh, r0 + a] = m[a] + np.log(l[a])

    def sparse_forward_numba(q, k, v, starts, row_ptr, run_lo, run_hi, scale):
        out = np.empty_like(q)
        lse = np.empty(q.shape[:2], dtype=np.float64)
        _sparse_forward_nb(
            q, k, v, starts, row_ptr, run_lo, run_hi, q.dtype.type(scale), out, lse
        )
        return out, lse


def sparse_forward(q, k, v, starts, row_ptr, run_lo, run_hi, scale, backend=None):
    """Dispatch on ``backend`` (``None`` follows ``TSTA_DISABLE_NUMBA``).

    Arrays are ``(batch*heads, seq, dim)``; see :attr:`BlockMask.runs` for the
    run encoding.
    """
    backend = resolve_backend(backend)
    args = [np.ascontiguousarray(x) for x in (q, k, v)]
    idx = [np.ascontiguousarray(x, dtype=np.int64) for x in (starts, row_ptr, run_lo, run_hi)]
    if backend == "numba":
        return sparse_forward_numba(*args, *idx, scale)
    return sparse_forward_numpy(*args, *idx, scale)
