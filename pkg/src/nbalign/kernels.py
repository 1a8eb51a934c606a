"""In-place float32 softmax kernels (numba).

Attention over dimension-tokens makes the probability matrices (d, d) per
rowhead, so softmax touches by far the most data in a training step. The
score and probability gemms run in BLAS on cache-sized tiles; these two
kernels handle just the softmax forward and its VJP, in place on the tile
the gemm produced, one row at a time while the row is cache-hot.

exp is evaluated inline with the classic Cephes expf recipe: split
``z = n*ln2 + r``, evaluate a minimax polynomial on ``r`` (Estrin form, so
the FMA chain stays short), and apply the 2**n factor by integer bit
assembly ``(n + 127) << 23``. Absolute error on probabilities is below
5e-7, which every consumer tolerance absorbs; the float64 reference path
in :mod:`nbalign.model` never calls these kernels.

Everything here assumes C-contiguous float32 arrays; callers arrange that.
"""

from __future__ import annotations

import numpy as np
from numba import njit

LOG2E = np.float32(1.4426950408889634)
LN2_HI = np.float32(0.693359375)
LN2_LO = np.float32(-2.12194440e-4)
EXP_C0 = np.float32(1.9875691500e-4)
EXP_C1 = np.float32(1.3981999507e-3)
EXP_C2 = np.float32(8.3334519073e-3)
EXP_C3 = np.float32(4.1665795894e-2)
EXP_C4 = np.float32(1.6666665459e-1)
EXP_C5 = np.float32(5.0000001201e-1)


@njit(fastmath=True, cache=True)
def softmax_inplace(p: np.ndarray) -> None:
    """Row softmax of a (B, n, m) score stack, overwriting it."""
    B, n, m = p.shape
    ibits = np.empty(m, dtype=np.int32)
    scale = ibits.view(np.float32)
    one = np.float32(1.0)
    half = np.float32(0.5)
    lo = np.float32(-127.0)
    for b in range(B):
        for i in range(n):
            row = p[b, i]
            mx = row[0]
            for j in range(1, m):
                if row[j] > mx:
                    mx = row[j]
            for j in range(m):
                z = row[j] - mx
                fn = np.float32(np.floor(z * LOG2E + half))
                if fn < lo:
                    fn = lo
                r = z - fn * LN2_HI
                r = r - fn * LN2_LO
                r2 = r * r
                pa = EXP_C0 * r + EXP_C1
                pb = EXP_C2 * r + EXP_C3
                pc = EXP_C4 * r + EXP_C5
                poly = pa * (r2 * r2) + (pb * r2 + pc)
                row[j] = poly * r2 + (r + one)
                ibits[j] = (np.int32(fn) + np.int32(127)) << np.int32(23)
            s = np.float32(0.0)
            for j in range(m):
                e = row[j] * scale[j]
                row[j] = e
                s += e
            inv = one / s
            for j in range(m):
                row[j] *= inv


@njit(fastmath=True, cache=True)
def softmax_vjp_inplace(p: np.ndarray, idx: np.ndarray, dp: np.ndarray) -> None:
    """Turn dp (gradient w.r.t. probabilities) into the score gradient.

    dp is a (B, n, m) tile rewritten in place to p * (dp - sum(dp * p));
    p is the full (B_all, n, m) probability store and idx maps tile slab b
    to its store slab, so callers can process any subset of slabs without
    gathering p.
    """
    B, n, m = dp.shape
    for b in range(B):
        pb = p[idx[b]]
        for i in range(n):
            prow = pb[i]
            drow = dp[b, i]
            acc = np.float32(0.0)
            for j in range(m):
                acc += drow[j] * prow[j]
            for j in range(m):
                drow[j] = prow[j] * (drow[j] - acc)


def warmup() -> None:
    """Force jit compilation on tiny inputs so timed runs see steady state."""
    b, n = 2, 4
    p = np.zeros((b, n, n), dtype=np.float32)
    softmax_inplace(p)
    idx = np.arange(b, dtype=np.int64)
    softmax_vjp_inplace(p, idx, p.copy())
