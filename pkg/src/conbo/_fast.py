"""Compiled loops for the factorized Matern-5/2 kernel.

These avoid the (m, n, d) temporaries of the vectorized numpy forms, which
dominate the cost of the inner ascent.
"""

import math

import numba
import numpy as np

_S5 = math.sqrt(5.0)


@numba.njit(cache=True, fastmath=False)
def matern_cross(A, B, inv_ls, ds, amp):
    m, d = A.shape
    n = B.shape[0]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            ss = 0.0
            for k in range(ds):
                t = (A[i, k] - B[j, k]) * inv_ls[k]
                ss += t * t
            sx = 0.0
            for k in range(ds, d):
                t = (A[i, k] - B[j, k]) * inv_ls[k]
                sx += t * t
            rs = _S5 * math.sqrt(ss)
            rx = _S5 * math.sqrt(sx)
            out[i, j] = amp * (1.0 + rs + rs * rs / 3.0) * (1.0 + rx + rx * rx / 3.0) * math.exp(-rs - rx)
    return out


@numba.njit(cache=True, fastmath=False)
def matern_weighted(Q, X, W, inv_ls, ds, amp, want_grad):
    """Row-wise ``sum_j k(q_b, x_j) W[b, j]`` and its gradient in ``q_b``."""
    m, d = Q.shape
    n = X.shape[0]
    val = np.zeros(m)
    grad = np.zeros((m, d))
    diff = np.empty(d)
    for b in range(m):
        for j in range(n):
            w = W[b, j]
            ss = 0.0
            for k in range(ds):
                t = (Q[b, k] - X[j, k]) * inv_ls[k]
                diff[k] = t
                ss += t * t
            sx = 0.0
            for k in range(ds, d):
                t = (Q[b, k] - X[j, k]) * inv_ls[k]
                diff[k] = t
                sx += t * t
            rs = _S5 * math.sqrt(ss)
            rx = _S5 * math.sqrt(sx)
            e = math.exp(-rs - rx)
            ps = 1.0 + rs + rs * rs / 3.0
            px = 1.0 + rx + rx * rx / 3.0
            aw = amp * w * e
            val[b] += aw * ps * px
            if want_grad:
                # (dM/dr) / r = -(5/3)(1 + sqrt5 r) exp(-sqrt5 r)
                cs = -(5.0 / 3.0) * (1.0 + rs) * px * aw
                cx = -(5.0 / 3.0) * (1.0 + rx) * ps * aw
                for k in range(ds):
                    grad[b, k] += cs * diff[k] * inv_ls[k]
                for k in range(ds, d):
                    grad[b, k] += cx * diff[k] * inv_ls[k]
    return val, grad
