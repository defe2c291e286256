# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the 3-D convolution and pooling kernels.

Every function here has a pure-numpy twin in ``_pykernels`` with the same
signature and output contract; ``kernels`` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memcpy

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3(real[:, :, :, :, ::1] xp, real[:, ::1] cols):
    """Unfold a zero-padded channels-last volume into 3x3x3 patch rows.

    ``xp`` is (N, H+2, W+2, D+2, C); ``cols`` is (N*H*W*D, 27*C) with
    column order (kh, kw, kd, c).
    """
    cdef Py_ssize_t N = xp.shape[0]
    cdef Py_ssize_t H = xp.shape[1] - 2
    cdef Py_ssize_t W = xp.shape[2] - 2
    cdef Py_ssize_t D = xp.shape[3] - 2
    cdef Py_ssize_t C = xp.shape[4]
    cdef Py_ssize_t n, h, w, d, i, j, row
    cdef size_t chunk = 3 * C * sizeof(real)
    if cols.shape[0] != N * H * W * D or cols.shape[1] != 27 * C:
        raise ValueError("cols buffer has the wrong shape")
    with nogil:
        row = 0
        for n in range(N):
            for h in range(H):
                for w in range(W):
                    for d in range(D):
                        for i in range(3):
                            for j in range(3):
                                # the three kd taps are adjacent in memory
                                memcpy(&cols[row, (i * 3 + j) * 3 * C],
                                       &xp[n, h + i, w + j, d, 0], chunk)
                        row += 1


def maxpool3d(real[:, :, :, :, ::1] x, real[:, :, :, :, ::1] out,
              cnp.int64_t[:, :, :, :, ::1] idx):
    """2x2x2 / stride 2 max pooling; ties keep the lowest flat offset."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t H = x.shape[2], W = x.shape[3], D = x.shape[4]
    cdef Py_ssize_t n, c, a, b, e, i, j, k, h, w, d, best_off
    cdef real best, v
    with nogil:
        for n in range(N):
            for c in range(C):
                for a in range(H // 2):
                    for b in range(W // 2):
                        for e in range(D // 2):
                            h = 2 * a
                            w = 2 * b
                            d = 2 * e
                            best = x[n, c, h, w, d]
                            best_off = (h * W + w) * D + d
                            for i in range(2):
                                for j in range(2):
                                    for k in range(2):
                                        v = x[n, c, h + i, w + j, d + k]
                                        # strict > keeps the first (lowest-offset) max
                                        if v > best:
                                            best = v
                                            best_off = ((h + i) * W + w + j) * D + d + k
                            out[n, c, a, b, e] = best
                            idx[n, c, a, b, e] = best_off


def scatter_unpool(real[:, ::1] x, cnp.int64_t[:, ::1] idx, real[:, ::1] out):
    """Place ``x[p, q]`` at ``out[p, idx[p, q]]``; ``out`` must be zeroed."""
    cdef Py_ssize_t P = x.shape[0], Q = x.shape[1], S = out.shape[1]
    cdef Py_ssize_t p, q, t
    for p in range(P):
        for q in range(Q):
            t = idx[p, q]
            if t < 0 or t >= S:
                raise IndexError("pool index out of range")
    with nogil:
        for p in range(P):
            for q in range(Q):
                out[p, idx[p, q]] = x[p, q]


def gather_unpool(real[:, ::1] g, cnp.int64_t[:, ::1] idx, real[:, ::1] out):
    """Inverse of ``scatter_unpool``: ``out[p, q] = g[p, idx[p, q]]``."""
    cdef Py_ssize_t P = out.shape[0], Q = out.shape[1]
    cdef Py_ssize_t p, q
    with nogil:
        for p in range(P):
            for q in range(Q):
                out[p, q] = g[p, idx[p, q]]
