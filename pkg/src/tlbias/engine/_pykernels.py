"""Pure-numpy implementations of the hot kernels.

Signatures mirror the compiled ``_ckernels`` module: outputs are written into
caller-provided buffers.
"""

import numpy as np


def im2col3(xp, cols):
    N, Hp, Wp, Dp, C = xp.shape
    H, W, D = Hp - 2, Wp - 2, Dp - 2
    if cols.shape != (N * H * W * D, 27 * C):
        raise ValueError("cols buffer has the wrong shape")
    view = cols.reshape(N, H, W, D, 27, C)
    tap = 0
    for i in range(3):
        for j in range(3):
            for k in range(3):
                view[:, :, :, :, tap, :] = xp[:, i:i + H, j:j + W, k:k + D, :]
                tap += 1


def maxpool3d(x, out, idx):
    N, C, H, W, D = x.shape
    h, w, d = H // 2, W // 2, D // 2
    win = (
        x.reshape(N, C, h, 2, w, 2, d, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(N, C, h, w, d, 8)
    )
    # argmax returns the first hit; window order (i, j, k) is increasing flat offset
    local = np.argmax(win, axis=-1)
    out[...] = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    i, j, k = local // 4, (local // 2) % 2, local % 2
    a = np.arange(h).reshape(h, 1, 1)
    b = np.arange(w).reshape(1, w, 1)
    e = np.arange(d).reshape(1, 1, d)
    idx[...] = ((2 * a + i) * W + 2 * b + j) * D + 2 * e + k


def scatter_unpool(x, idx, out):
    if idx.size and (idx.min() < 0 or idx.max() >= out.shape[1]):
        raise IndexError("pool index out of range")
    np.put_along_axis(out, idx, x, axis=1)


def gather_unpool(g, idx, out):
    out[...] = np.take_along_axis(g, idx, axis=1)
