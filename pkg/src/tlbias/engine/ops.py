"""Differentiable kernels used by the bias-correction network.

Activations use (N, C, H, W, D) layout. Convolutions are 3x3x3, stride 1,
zero padding 1: the volume is unfolded into patch rows (``im2col3``) and
contracted with the weight matrix through BLAS.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError, DomainError, StateError, UsageError
from . import kernels
from .tensor import Tensor, record

AXES = ("N", "C", "H", "W", "D")


def _check_5d(name: str, x: Tensor) -> None:
    if x.ndim != 5:
        raise DimensionError(f"{name}: expected a 5-D (N,C,H,W,D) tensor, got shape {x.shape}")


def _same_dtype(op: str, *ts: Tensor) -> None:
    dts = {t.dtype for t in ts}
    if len(dts) > 1:
        raise UsageError(f"{op}: mixed dtypes {sorted(str(d) for d in dts)}")


def _to_channels_last_padded(a: np.ndarray) -> np.ndarray:
    N, C, H, W, D = a.shape
    xp = np.zeros((N, H + 2, W + 2, D + 2, C), dtype=a.dtype)
    xp[:, 1:-1, 1:-1, 1:-1, :] = a.transpose(0, 2, 3, 4, 1)
    return xp


def im2col(a: np.ndarray) -> np.ndarray:
    """Patch matrix of shape (N*H*W*D, 27*C), column order (kh, kw, kd, c)."""
    N, C, H, W, D = a.shape
    xp = _to_channels_last_padded(a)
    cols = np.empty((N * H * W * D, 27 * C), dtype=a.dtype)
    kernels.active().im2col3(xp, cols)
    return cols


def _conv_forward(a: np.ndarray, wmat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    N, C, H, W, D = a.shape
    cols = im2col(a)
    y = cols @ wmat
    out = np.ascontiguousarray(y.reshape(N, H, W, D, -1).transpose(0, 4, 1, 2, 3))
    return out, cols


def conv3d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-size 3-D cross-correlation, kernel 3x3x3, stride 1, zero pad 1."""
    _check_5d("conv3d", x)
    if weight.ndim != 5 or weight.shape[2:] != (3, 3, 3):
        raise DimensionError(f"conv3d: weight must be (Cout,Cin,3,3,3), got {weight.shape}")
    cout, cin = weight.shape[:2]
    if x.shape[1] != cin:
        raise DimensionError(
            f"conv3d: axis C mismatch, input has {x.shape[1]} channels, weight expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv3d: bias must have shape ({cout},), got {bias.shape}")
    _same_dtype("conv3d", x, weight, bias)

    w = weight.data
    wmat = w.transpose(2, 3, 4, 1, 0).reshape(27 * cin, cout)
    out, cols = _conv_forward(x.data, wmat)
    out += bias.data.reshape(1, cout, 1, 1, 1)
    keep_cols = cols if weight.requires_grad else None
    del cols

    def grad_fn(g):
        N, _, H, W, D = g.shape
        gmat = g.transpose(0, 2, 3, 4, 1).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (keep_cols.T @ gmat).reshape(3, 3, 3, cin, cout).transpose(4, 3, 0, 1, 2)
        if bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            # input gradient is a correlation of g with the flipped, transposed kernel
            wflip = w[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 0, 1).reshape(27 * cout, cin)
            gx, _ = _conv_forward(g, wflip)
        return gx, gw, gb

    return record("conv3d", out, (x, weight, bias), grad_fn)


@dataclass(frozen=True)
class PoolIndices:
    """Argmax offsets of a 2x2x2 max-pool.

    ``offsets`` has the pooled output's shape; each entry is a flat offset
    ``(h*W + w)*D + d`` into the (H, W, D) plane of the unpooled map.
    """

    offsets: np.ndarray
    source_shape: tuple

    @property
    def shape(self) -> tuple:
        return self.offsets.shape


def maxpool3d(x: Tensor) -> tuple[Tensor, PoolIndices]:
    """2x2x2 stride-2 max pooling that records argmax offsets."""
    _check_5d("maxpool3d", x)
    N, C, H, W, D = x.shape
    for ax, n in zip(AXES[2:], (H, W, D)):
        if n % 2:
            raise DimensionError(f"maxpool3d: axis {ax} has odd extent {n}")
    out = np.empty((N, C, H // 2, W // 2, D // 2), dtype=x.dtype)
    offs = np.empty(out.shape, dtype=np.int64)
    kernels.active().maxpool3d(x.data, out, offs)
    idx = PoolIndices(offs, tuple(x.shape))

    def grad_fn(g):
        return (_scatter(g, offs, x.shape),)

    return record("maxpool3d", out, (x,), grad_fn, {"indices": idx}), idx


def _scatter(vals: np.ndarray, offs: np.ndarray, out_shape) -> np.ndarray:
    N, C = out_shape[:2]
    flat = np.zeros((N * C, int(np.prod(out_shape[2:]))), dtype=vals.dtype)
    kernels.active().scatter_unpool(
        np.ascontiguousarray(vals).reshape(N * C, -1), offs.reshape(N * C, -1), flat)
    return flat.reshape(out_shape)


def max_unpool3d(x: Tensor, idx: PoolIndices, out_shape) -> Tensor:
    """Place each value at its recorded argmax offset; zeros elsewhere."""
    _check_5d("max_unpool3d", x)
    out_shape = tuple(int(s) for s in out_shape)
    if len(out_shape) != 5:
        raise DimensionError(f"max_unpool3d: out_shape must be 5-D, got {out_shape}")
    if idx.offsets.shape != x.shape:
        raise DimensionError(
            f"max_unpool3d: indices shape {idx.offsets.shape} != input shape {x.shape}")
    for i, ax in enumerate(AXES):
        want = x.shape[i] * (2 if i >= 2 else 1)
        if out_shape[i] != want:
            raise DimensionError(
                f"max_unpool3d: axis {ax} of out_shape is {out_shape[i]}, expected {want}")
    if idx.source_shape != out_shape:
        raise DimensionError(
            f"max_unpool3d: indices came from shape {idx.source_shape}, not {out_shape}")
    offs = idx.offsets
    try:
        out = _scatter(x.data, offs, out_shape)
    except IndexError as e:
        raise DimensionError(f"max_unpool3d: {e}") from None
    N, C = x.shape[:2]

    def grad_fn(g):
        gx = np.empty(x.shape, dtype=g.dtype)
        kernels.active().gather_unpool(
            np.ascontiguousarray(g).reshape(N * C, -1), offs.reshape(N * C, -1),
            gx.reshape(N * C, -1))
        return (gx,)

    return record("max_unpool3d", out, (x,), grad_fn)


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = 0.1
    eps: float = 1e-5
    num_batches_tracked: int = field(default=0)

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              mode: str = "train") -> Tensor:
    """Per-channel batch normalization over (N, H, W, D).

    Train mode uses the biased batch variance and updates the running
    statistics in ``state``; eval mode normalizes with the running statistics.
    """
    _check_5d("batchnorm", x)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm: gamma/beta must have shape ({C},)")
    _same_dtype("batchnorm", x, gamma, beta)
    axes = (0, 2, 3, 4)
    shp = (1, C, 1, 1, 1)
    eps = state.eps
    a = x.data
    if mode == "train":
        m = a.size // C
        if m < 2:
            raise UsageError(f"batchnorm: train mode needs >= 2 values per channel, got {m}")
        mean = a.mean(axis=axes)
        xc = a - mean.reshape(shp)
        var = (xc * xc).mean(axis=axes)
        invstd = (1.0 / np.sqrt(var + eps)).astype(a.dtype)
        xhat = xc * invstd.reshape(shp)
        if state.running_mean is None:
            state.running_mean = np.zeros(C, dtype=a.dtype)
            state.running_var = np.ones(C, dtype=a.dtype)
        mom = state.momentum
        unbiased = var * (m / (m - 1))
        state.running_mean = ((1 - mom) * state.running_mean + mom * mean).astype(a.dtype)
        state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(a.dtype)
        state.num_batches_tracked += 1
        out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

        def grad_fn(g):
            gsum = g.sum(axis=axes)
            gxhat_sum = (g * xhat).sum(axis=axes)
            gx = None
            if x.requires_grad:
                k = (gamma.data * invstd / m).reshape(shp)
                gx = k * (m * g - gsum.reshape(shp) - xhat * gxhat_sum.reshape(shp))
            return gx, gxhat_sum, gsum

        return record("batchnorm", out, (x, gamma, beta), grad_fn)

    if mode != "eval":
        raise UsageError(f"batchnorm: mode must be 'train' or 'eval', got {mode!r}")
    if state.running_mean is None or state.running_var is None:
        raise StateError("batchnorm: eval mode with uninitialized running statistics")
    invstd = (1.0 / np.sqrt(state.running_var + eps)).astype(a.dtype)
    xhat = (a - state.running_mean.reshape(shp)) * invstd.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def grad_fn_eval(g):
        gx = g * (gamma.data * invstd).reshape(shp)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batchnorm", out, (x, gamma, beta), grad_fn_eval)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)
    return record("relu", out, (x,), lambda g: (g * pos,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim or a.ndim < 2:
        raise DimensionError(f"concat_channels: rank mismatch {a.shape} vs {b.shape}")
    for i in range(a.ndim):
        if i != 1 and a.shape[i] != b.shape[i]:
            ax = AXES[i] if a.ndim == 5 else str(i)
            raise DimensionError(
                f"concat_channels: axis {ax} differs ({a.shape[i]} vs {b.shape[i]})")
    _same_dtype("concat_channels", a, b)
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """Mean of squared differences over the True entries of ``mask``.

    Only masked elements are read, so values elsewhere never affect the result.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    m = np.asarray(mask)
    if m.dtype != np.bool_:
        raise UsageError("masked_mse: mask must be boolean")
    if pred.shape != t.shape or pred.shape != m.shape:
        raise DimensionError(
            f"masked_mse: shapes differ pred={pred.shape} target={t.shape} mask={m.shape}")
    count = int(np.count_nonzero(m))
    if count == 0:
        raise DomainError("masked_mse: mask selects no elements")
    diff = pred.data[m] - t[m].astype(pred.dtype, copy=False)
    out = np.asarray(np.sum(diff * diff) / count, dtype=pred.dtype)

    def grad_fn(g):
        gp = np.zeros(pred.shape, dtype=pred.dtype)
        gp[m] = (2.0 / count) * g * diff
        return (gp,)

    return record("masked_mse", out, (pred,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return record("sum", out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def inner(x: Tensor, weights) -> Tensor:
    """Scalar sum(x * weights) with constant ``weights``; a generic probe loss."""
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise DimensionError(f"inner: weights shape {w.shape} != {x.shape}")
    out = np.asarray(np.sum(x.data * w), dtype=x.dtype)
    return record("inner", out, (x,), lambda g: (g * w,))
