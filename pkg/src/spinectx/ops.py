"""Forward and adjoint kernels for the volumetric operators.

Every function here works on plain ``numpy`` arrays laid out as
``(n, c, d, h, w)`` and preserves the dtype it is given, so the same code
serves the float32 production path and the float64 verification path.
Forward functions that need state for the backward pass return a context
object alongside their output.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


def kernel_extent(kernel: int, dilation: int) -> int:
    """Number of voxels spanned by a dilated kernel along one axis."""
    return (kernel - 1) * dilation + 1


def same_padding(kernel: int, dilation: int) -> int:
    if kernel % 2 != 1:
        raise ValueError(f"'same' padding needs an odd kernel, got {kernel}")
    return dilation * (kernel - 1) // 2


def _check5(name: str, a: np.ndarray) -> None:
    if a.ndim != 5:
        raise ValueError(f"{name} must be rank 5 (n, c, d, h, w), got shape {a.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvContext:
    # zero-padded input, channel-major and flattened: (c, n * dp * hp * wp)
    x_flat: np.ndarray
    weights: np.ndarray
    x_shape: tuple
    padded: tuple
    out_spatial: tuple
    dilation: int
    padding: int
    offsets: list
    span: int
    has_bias: bool


# im2col column-buffer budget; keeps each chunk resident in cache
_COL_BYTES = 1 << 19


def _tap_offsets(k: int, r: int, hp: int, wp: int) -> list:
    # k-major tap order; fixes the accumulation order of every output voxel
    return [r * ((a * hp + b) * wp + c) for a in range(k) for b in range(k) for c in range(k)]


def _pad_flat(x: np.ndarray, p: int, dtype) -> np.ndarray:
    n, c, d, h, w = x.shape
    xp = np.zeros((c, n, d + 2 * p, h + 2 * p, w + 2 * p), dtype=dtype)
    xp[:, :, p:p + d, p:p + h, p:p + w] = x.transpose(1, 0, 2, 3, 4)
    return xp.reshape(c, -1)


def _correlate(x_flat, wmat, offsets, span, width):
    """Chunked im2col product on the flattened padded grid.

    ``wmat`` is (o, taps * c) with tap-major columns. Returns an (o, width)
    buffer whose first ``span`` columns hold outputs indexed by the padded
    grid position of their first tap.
    """
    c = x_flat.shape[0]
    o = wmat.shape[0]
    taps = len(offsets)
    chunk = max(256, (_COL_BYTES // (taps * c * x_flat.itemsize)) // 256 * 256)
    chunk = min(chunk, span)
    out = np.zeros((o, width), dtype=x_flat.dtype)
    col = np.empty((taps, c, chunk), dtype=x_flat.dtype)
    col2 = col.reshape(taps * c, chunk)
    for s in range(0, span, chunk):
        e = min(span, s + chunk)
        m = e - s
        for i, off in enumerate(offsets):
            col[i, :, :m] = x_flat[:, s + off:e + off]
        np.matmul(wmat, col2[:, :m], out=out[:, s:e])
    return out


def _conv(x, weights, dilation, padding):
    n, c, d, h, w = x.shape
    o, _, k, _, _ = weights.shape
    p = padding
    dp, hp, wp = d + 2 * p, h + 2 * p, w + 2 * p
    ext = kernel_extent(k, dilation)
    do, ho, wo = dp - ext + 1, hp - ext + 1, wp - ext + 1
    if min(do, ho, wo) < 1:
        raise ValueError(f"kernel extent {ext} exceeds padded input {(dp, hp, wp)}")
    dtype = np.result_type(x.dtype, weights.dtype)
    x_flat = _pad_flat(x, p, dtype)
    vol = dp * hp * wp
    offsets = _tap_offsets(k, dilation, hp, wp)
    span = (n - 1) * vol + (do - 1) * hp * wp + (ho - 1) * wp + wo
    wmat = weights.astype(dtype, copy=False).transpose(0, 2, 3, 4, 1).reshape(o, -1)
    buf = _correlate(x_flat, np.ascontiguousarray(wmat), offsets, span, n * vol)
    y = buf.reshape(o, n, dp, hp, wp)[:, :, :do, :ho, :wo].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(y), x_flat, (dp, hp, wp), (do, ho, wo), offsets, span


def conv3d_forward(x: np.ndarray, weights: np.ndarray, bias: Optional[np.ndarray] = None,
                   dilation: int = 1, padding: int = 0, stride: int = 1):
    """Dilated 3-D convolution (cross-correlation) with zero padding.

    Returns ``(y, ctx)``. Output voxel ``i`` is the sum over taps ``k`` of
    ``x[i + dilation * k] * w[k]`` on the zero-padded input.
    """
    _check5("input", x)
    _check5("weights", weights)
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    if stride != 1:
        raise ValueError(f"only stride 1 is supported, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    o, ci, kd, kh, kw = weights.shape
    if ci != x.shape[1]:
        raise ValueError(
            f"input channels do not match weights: input {x.shape}, weights {weights.shape}")
    if not (kd == kh == kw):
        raise ValueError(f"kernel must be cubic, got weights {weights.shape}")
    y, x_flat, padded, out_spatial, offsets, span = _conv(x, weights, dilation, padding)
    if bias is not None:
        y += bias.reshape(1, o, 1, 1, 1).astype(y.dtype, copy=False)
    ctx = ConvContext(x_flat, weights, x.shape, padded, out_spatial,
                      dilation, padding, offsets, span, bias is not None)
    return y, ctx


def _weight_grad(g, x_flat, offsets, span):
    o = g.shape[0]
    c = x_flat.shape[0]
    chunk = 4096 if c + o >= 8 else 32768
    gw = np.zeros((len(offsets), o, c), dtype=x_flat.dtype)
    for s in range(0, span, chunk):
        e = min(span, s + chunk)
        gs = g[:, s:e]
        for i, off in enumerate(offsets):
            gw[i] += gs @ x_flat[:, s + off:e + off].T
    return gw


def conv3d_backward(grad_out: np.ndarray, ctx: Optional[ConvContext]):
    """Gradients of :func:`conv3d_forward` w.r.t. input, weights and bias."""
    if ctx is None:
        raise ValueError("conv3d_backward called without a saved forward context")
    n, c, d, h, w = ctx.x_shape
    o, _, k, _, _ = ctx.weights.shape
    do, ho, wo = ctx.out_spatial
    if grad_out.shape != (n, o, do, ho, wo):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match forward output {(n, o, do, ho, wo)}")
    dp, hp, wp = ctx.padded
    dtype = ctx.x_flat.dtype
    grad_out = grad_out.astype(dtype, copy=False)

    # weight gradient: correlate the output gradient with the saved input
    gbuf = np.zeros((o, n, dp, hp, wp), dtype=dtype)
    gbuf[:, :, :do, :ho, :wo] = grad_out.transpose(1, 0, 2, 3, 4)
    gw = _weight_grad(gbuf.reshape(o, -1), ctx.x_flat, ctx.offsets, ctx.span)
    gw = gw.reshape(k, k, k, o, c).transpose(3, 4, 0, 1, 2)

    # input gradient: full correlation with the flipped, transposed kernel
    flipped = ctx.weights[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    back_pad = kernel_extent(k, ctx.dilation) - 1 - ctx.padding
    gx = _conv(grad_out, flipped, ctx.dilation, max(back_pad, 0))[0]
    if back_pad < 0:
        q = -back_pad
        gx = np.ascontiguousarray(gx[:, :, q:q + d, q:q + h, q:q + w])
    gb = grad_out.sum(axis=(0, 2, 3, 4)) if ctx.has_bias else None
    return gx, np.ascontiguousarray(gw), gb


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BNContext:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization over (n, d, h, w).

    In training mode the running statistics are updated in place with an
    exponential moving average (unbiased variance, as in PyTorch).
    """
    _check5("input", x)
    ch = x.shape[1]
    if gamma.shape != (ch,) or beta.shape != (ch,):
        raise ValueError(f"BN parameters sized {gamma.shape} for {ch} channels")
    shape = (1, ch, 1, 1, 1)
    if train:
        axes = (0, 2, 3, 4)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        m = x.size // ch
        if running_mean is not None and running_var is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm in infer mode needs initialized running statistics")
        mean = running_mean.astype(x.dtype, copy=False)
        var = running_var.astype(x.dtype, copy=False)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype, copy=False)
    xhat = (x - mean.reshape(shape).astype(x.dtype, copy=False)) * inv_std.reshape(shape)
    y = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return y.astype(x.dtype, copy=False), BNContext(xhat, inv_std, gamma, train)


def batchnorm_backward(grad_out, ctx: BNContext):
    axes = (0, 2, 3, 4)
    ch = grad_out.shape[1]
    shape = (1, ch, 1, 1, 1)
    g_gamma = (grad_out * ctx.xhat).sum(axis=axes)
    g_beta = grad_out.sum(axis=axes)
    scale = (ctx.gamma * ctx.inv_std).reshape(shape)
    if ctx.train:
        m = grad_out.size // ch
        gx = scale / m * (m * grad_out - g_beta.reshape(shape)
                          - ctx.xhat * g_gamma.reshape(shape))
    else:
        gx = grad_out * scale
    return gx.astype(grad_out.dtype, copy=False), g_gamma, g_beta


# ---------------------------------------------------------------------------
# pointwise, pooling, resampling, structural
# ---------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(grad_out, mask):
    # derivative at exactly zero is taken as zero
    return grad_out * mask


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _blocks(x):
    n, c, d, h, w = x.shape
    v = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
    return v.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)


def maxpool3d_forward(x):
    """2x2x2 max pooling. Returns (output, argmax) with argmax in 0..7.

    Within a block the local order (dz, dy, dx) agrees with flat-index order,
    so ``argmax`` picking the first maximum breaks ties by lowest flat index.
    """
    _check5("input", x)
    for axis, name in zip(range(2, 5), "dhw"):
        if x.shape[axis] % 2:
            raise ValueError(
                f"maxpool3d needs even spatial dims; dim {name}={x.shape[axis]} is odd")
    b = _blocks(x)
    idx = b.argmax(axis=-1)
    out = np.take_along_axis(b, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool3d_backward(grad_out, idx):
    n, c, d2, h2, w2 = grad_out.shape
    blocks = np.zeros((n, c, d2, h2, w2, 8), dtype=grad_out.dtype)
    np.put_along_axis(blocks, idx[..., None], grad_out[..., None], axis=-1)
    gx = blocks.reshape(n, c, d2, h2, w2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return gx.reshape(n, c, 2 * d2, 2 * h2, 2 * w2)


def _shift(a, axis, step):
    # neighbour along axis with edge clamping: step=-1 gives a[max(k-1, 0)]
    idx = np.arange(a.shape[axis]) + step
    np.clip(idx, 0, a.shape[axis] - 1, out=idx)
    return np.take(a, idx, axis=axis)


def _up_axis(a, axis):
    # factor-2 linear interpolation, half-pixel centres, edge clamped
    even = 0.75 * a + 0.25 * _shift(a, axis, -1)
    odd = 0.75 * a + 0.25 * _shift(a, axis, +1)
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] *= 2
    return out.reshape(shape).astype(a.dtype, copy=False)


def _up_axis_adjoint(g, axis):
    shape = list(g.shape)
    length = shape[axis] // 2
    shape[axis:axis + 1] = [length, 2]
    g2 = g.reshape(shape)
    ge = np.take(g2, 0, axis=axis + 1)
    go = np.take(g2, 1, axis=axis + 1)
    gx = 0.75 * (ge + go)
    sl = [slice(None)] * g.ndim

    def part(s):
        out = list(sl)
        out[axis] = s
        return tuple(out)

    # even[k] reads x[max(k-1, 0)]
    gx[part(slice(0, length - 1))] += 0.25 * ge[part(slice(1, length))]
    gx[part(slice(0, 1))] += 0.25 * ge[part(slice(0, 1))]
    # odd[k] reads x[min(k+1, L-1)]
    gx[part(slice(1, length))] += 0.25 * go[part(slice(0, length - 1))]
    gx[part(slice(length - 1, length))] += 0.25 * go[part(slice(length - 1, length))]
    return gx.astype(g.dtype, copy=False)


def trilinear_upsample(x):
    """Double every spatial dim (align-corners=False convention)."""
    _check5("input", x)
    for axis in (2, 3, 4):
        x = _up_axis(x, axis)
    return x


def trilinear_upsample_backward(grad_out):
    for axis in (4, 3, 2):
        grad_out = _up_axis_adjoint(grad_out, axis)
    return grad_out


def concat_channels(arrays: Sequence[np.ndarray]):
    """Stack along the channel axis; returns (output, channel split points)."""
    if not arrays:
        raise ValueError("concat_channels needs at least one input")
    ref = arrays[0]
    for a in arrays[1:]:
        if a.shape[0] != ref.shape[0] or a.shape[2:] != ref.shape[2:]:
            raise ValueError(f"cannot concatenate shapes {ref.shape} and {a.shape}")
    splits = np.cumsum([a.shape[1] for a in arrays])[:-1]
    return np.concatenate(arrays, axis=1), splits


def split_channels(grad_out, splits):
    return np.split(grad_out, splits, axis=1)


def add(a, b):
    if a.shape != b.shape:
        raise ValueError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b
