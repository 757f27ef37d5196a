"""Float32 forward/backward kernels for the convolutional stack.

Arrays are C-contiguous float32 throughout; that is the numeric carrier for
images, feature maps and parameters everywhere in this package.  The public
single-image functions (``conv2d``, ``dense``, ``max_pool``, ...) mirror a
per-image contract; the ``*_fwd``/``*_bwd`` pairs carry a leading batch axis
and an explicit cache, and are what the model code composes.  Every function
is pure: no shared mutable state, safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

F32 = np.float32


def as_f32(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array."""
    return np.ascontiguousarray(x, dtype=F32)


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution (cross-correlation, zero pad)."""

    out_channels: int
    in_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if min(self.out_channels, self.in_channels, self.kernel_h,
               self.kernel_w, self.stride) < 1 or self.padding < 0:
            raise ConfigError(f"invalid conv spec: {self}")

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise DimensionError(
                f"conv output would be {oh}x{ow} for input {h}x{w} with {self}")
        return oh, ow


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    """Unfold (N,C,H,W) into patch rows of shape (N*OH*OW, C*kh*kw)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def conv2d_fwd(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
               spec: ConvSpec):
    """Batched conv forward. Returns (y, cache) with y of shape (N,C_out,OH,OW)."""
    n, c, h, w = x.shape
    if c != spec.in_channels or kernel.shape != (
            spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise DimensionError(
            f"conv2d shape mismatch: input {tuple(x.shape[1:])} vs kernel "
            f"{tuple(kernel.shape)} under {spec}")
    if bias.shape != (spec.out_channels,):
        raise DimensionError(
            f"conv2d bias shape {tuple(bias.shape)} != ({spec.out_channels},)")
    cols, oh, ow = _im2col(x, spec.kernel_h, spec.kernel_w, spec.stride,
                           spec.padding)
    wmat = kernel.reshape(spec.out_channels, -1)
    y = cols @ wmat.T
    y += bias
    y = np.ascontiguousarray(
        y.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2))
    return y, (cols, x.shape, kernel, spec)


def conv2d_bwd(cache, gy: np.ndarray):
    """Gradients (gx, gkernel, gbias) for conv2d_fwd."""
    cols, xshape, kernel, spec = cache
    n, c, h, w = xshape
    cout = spec.out_channels
    gym = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, cout)
    gb = gym.sum(axis=0)
    gw = (gym.T @ cols).reshape(kernel.shape)
    gcols = gym @ kernel.reshape(cout, -1)
    gx = _col2im(gcols, xshape, spec)
    return gx, gw, gb


def _col2im(gcols: np.ndarray, xshape, spec: ConvSpec) -> np.ndarray:
    n, c, h, w = xshape
    kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
    oh, ow = spec.out_size(h, w)
    g = gcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=F32)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + s * oh:s, j:j + s * ow:s] += g[:, :, i, j]
    if p:
        out = np.ascontiguousarray(out[:, :, p:p + h, p:p + w])
    return out


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
           spec: ConvSpec) -> np.ndarray:
    """Single-image convolution of (C,H,W) -> (C_out,OH,OW)."""
    y, _ = conv2d_fwd(x[None], kernel, bias, spec)
    return y[0]


# ---------------------------------------------------------------------------
# dense


def dense_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Batched affine map (N,D) @ W.T + b with W of shape (M,D)."""
    if x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(
            f"dense shape mismatch: x {tuple(x.shape)}, W {tuple(w.shape)}, "
            f"b {tuple(b.shape)}")
    return x @ w.T + b, (x, w)


def dense_bwd(cache, gy: np.ndarray):
    x, w = cache
    return gy @ w, gy.T @ x, gy.sum(axis=0)


def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Single-vector affine map W @ x + b."""
    y, _ = dense_fwd(x[None], w, b)
    return y[0]


# ---------------------------------------------------------------------------
# activations and elementwise ops


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, F32(0))


def relu_bwd(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return np.where(x > 0, gy, F32(0))


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Backward given the forward output y = sigmoid(x)."""
    return gy * y * (1.0 - y)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_bwd(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return gy * (1.0 - y * y)


def _broadcast_operand(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Expand y against x per the channel/spatial broadcast contract."""
    if y.shape == x.shape:
        return y
    if x.ndim == 3:
        c, h, w = x.shape
        if y.shape == (c,):
            return y[:, None, None]
        if y.shape == (h, w):
            return y[None, :, :]
    raise DimensionError(
        f"cannot broadcast {tuple(y.shape)} against {tuple(x.shape)}")


def elementwise(fn: str, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Apply a named unary/binary elementwise op.

    Binary ops accept equal shapes, a per-channel vector (C,) against
    (C,H,W), or a spatial map (H,W) against (C,H,W).
    """
    if fn in ("relu", "sigmoid", "tanh"):
        if y is not None:
            raise DimensionError(f"{fn} is unary")
        return {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}[fn](x)
    if fn in ("mul", "add"):
        if y is None:
            raise DimensionError(f"{fn} needs two operands")
        yb = _broadcast_operand(x, y)
        return x * yb if fn == "mul" else x + yb
    raise ConfigError(f"unknown elementwise fn {fn!r}")


# ---------------------------------------------------------------------------
# pooling


def max_pool_fwd(x: np.ndarray, window: int, stride: int):
    """Batched windowed max over (N,C,H,W). Cache records the argmax."""
    n, c, h, w = x.shape
    if h < window or w < window:
        raise DimensionError(
            f"max_pool window {window} larger than input {h}x{w}")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    nn, cc, oh, ow = win.shape[:4]
    flat = np.ascontiguousarray(win).reshape(nn, cc, oh, ow, window * window)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), (idx, x.shape, window, stride)


def max_pool_bwd(cache, gy: np.ndarray) -> np.ndarray:
    """Route gradient to the first maximal element (row-major) per window."""
    idx, xshape, window, stride = cache
    n, c, h, w = xshape
    oh, ow = idx.shape[2], idx.shape[3]
    iy = idx // window + (np.arange(oh) * stride)[None, None, :, None]
    ix = idx % window + (np.arange(ow) * stride)[None, None, None, :]
    nb = np.arange(n)[:, None, None, None]
    cb = np.arange(c)[None, :, None, None]
    pos = ((nb * c + cb) * h + iy) * w + ix
    gx = np.zeros(n * c * h * w, dtype=F32)
    if stride >= window:
        gx[pos.ravel()] = gy.ravel()
    else:
        np.add.at(gx, pos.ravel(), gy.ravel())
    return gx.reshape(n, c, h, w)


def max_pool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    """Single-image max pooling of (C,H,W)."""
    y, _ = max_pool_fwd(x[None], window, stride)
    return y[0]


def global_avg_pool_fwd(x: np.ndarray):
    """Per-channel mean over the spatial axes of (N,C,H,W)."""
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_bwd(xshape, gy: np.ndarray) -> np.ndarray:
    n, c, h, w = xshape
    gx = np.empty(xshape, dtype=F32)
    gx[:] = (gy / F32(h * w))[:, :, None, None]
    return gx


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Single-image global average pool (C,H,W) -> (C,)."""
    if x.ndim != 3:
        raise DimensionError(f"expected (C,H,W), got {tuple(x.shape)}")
    y, _ = global_avg_pool_fwd(x[None])
    return y[0]


def global_max_pool_fwd(x: np.ndarray):
    """Per-channel max over spatial axes; cache holds first-max indices."""
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def global_max_pool_bwd(cache, gy: np.ndarray) -> np.ndarray:
    idx, xshape = cache
    n, c, h, w = xshape
    gx = np.zeros((n, c, h * w), dtype=F32)
    np.put_along_axis(gx, idx[..., None], gy[..., None], axis=-1)
    return gx.reshape(xshape)


# ---------------------------------------------------------------------------
# bilinear sampling (resize / rotation)


def bilinear_sample(x: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample x(..., H, W) at float coordinates with edge replication.

    ys/xs share an arbitrary output shape S; the result is x's leading axes
    followed by S.  Interpolation uses the lerp form, so constant regions are
    reproduced exactly.
    """
    h, w = x.shape[-2:]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (ys - y0).astype(F32)
    tx = (xs - x0).astype(F32)
    a = x[..., y0, x0]
    b = x[..., y0, x1]
    c = x[..., y1, x0]
    d = x[..., y1, x1]
    top = a + tx * (b - a)
    bot = c + tx * (d - c)
    return top + ty * (bot - top)


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize the last two axes with half-pixel-center bilinear sampling."""
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    return bilinear_sample(x, ys[:, None], xs[None, :])


def rotate_image(x: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the image center, bilinear with edge replication.

    Accepts (C,H,W) or (N,C,H,W); the spatial size is preserved.  angle 0
    is the exact identity.
    """
    h, w = x.shape[-2:]
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy = np.arange(h, dtype=np.float64)[:, None] - cy
    dx = np.arange(w, dtype=np.float64)[None, :] - cx
    src_y = cy + cos_t * dy - sin_t * dx
    src_x = cx + sin_t * dy + cos_t * dx
    return bilinear_sample(x, src_y, src_x)
