"""Channel and channel+spatial attention gates for feature maps.

Both units rescale a (C,H,W) activation tensor by sigmoid gates in (0,1):
the squeeze-excite unit gates channels from a pooled descriptor, the
channel+spatial unit (CBAM-style) first gates channels from average- and
max-pooled descriptors through a shared bias-free MLP, then gates pixels
from a small convolution over the channel-mean/channel-max maps.

Single-image entry points (``se_forward``, ``cbam_forward``, ...) implement
the per-image contract; ``*_fwd``/``*_bwd`` run on batches and return the
cache the backward pass needs.  Gradient containers reuse the parameter
dataclasses, so they flatten through the same canonical names.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConfigError, DimensionError

F32 = np.float32

DEFAULT_REDUCTION = 16
DEFAULT_SPATIAL_KERNEL = 7


def _reduction_for(channels: int, r: int | None) -> int:
    """Default bottleneck ratio, falling back to r=C for narrow maps."""
    if r is None:
        r = DEFAULT_REDUCTION if channels >= DEFAULT_REDUCTION else channels
    if r < 1 or channels % r:
        raise ConfigError(f"channel count {channels} not divisible by r={r}")
    return r


@dataclass
class SEParams:
    """Weights of one squeeze-excite gate over C channels."""

    r: int
    W1: np.ndarray  # (C/r, C)
    b1: np.ndarray  # (C/r,)
    W2: np.ndarray  # (C, C/r)
    b2: np.ndarray  # (C,)

    @property
    def channels(self) -> int:
        return self.W1.shape[1]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator,
             r: int | None = None) -> "SEParams":
        """He-init first layer, zero last layer: gate logits start at 0."""
        r = _reduction_for(channels, r)
        hidden = channels // r
        w1 = (rng.standard_normal((hidden, channels), dtype=F32)
              * F32(np.sqrt(2.0 / channels)))
        return cls(r=r,
                   W1=w1,
                   b1=np.zeros(hidden, dtype=F32),
                   W2=np.zeros((channels, hidden), dtype=F32),
                   b2=np.zeros(channels, dtype=F32))

    @classmethod
    def saturated(cls, channels: int, r: int | None = None,
                  logit: float = 40.0) -> "SEParams":
        """Gates pinned fully open (logit >= 40 -> gate == 1 in float32)."""
        r = _reduction_for(channels, r)
        hidden = channels // r
        return cls(r=r,
                   W1=np.zeros((hidden, channels), dtype=F32),
                   b1=np.zeros(hidden, dtype=F32),
                   W2=np.zeros((channels, hidden), dtype=F32),
                   b2=np.full(channels, logit, dtype=F32))

    def named_arrays(self, prefix: str):
        return [(f"{prefix}.W1", self.W1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.W2", self.W2), (f"{prefix}.b2", self.b2)]

    def zeros_like(self) -> "SEParams":
        return SEParams(self.r, np.zeros_like(self.W1), np.zeros_like(self.b1),
                        np.zeros_like(self.W2), np.zeros_like(self.b2))


@dataclass
class CBAMParams:
    """Weights of one channel+spatial gate.

    The channel MLP is shared between the average- and max-pooled
    descriptors and carries no biases; the spatial gate is a single
    2-in/1-out convolution with odd square kernel plus a scalar bias.
    """

    r: int
    W1: np.ndarray            # (C/r, C)
    W2: np.ndarray            # (C, C/r)
    spatial_kernel: np.ndarray  # (1, 2, k, k), k odd
    spatial_bias: np.ndarray    # shape (1,)

    @property
    def channels(self) -> int:
        return self.W1.shape[1]

    @property
    def spatial_k(self) -> int:
        return self.spatial_kernel.shape[2]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator,
             r: int | None = None,
             spatial_k: int = DEFAULT_SPATIAL_KERNEL) -> "CBAMParams":
        """He-init first MLP layer, zero everything else: gates start at 0.5."""
        if spatial_k % 2 == 0 or spatial_k < 1:
            raise ConfigError(f"spatial kernel side must be odd, got {spatial_k}")
        r = _reduction_for(channels, r)
        hidden = channels // r
        w1 = (rng.standard_normal((hidden, channels), dtype=F32)
              * F32(np.sqrt(2.0 / channels)))
        return cls(r=r,
                   W1=w1,
                   W2=np.zeros((channels, hidden), dtype=F32),
                   spatial_kernel=np.zeros((1, 2, spatial_k, spatial_k), dtype=F32),
                   spatial_bias=np.zeros(1, dtype=F32))

    @classmethod
    def saturated(cls, channels: int, r: int | None = None,
                  spatial_k: int = DEFAULT_SPATIAL_KERNEL,
                  gain: float = 1e5, logit: float = 40.0) -> "CBAMParams":
        """Drive both gates to 1.

        The channel MLP has no bias, so it is saturated with large all-ones
        layers: post-relu feature maps make the pooled descriptors
        non-negative, and any channel that defeats the gain is itself zero,
        where the gate value cannot matter.
        """
        r = _reduction_for(channels, r)
        hidden = channels // r
        sk = np.zeros((1, 2, spatial_k, spatial_k), dtype=F32)
        return cls(r=r,
                   W1=np.full((hidden, channels), gain, dtype=F32),
                   W2=np.full((channels, hidden), gain, dtype=F32),
                   spatial_kernel=sk,
                   spatial_bias=np.full(1, logit, dtype=F32))

    def named_arrays(self, prefix: str):
        return [(f"{prefix}.W1", self.W1), (f"{prefix}.W2", self.W2),
                (f"{prefix}.spatial_kernel", self.spatial_kernel),
                (f"{prefix}.spatial_bias", self.spatial_bias)]

    def zeros_like(self) -> "CBAMParams":
        return CBAMParams(self.r, np.zeros_like(self.W1), np.zeros_like(self.W2),
                          np.zeros_like(self.spatial_kernel),
                          np.zeros_like(self.spatial_bias))

    def spatial_conv_spec(self) -> K.ConvSpec:
        k = self.spatial_k
        return K.ConvSpec(out_channels=1, in_channels=2, kernel_h=k,
                          kernel_w=k, stride=1, padding=(k - 1) // 2)


def _check_channels(x: np.ndarray, channels: int, unit: str):
    if x.shape[1] != channels:
        raise DimensionError(
            f"{unit} expects {channels} channels, got input {tuple(x.shape[1:])}")


# ---------------------------------------------------------------------------
# squeeze-excite


def se_fwd(x: np.ndarray, p: SEParams):
    """Batched SE gating of (N,C,H,W); returns (out, cache)."""
    _check_channels(x, p.channels, "se")
    g, _ = K.global_avg_pool_fwd(x)
    h1, _ = K.dense_fwd(g, p.W1, p.b1)
    a1 = K.relu(h1)
    h2, _ = K.dense_fwd(a1, p.W2, p.b2)
    m = K.sigmoid(h2)
    out = x * m[:, :, None, None]
    return out, (x, g, h1, a1, m, p)


def se_bwd(cache, gy: np.ndarray):
    """Returns (gx, SEParams-shaped gradients)."""
    x, g, h1, a1, m, p = cache
    n, c, h, w = x.shape
    gm = (gy * x).sum(axis=(2, 3))
    gx = gy * m[:, :, None, None]
    gh2 = K.sigmoid_bwd(m, gm)
    ga1, gw2, gb2 = K.dense_bwd((a1, p.W2), gh2)
    gh1 = K.relu_bwd(h1, ga1)
    gg, gw1, gb1 = K.dense_bwd((g, p.W1), gh1)
    gx += K.global_avg_pool_bwd(x.shape, gg)
    return gx, SEParams(p.r, gw1, gb1, gw2, gb2)


def se_forward(x: np.ndarray, p: SEParams) -> np.ndarray:
    """Single-image SE gate: out = x * sigmoid(W2 relu(W1 gap(x) + b1) + b2)."""
    out, _ = se_fwd(x[None], p)
    return out[0]


# ---------------------------------------------------------------------------
# CBAM


def _cbam_channel_fwd(x: np.ndarray, p: CBAMParams):
    ga, _ = K.global_avg_pool_fwd(x)
    gm, gm_cache = K.global_max_pool_fwd(x)
    ha = ga @ p.W1.T
    hm = gm @ p.W1.T
    aa, am = K.relu(ha), K.relu(hm)
    logits = aa @ p.W2.T + am @ p.W2.T
    mc = K.sigmoid(logits)
    return mc, (ga, gm, gm_cache, ha, hm, aa, am)


def cbam_fwd(x: np.ndarray, p: CBAMParams):
    """Batched CBAM: channel gate strictly before spatial gate."""
    _check_channels(x, p.channels, "cbam")
    mc, ch_cache = _cbam_channel_fwd(x, p)
    xg = x * mc[:, :, None, None]

    mean_map = xg.mean(axis=1, keepdims=True)
    cidx = xg.argmax(axis=1)
    max_map = np.take_along_axis(xg, cidx[:, None], axis=1)
    stack = np.concatenate([mean_map, max_map], axis=1)
    s, conv_cache = K.conv2d_fwd(stack, p.spatial_kernel,
                                 p.spatial_bias, p.spatial_conv_spec())
    ms = K.sigmoid(s)
    out = xg * ms
    return out, (x, p, mc, ch_cache, xg, cidx, conv_cache, ms)


def cbam_bwd(cache, gy: np.ndarray):
    """Returns (gx, CBAMParams-shaped gradients)."""
    x, p, mc, ch_cache, xg, cidx, conv_cache, ms = cache
    n, c, h, w = x.shape
    ga, gm, gm_cache, ha, hm, aa, am = ch_cache

    # spatial gate
    gms = (gy * xg).sum(axis=1, keepdims=True)
    gxg = gy * ms
    gs = K.sigmoid_bwd(ms, gms)
    gstack, gk, gb = K.conv2d_bwd(conv_cache, gs)
    gxg += gstack[:, 0:1] / F32(c)
    gmax = np.zeros_like(xg)
    np.put_along_axis(gmax, cidx[:, None], gstack[:, 1:2], axis=1)
    gxg += gmax

    # channel gate
    gmc = (gxg * x).sum(axis=(2, 3))
    gx = gxg * mc[:, :, None, None]
    glogits = K.sigmoid_bwd(mc, gmc)
    gaa = glogits @ p.W2
    gam = glogits @ p.W2
    gw2 = glogits.T @ aa + glogits.T @ am
    gha = K.relu_bwd(ha, gaa)
    ghm = K.relu_bwd(hm, gam)
    gw1 = gha.T @ ga + ghm.T @ gm
    gga = gha @ p.W1
    ggm = ghm @ p.W1
    gx += K.global_avg_pool_bwd(x.shape, gga)
    gx += K.global_max_pool_bwd(gm_cache, ggm)
    return gx, CBAMParams(p.r, gw1, gw2, gk, gb)


def cbam_channel_gate(x: np.ndarray, p: CBAMParams) -> np.ndarray:
    """Per-channel gate from avg- and max-pooled descriptors, shared MLP."""
    _check_channels(x[None], p.channels, "cbam")
    mc, _ = _cbam_channel_fwd(x[None], p)
    return mc[0]


def cbam_spatial_gate(x: np.ndarray, p: CBAMParams) -> np.ndarray:
    """Per-pixel gate from a conv over the channel-mean/max maps."""
    mean_map = x.mean(axis=0, keepdims=True)
    max_map = x.max(axis=0, keepdims=True)
    stack = np.concatenate([mean_map, max_map], axis=0)
    s = K.conv2d(stack, p.spatial_kernel, p.spatial_bias,
                 p.spatial_conv_spec())
    return K.sigmoid(s[0])


def cbam_forward(x: np.ndarray, p: CBAMParams) -> np.ndarray:
    """Single-image CBAM: x' = x * M_c(x); out = x' * M_s(x')."""
    out, _ = cbam_fwd(x[None], p)
    return out[0]
