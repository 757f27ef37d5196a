"""Multi-scale convolutional feature extractor with optional attention gates.

An image is resized to each configured scale, pushed through the stage
pipeline (conv -> relu -> optional max-pool -> optional attention), and the
final stage's global average pool is concatenated across scales into one
feature vector of length ``len(scales) * top_channels``.

The default stage layout is a small five-stage net (channels 32/48/64/96/128,
kernels 5/3/3/3/3, pools after stages 1, 2 and 5) with an attention unit
after every stage; it trains on a single CPU while keeping the multi-scale
pyramid and attention placement of larger designs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K
from .attention import CBAMParams, SEParams, cbam_bwd, cbam_fwd, se_bwd, se_fwd
from .errors import ConfigError, DimensionError, FormatError, InputError
from .weights import read_weights, write_weights

F32 = np.float32

ATTENTION_KINDS = ("none", "se", "cbam")

DEFAULT_SCALES = (256, 128, 64)
DEFAULT_TOP_CHANNELS = 128
_DEFAULT_CHANNELS = (32, 48, 64, 96, 128)
_DEFAULT_KERNELS = (5, 3, 3, 3, 3)
_DEFAULT_POOL_AFTER = (1, 2, 5)  # 1-based stage numbers


@dataclass(frozen=True)
class PoolSpec:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class StageSpec:
    """One stage: conv -> relu -> optional max_pool -> optional attention."""

    conv: K.ConvSpec
    pool: PoolSpec | None = None
    attention: str = "none"

    def __post_init__(self):
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.attention!r}")


@dataclass(frozen=True)
class BackboneSpec:
    stages: tuple[StageSpec, ...]
    scales: tuple[int, ...] = DEFAULT_SCALES
    top_channels: int = DEFAULT_TOP_CHANNELS

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        if not self.scales:
            raise ConfigError("backbone needs at least one scale")
        if any(s < 1 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if list(self.scales) != sorted(set(self.scales), reverse=True):
            raise ConfigError(f"scales must be strictly decreasing, got "
                              f"{self.scales}")
        chain = 3
        for i, st in enumerate(self.stages):
            if st.conv.in_channels != chain:
                raise ConfigError(
                    f"stage {i + 1} expects {st.conv.in_channels} input "
                    f"channels but receives {chain}")
            chain = st.conv.out_channels
        if chain != self.top_channels:
            raise ConfigError(
                f"last stage emits {chain} channels, top_channels is "
                f"{self.top_channels}")

    @property
    def feature_dim(self) -> int:
        return len(self.scales) * self.top_channels


def default_spec(attention: str = "none",
                 scales=DEFAULT_SCALES,
                 top_channels: int = DEFAULT_TOP_CHANNELS) -> BackboneSpec:
    """The standard five-stage layout with one attention kind throughout."""
    channels = _DEFAULT_CHANNELS[:-1] + (top_channels,)
    stages = []
    c_in = 3
    for i, (c_out, k) in enumerate(zip(channels, _DEFAULT_KERNELS), start=1):
        conv = K.ConvSpec(out_channels=c_out, in_channels=c_in, kernel_h=k,
                          kernel_w=k, stride=1, padding=(k - 1) // 2)
        pool = PoolSpec() if i in _DEFAULT_POOL_AFTER else None
        stages.append(StageSpec(conv=conv, pool=pool, attention=attention))
        c_in = c_out
    return BackboneSpec(stages=tuple(stages), scales=tuple(scales),
                        top_channels=top_channels)


@dataclass
class Backbone:
    spec: BackboneSpec
    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    attention: list[SEParams | CBAMParams | None] = field(default_factory=list)

    def stage_names(self) -> list[str]:
        return [f"stage{i + 1}" for i in range(len(self.spec.stages))]

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        """Canonical (name, array) pairs; arrays are live views."""
        out = []
        for i, st in enumerate(self.spec.stages):
            pfx = f"stage{i + 1}"
            out.append((f"{pfx}.conv.kernel", self.kernels[i]))
            out.append((f"{pfx}.conv.bias", self.biases[i]))
            att = self.attention[i]
            if att is not None:
                out.extend(att.named_arrays(f"{pfx}.{st.attention}"))
        return out

    def conv_param_names(self) -> set[str]:
        return {n for n, _ in self.named_params() if ".conv." in n}

    def copy(self) -> "Backbone":
        return Backbone(
            spec=self.spec,
            kernels=[k.copy() for k in self.kernels],
            biases=[b.copy() for b in self.biases],
            attention=[None if a is None else replace(
                a, **{f: v.copy() for f, v in _arr_fields(a).items()})
                for a in self.attention])


def _arr_fields(params) -> dict[str, np.ndarray]:
    return {k: v for k, v in vars(params).items() if isinstance(v, np.ndarray)}


def build_backbone(spec: BackboneSpec, seed: int) -> Backbone:
    """Deterministic init: He fan-in conv weights, zero biases, neutral gates."""
    rng = np.random.default_rng(seed)
    kernels, biases, attn = [], [], []
    for st in spec.stages:
        c = st.conv
        fan_in = c.in_channels * c.kernel_h * c.kernel_w
        k = (rng.standard_normal(
            (c.out_channels, c.in_channels, c.kernel_h, c.kernel_w), dtype=F32)
            * F32(np.sqrt(2.0 / fan_in)))
        kernels.append(k)
        biases.append(np.zeros(c.out_channels, dtype=F32))
        if st.attention == "se":
            attn.append(SEParams.init(c.out_channels, rng))
        elif st.attention == "cbam":
            attn.append(CBAMParams.init(c.out_channels, rng))
        else:
            attn.append(None)
    return Backbone(spec=spec, kernels=kernels, biases=biases, attention=attn)


# ---------------------------------------------------------------------------
# forward / backward


def _run_stages(bb: Backbone, x: np.ndarray, keep: bool):
    """Push a batch through all stages; collect caches when keep is True."""
    caches = []
    outputs = []
    for i, st in enumerate(bb.spec.stages):
        x, conv_cache = K.conv2d_fwd(x, bb.kernels[i], bb.biases[i], st.conv)
        pre_relu = x if keep else None
        x = K.relu(x)
        pool_cache = None
        if st.pool is not None:
            x, pool_cache = K.max_pool_fwd(x, st.pool.window, st.pool.stride)
        att_cache = None
        if st.attention == "se":
            x, att_cache = se_fwd(x, bb.attention[i])
        elif st.attention == "cbam":
            x, att_cache = cbam_fwd(x, bb.attention[i])
        if keep:
            caches.append((conv_cache, pre_relu, pool_cache, att_cache))
            outputs.append(x)
    return x, caches, outputs


def extract_features_fwd(bb: Backbone, images: np.ndarray, keep: bool = False):
    """Batched multi-scale feature extraction.

    images: (N,3,H,W) with H,W >= max(scales).  Returns (features, cache);
    cache is None unless keep is set.
    """
    n, c, h, w = images.shape
    if c != 3:
        raise DimensionError(f"expected 3-channel images, got {c}")
    top = max(bb.spec.scales)
    if h < top or w < top:
        raise InputError(
            f"image {h}x{w} smaller than largest scale {top}")
    feats = []
    scale_caches = []
    for s in bb.spec.scales:
        x = K.bilinear_resize(images, s, s)
        x, caches, outputs = _run_stages(bb, x, keep)
        pooled, gap_shape = K.global_avg_pool_fwd(x)
        feats.append(pooled)
        if keep:
            scale_caches.append((caches, outputs, gap_shape))
    features = np.concatenate(feats, axis=1)
    return features, (scale_caches if keep else None)


class GradStore:
    """Accumulates parameter gradients keyed by canonical name."""

    def __init__(self, bb: Backbone):
        self.bb = bb
        self.grads = {name: np.zeros_like(arr)
                      for name, arr in bb.named_params()}

    def add_stage(self, i: int, gkernel, gbias, gatt):
        pfx = f"stage{i + 1}"
        self.grads[f"{pfx}.conv.kernel"] += gkernel
        self.grads[f"{pfx}.conv.bias"] += gbias
        if gatt is not None:
            kind = self.bb.spec.stages[i].attention
            for name, arr in gatt.named_arrays(f"{pfx}.{kind}"):
                self.grads[name] += arr


def extract_features_bwd(bb: Backbone, cache, gfeat: np.ndarray,
                         store: GradStore | None = None,
                         capture: tuple[int, int] | None = None):
    """Backpropagate feature gradients into parameter gradients.

    capture=(scale_index, stage_index) additionally returns the gradient at
    that stage's output (post-attention).  Returns (store, captured_grad).
    """
    if store is None:
        store = GradStore(bb)
    captured = None
    c_top = bb.spec.top_channels
    for si, (caches, outputs, gap_shape) in enumerate(cache):
        g = K.global_avg_pool_bwd(
            gap_shape, gfeat[:, si * c_top:(si + 1) * c_top])
        for i in range(len(bb.spec.stages) - 1, -1, -1):
            st = bb.spec.stages[i]
            conv_cache, pre_relu, pool_cache, att_cache = caches[i]
            if capture is not None and capture == (si, i):
                captured = g
            if st.attention == "se":
                g, gatt = se_bwd(att_cache, g)
            elif st.attention == "cbam":
                g, gatt = cbam_bwd(att_cache, g)
            else:
                gatt = None
            if st.pool is not None:
                g = K.max_pool_bwd(pool_cache, g)
            g = K.relu_bwd(pre_relu, g)
            g, gk, gb = K.conv2d_bwd(conv_cache, g)
            store.add_stage(i, gk, gb, gatt)
    return store, captured


def extract_features(bb: Backbone, image: np.ndarray) -> np.ndarray:
    """Single-image feature vector of length len(scales) * top_channels."""
    f, _ = extract_features_fwd(bb, image[None])
    return f[0]


# ---------------------------------------------------------------------------
# weight files


def export_weights(bb: Backbone, path) -> None:
    """Write all backbone parameters as an ADWT file."""
    write_weights(path, bb.named_params())


def import_weights(bb: Backbone, path) -> Backbone:
    """Return a copy of bb with parameters loaded from an ADWT file.

    Records that do not belong to the backbone (e.g. flow weights in a
    combined checkpoint) are ignored; missing or mis-shaped backbone records
    raise FormatError naming the record.  The input backbone is never
    mutated, so a failed import has no side effects.
    """
    records = read_weights(path)
    out = bb.copy()
    for name, arr in out.named_params():
        if name not in records:
            raise FormatError(f"{path}: missing record {name!r}")
        new = records[name]
        if new.dtype != np.float32:
            raise FormatError(f"{path}: record {name!r} has wrong dtype")
        if tuple(new.shape) != tuple(arr.shape):
            raise FormatError(
                f"{path}: record {name!r} has shape {tuple(new.shape)}, "
                f"expected {tuple(arr.shape)}")
        arr[...] = new
    return out
