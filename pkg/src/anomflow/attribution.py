"""Gradient-weighted activation heatmaps for the anomaly score.

The model has no class logits, so the scalar being explained is the
anomaly score itself (the transform-averaged nll).  For each scoring
transform the gradient of its nll w.r.t. the target stage's output at the
largest pyramid scale is captured; gradients and activations are averaged
over transforms, channels are weighted by the spatial mean of the averaged
gradient, and the relu of the weighted activation sum is upsampled to the
input size and min-max normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .backbone import Backbone, extract_features_bwd, extract_features_fwd
from .errors import ConfigError
from .flow import FlowModel, flow_bwd, flow_fwd
from .trainer import ScoringConfig, transformed_batch

F32 = np.float32


@dataclass
class Heatmap:
    values: np.ndarray  # (H,W) float32 in [0,1]
    source_layer: str
    input_id: str


def _stage_index(bb: Backbone, target_stage: str) -> int:
    names = bb.stage_names()
    if target_stage not in names:
        raise ConfigError(
            f"unknown stage {target_stage!r}; valid stages: {', '.join(names)}")
    return names.index(target_stage)


def activation_gradients(backbone: Backbone, flow: FlowModel,
                         image: np.ndarray, target_stage: str,
                         scoring: ScoringConfig):
    """Per-transform stage activations and nll gradients.

    Returns (acts, grads), both (n, C, h, w) at the largest scale: acts[i]
    is transform i's output of the target stage and grads[i] the gradient
    of that transform's own nll w.r.t. it.
    """
    stage_idx = _stage_index(backbone, target_stage)
    batch = transformed_batch(np.asarray(image, dtype=F32), scoring)
    n = batch.shape[0]
    feats, cache = extract_features_fwd(backbone, batch, keep=True)
    z, log_det, fcache = flow_fwd(flow, feats, keep=True)
    gfeat, _ = flow_bwd(flow, fcache, z, np.full(n, -1.0, dtype=F32))
    _, grads = extract_features_bwd(backbone, cache, gfeat,
                                    capture=(0, stage_idx))
    acts = cache[0][1][stage_idx]  # largest scale, post-attention
    return acts, grads


def grad_cam(backbone: Backbone, flow: FlowModel, image: np.ndarray,
             target_stage: str, scoring: ScoringConfig,
             input_id: str = "", grad_hook=None) -> Heatmap:
    """Heatmap of d(anomaly score)/d(target stage activations).

    The score is the mean nll over the scoring transforms, so its gradient
    is the mean of the per-transform gradients; activations are averaged
    the same way.  grad_hook, when given, replaces the averaged gradient
    (the zero-gradient contract is tested through it).
    """
    image = np.asarray(image, dtype=F32)
    acts, grads = activation_gradients(backbone, flow, image, target_stage,
                                       scoring)
    mean_grad = grads.mean(axis=0)
    if grad_hook is not None:
        mean_grad = grad_hook(mean_grad)
    mean_act = acts.mean(axis=0)
    weights = mean_grad.mean(axis=(1, 2))
    cam = K.relu((weights[:, None, None] * mean_act).sum(axis=0))
    cam = K.bilinear_resize(cam, image.shape[1], image.shape[2])
    return Heatmap(values=_minmax(cam), source_layer=target_stage,
                   input_id=input_id)


def _minmax(cam: np.ndarray) -> np.ndarray:
    lo = float(cam.min())
    hi = float(cam.max())
    if hi == 0.0:
        return np.zeros_like(cam)
    if hi == lo:
        return np.ones_like(cam)
    return ((cam - F32(lo)) / F32(hi - lo)).astype(F32)


# ---------------------------------------------------------------------------
# overlay files


def heatmap_colormap(values: np.ndarray) -> np.ndarray:
    """Linear blue(0) -> red(1) colormap; returns (3,H,W)."""
    v = np.clip(values, 0.0, 1.0).astype(F32)
    return np.stack([v, np.zeros_like(v), F32(1.0) - v])


def write_heatmap_overlay(image: np.ndarray, heatmap: Heatmap, path) -> None:
    """Blend the grayscale image 50/50 with the colormapped heatmap (PPM)."""
    from .datapipe import encode_ppm
    image = np.asarray(image, dtype=F32)
    gray = image.mean(axis=0, keepdims=True)
    overlay = 0.5 * gray + 0.5 * heatmap_colormap(heatmap.values)
    encode_ppm(overlay.astype(F32), path)


def heatmap_filename(input_id: str, stage: str) -> str:
    return f"{input_id}.{stage}.ppm"
