"""Maximum-likelihood training and transform-averaged anomaly scoring.

Training minimizes the mean negative log-likelihood of flow-mapped features
over augmented copies of the flawless training images.  Each epoch presents
every image ``n_train_transforms`` times with a freshly drawn rotation and
brightness jitter, shuffles the expanded pool, and steps Adam once per
batch.  Gradients always reach the flow and attention parameters; conv
kernels/biases are skipped when ``freeze_backbone`` is set.

Scoring averages the nll over a fixed, deterministic transform set: the
identity plus evenly spaced rotations.  Higher score means more anomalous.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .backbone import Backbone, GradStore, extract_features_bwd, \
    extract_features_fwd
from .errors import ConfigError, InputError, NumericError
from .flow import FlowModel, flow_bwd, flow_fwd, nll_values
from .weights import write_weights

F32 = np.float32


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 24
    batch_size: int = 16
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    n_train_transforms: int = 4
    seed: int = 0
    freeze_backbone: bool = False

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.n_train_transforms) < 1:
            raise ConfigError(f"non-positive field in {self}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")


@dataclass(frozen=True)
class ScoringConfig:
    n_eval_transforms: int = 8

    def __post_init__(self):
        if self.n_eval_transforms < 1:
            raise ConfigError("n_eval_transforms must be >= 1")

    def angles(self) -> list[float]:
        """Identity plus (n-1) rotations evenly spaced over the circle."""
        n = self.n_eval_transforms
        return [360.0 * k / n for k in range(n)]


# ---------------------------------------------------------------------------
# augmentation


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random rotation in [0, 360) plus brightness jitter in [0.9, 1.1].

    Rotation resamples bilinearly with edge replication; the result is
    clipped back to [0, 1].  Draw order (angle, then factor) is fixed, so a
    given rng state always yields the same output.
    """
    angle = rng.uniform(0.0, 360.0)
    factor = rng.uniform(0.9, 1.1)
    return _apply_augment(image, angle, factor)


def _apply_augment(image: np.ndarray, angle: float, factor: float) -> np.ndarray:
    out = K.rotate_image(image, angle)
    if factor != 1.0:
        out = out * F32(factor)
    return np.clip(out, 0.0, 1.0, out=out)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adaptive-moment estimation over live parameter views."""

    def __init__(self, params: list[tuple[str, np.ndarray]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 skip: set[str] = frozenset()):
        self.params = [(n, p) for n, p in params if n not in skip]
        self.lr = F32(lr)
        self.beta1, self.beta2, self.eps = F32(beta1), F32(beta2), F32(eps)
        self.t = 0
        self.m = {n: np.zeros_like(p) for n, p in self.params}
        self.v = {n: np.zeros_like(p) for n, p in self.params}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1c = F32(1.0) - self.beta1 ** self.t
        b2c = F32(1.0) - self.beta2 ** self.t
        scale = self.lr * np.sqrt(b2c, dtype=F32) / b1c
        eps = self.eps * np.sqrt(b2c, dtype=F32)
        for name, p in self.params:
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (F32(1.0) - self.beta1) * g
            v *= self.beta2
            v += (F32(1.0) - self.beta2) * (g * g)
            p -= scale * m / (np.sqrt(v) + eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class Checkpoint:
    backbone: Backbone
    flow: FlowModel
    epoch_nll: list[float] = field(default_factory=list)


def _train_images(dataset) -> list[np.ndarray]:
    if hasattr(dataset, "train_flawless"):
        from .datapipe import decode_image
        return [decode_image(p).image for p in dataset.train_flawless]
    return [np.asarray(im, dtype=F32) for im in dataset]


def train(backbone: Backbone, flow: FlowModel, dataset,
          cfg: TrainConfig, log=None) -> Checkpoint:
    """Train in place; returns the models plus the per-epoch mean nll.

    dataset is either a DatasetLayout (its train_flawless images are used)
    or a sequence of (3,H,W) image arrays.  Aborts with NumericError on a
    non-finite loss or when an epoch's mean nll exceeds ten times the
    first epoch's.
    """
    images = _train_images(dataset)
    if not images:
        raise InputError("training dataset is empty")
    if len(images) < cfg.batch_size:
        raise InputError(
            f"need at least batch_size={cfg.batch_size} training images, "
            f"got {len(images)}")
    rng = np.random.default_rng(cfg.seed)
    params = backbone.named_params() + flow.named_params()
    skip = backbone.conv_param_names() if cfg.freeze_backbone else set()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps,
               skip=skip)
    n_samples = len(images) * cfg.n_train_transforms
    history: list[float] = []
    guard = None
    for epoch in range(1, cfg.epochs + 1):
        draws = [(rng.uniform(0.0, 360.0), rng.uniform(0.9, 1.1))
                 for _ in range(n_samples)]
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, cfg.batch_size):
            take = order[start:start + cfg.batch_size]
            batch = np.stack([
                _apply_augment(images[i % len(images)], *draws[i])
                for i in take])
            loss_sum = _train_step(backbone, flow, batch, opt, cfg,
                                   epoch, start // cfg.batch_size)
            total += loss_sum
        mean_nll = total / n_samples
        history.append(mean_nll)
        if log is not None:
            log(epoch, mean_nll)
        if guard is None:
            guard = 10.0 * max(abs(mean_nll), 1.0)
        elif mean_nll > guard:
            raise NumericError(
                f"divergence guard tripped at epoch {epoch}: mean nll "
                f"{mean_nll:.4g} exceeds 10x the initial {history[0]:.4g}")
    return Checkpoint(backbone=backbone, flow=flow, epoch_nll=history)


def _train_step(backbone, flow, batch, opt, cfg, epoch, batch_idx) -> float:
    n = batch.shape[0]
    feats, bcache = extract_features_fwd(backbone, batch, keep=True)
    z, log_det, fcache = flow_fwd(flow, feats, keep=True)
    nlls = nll_values(z, log_det)
    if not np.all(np.isfinite(nlls)):
        raise NumericError(
            f"non-finite loss at epoch {epoch}, batch {batch_idx}")
    inv_n = F32(1.0 / n)
    gfeat, fgrads = flow_bwd(flow, fcache, z * inv_n,
                             np.full(n, -inv_n, dtype=F32))
    store = GradStore(backbone)
    extract_features_bwd(backbone, bcache, gfeat, store)
    grads = store.grads
    grads.update(fgrads.named_params())
    opt.step(grads)
    return float(nlls.sum())


# ---------------------------------------------------------------------------
# scoring


def transformed_batch(image: np.ndarray, cfg: ScoringConfig) -> np.ndarray:
    return np.stack([image if a == 0.0 else K.rotate_image(image, a)
                     for a in cfg.angles()])


def anomaly_score(backbone: Backbone, flow: FlowModel, image: np.ndarray,
                  cfg: ScoringConfig) -> float:
    """Mean nll over the fixed transform set; higher = more anomalous."""
    return float(np.mean(per_transform_nll(backbone, flow, image, cfg)))


def per_transform_nll(backbone: Backbone, flow: FlowModel, image: np.ndarray,
                      cfg: ScoringConfig) -> np.ndarray:
    batch = transformed_batch(np.asarray(image, dtype=F32), cfg)
    feats, _ = extract_features_fwd(backbone, batch)
    z, log_det, _ = flow_fwd(flow, feats)
    return nll_values(z, log_det)


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(out_dir, backbone: Backbone, flow: FlowModel,
                    config: dict) -> tuple[str, str]:
    """Write <out_dir>/checkpoint.adwt plus the sidecar config echo."""
    os.makedirs(out_dir, exist_ok=True)
    wpath = os.path.join(out_dir, "checkpoint.adwt")
    cpath = os.path.join(out_dir, "checkpoint.json")
    from .flow import flow_records
    write_weights(wpath, backbone.named_params() + flow_records(flow))
    _atomic_write_text(cpath, json.dumps(config, indent=2, sort_keys=True) + "\n")
    return wpath, cpath


def _atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
