"""Normalizing flow over feature vectors: permuted affine coupling blocks.

Each block permutes the vector with a fixed random permutation, splits it
into halves (u1, u2) and applies a two-sided affine coupling:

    v1 = u1 * exp(clamp(s2(u2))) + t2(u2)
    v2 = u2 * exp(clamp(s1(v1))) + t1(v1)

where clamp(x) = alpha * tanh(x / alpha) bounds every log-scale, and the
s/t subnets are two dense layers with a relu between them.  The log of the
Jacobian determinant is simply the sum of all clamped scale activations, and
the block inverts in closed form, so likelihoods are exact.

Training starts from the identity map: final subnet layers are
zero-initialized, making z the composed permutation of the input and
log|det J| = 0 at step zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .errors import ConfigError, DimensionError, FormatError, NumericError
from .weights import read_weights, write_weights

F32 = np.float32

DEFAULT_BLOCKS = 8
DEFAULT_CLAMP = 3.0
MAX_SUBNET_HIDDEN = 512


def default_hidden(dim: int) -> int:
    return min(2 * dim, MAX_SUBNET_HIDDEN)


@dataclass(frozen=True)
class FlowConfig:
    dim: int
    n_blocks: int = DEFAULT_BLOCKS
    subnet_hidden: int | None = None  # resolved to min(2*dim, 512)
    clamp: float = DEFAULT_CLAMP
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2 or self.dim % 2:
            raise ConfigError(f"flow dim must be even and >= 2, got {self.dim}")
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be positive, got {self.n_blocks}")
        if self.clamp <= 0:
            raise ConfigError(f"clamp must be positive, got {self.clamp}")
        if self.subnet_hidden is not None and self.subnet_hidden < 1:
            raise ConfigError("subnet_hidden must be positive")

    @property
    def hidden(self) -> int:
        return self.subnet_hidden or default_hidden(self.dim)


@dataclass
class Subnet:
    """Two dense layers with relu; maps D/2 -> hidden -> D/2."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, d_in: int, hidden: int, d_out: int,
             rng: np.random.Generator) -> "Subnet":
        w1 = (rng.standard_normal((hidden, d_in), dtype=F32)
              * F32(np.sqrt(2.0 / d_in)))
        return cls(W1=w1, b1=np.zeros(hidden, dtype=F32),
                   W2=np.zeros((d_out, hidden), dtype=F32),
                   b2=np.zeros(d_out, dtype=F32))

    def named_arrays(self, prefix: str):
        return [(f"{prefix}.W1", self.W1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.W2", self.W2), (f"{prefix}.b2", self.b2)]


@dataclass
class CouplingBlock:
    perm: np.ndarray  # uint32 permutation of dim indices
    s1: Subnet
    t1: Subnet
    s2: Subnet
    t2: Subnet

    def subnets(self):
        return (("s1", self.s1), ("t1", self.t1),
                ("s2", self.s2), ("t2", self.t2))


@dataclass
class FlowModel:
    config: FlowConfig
    blocks: list[CouplingBlock]

    @property
    def dim(self) -> int:
        return self.config.dim

    def named_params(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, blk in enumerate(self.blocks):
            for sub_name, sub in blk.subnets():
                out.extend(sub.named_arrays(f"flow.block{i}.{sub_name}"))
        return out

    def named_perms(self) -> list[tuple[str, np.ndarray]]:
        return [(f"flow.block{i}.perm", blk.perm)
                for i, blk in enumerate(self.blocks)]

    def copy(self) -> "FlowModel":
        blocks = []
        for blk in self.blocks:
            subs = {n: Subnet(s.W1.copy(), s.b1.copy(), s.W2.copy(), s.b2.copy())
                    for n, s in blk.subnets()}
            blocks.append(CouplingBlock(perm=blk.perm.copy(), **subs))
        return FlowModel(config=self.config, blocks=blocks)


@dataclass
class FlowOutput:
    z: np.ndarray
    log_det: float


def build_flow(cfg: FlowConfig) -> FlowModel:
    """Deterministic construction from cfg.seed."""
    rng = np.random.default_rng(cfg.seed)
    half = cfg.dim // 2
    blocks = []
    for _ in range(cfg.n_blocks):
        perm = rng.permutation(cfg.dim).astype(np.uint32)
        subs = {name: Subnet.init(half, cfg.hidden, half, rng)
                for name in ("s1", "t1", "s2", "t2")}
        blocks.append(CouplingBlock(perm=perm, **subs))
    return FlowModel(config=cfg, blocks=blocks)


# ---------------------------------------------------------------------------
# forward / inverse / backward


def _subnet_fwd(sub: Subnet, x: np.ndarray):
    h = x @ sub.W1.T + sub.b1
    a = K.relu(h)
    y = a @ sub.W2.T + sub.b2
    return y, (x, h, a)


def _subnet_bwd(sub: Subnet, cache, gy: np.ndarray, gsub: Subnet):
    x, h, a = cache
    gsub.W2 += gy.T @ a
    gsub.b2 += gy.sum(axis=0)
    ga = gy @ sub.W2
    gh = K.relu_bwd(h, ga)
    gsub.W1 += gh.T @ x
    gsub.b1 += gh.sum(axis=0)
    return gh @ sub.W1


def _clamp(x: np.ndarray, alpha: float) -> np.ndarray:
    return F32(alpha) * np.tanh(x / F32(alpha))


def flow_fwd(model: FlowModel, f: np.ndarray, keep: bool = False):
    """Batched forward: (N,D) -> (z (N,D), log_det (N,), cache)."""
    if f.ndim != 2 or f.shape[1] != model.dim:
        raise DimensionError(
            f"flow expects (N,{model.dim}), got {tuple(f.shape)}")
    alpha = model.config.clamp
    half = model.dim // 2
    x = f
    log_det = np.zeros(f.shape[0], dtype=F32)
    caches = []
    with np.errstate(invalid="ignore", over="ignore"):
        for blk in model.blocks:
            u = x[:, blk.perm]
            u1, u2 = u[:, :half], u[:, half:]
            r2, c_s2 = _subnet_fwd(blk.s2, u2)
            t2, c_t2 = _subnet_fwd(blk.t2, u2)
            sig2 = _clamp(r2, alpha)
            e2 = np.exp(sig2)
            v1 = u1 * e2 + t2
            r1, c_s1 = _subnet_fwd(blk.s1, v1)
            t1, c_t1 = _subnet_fwd(blk.t1, v1)
            sig1 = _clamp(r1, alpha)
            e1 = np.exp(sig1)
            v2 = u2 * e1 + t1
            log_det += sig2.sum(axis=1) + sig1.sum(axis=1)
            x = np.concatenate([v1, v2], axis=1)
            if keep:
                caches.append((u1, u2, v1, sig1, sig2, e1, e2,
                               c_s1, c_t1, c_s2, c_t2))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(log_det))):
        raise NumericError("flow forward produced non-finite values")
    return x, log_det, (caches if keep else None)


def flow_bwd(model: FlowModel, cache, gz: np.ndarray, glogdet: np.ndarray):
    """Backward through the whole flow.

    gz is the gradient at z, glogdet (N,) the gradient at per-sample
    log_det.  Returns (gf, grads) where grads is a FlowModel-shaped
    container of parameter gradients (perms carry no gradient).
    """
    alpha = model.config.clamp
    half = model.dim // 2
    grads = _grad_model(model)
    g = gz
    gl = glogdet[:, None]
    for blk, gblk, blk_cache in zip(reversed(model.blocks),
                                    reversed(grads.blocks),
                                    reversed(cache)):
        u1, u2, v1, sig1, sig2, e1, e2, c_s1, c_t1, c_s2, c_t2 = blk_cache
        gv1, gv2 = g[:, :half].copy(), g[:, half:]
        # v2 = u2 * e1 + t1(v1); log_det += sum sig1
        gsig1 = gv2 * u2 * e1 + gl
        gr1 = gsig1 * (1.0 - (sig1 / F32(alpha)) ** 2)
        gv1 += _subnet_bwd(blk.s1, c_s1, gr1, gblk.s1)
        gv1 += _subnet_bwd(blk.t1, c_t1, gv2, gblk.t1)
        gu2 = gv2 * e1
        # v1 = u1 * e2 + t2(u2); log_det += sum sig2
        gsig2 = gv1 * u1 * e2 + gl
        gr2 = gsig2 * (1.0 - (sig2 / F32(alpha)) ** 2)
        gu2 += _subnet_bwd(blk.s2, c_s2, gr2, gblk.s2)
        gu2 += _subnet_bwd(blk.t2, c_t2, gv1, gblk.t2)
        gu1 = gv1 * e2
        gu = np.concatenate([gu1, gu2], axis=1)
        g = np.empty_like(gu)
        g[:, blk.perm] = gu
    return g, grads


def _grad_model(model: FlowModel) -> FlowModel:
    blocks = []
    for blk in model.blocks:
        subs = {n: Subnet(np.zeros_like(s.W1), np.zeros_like(s.b1),
                          np.zeros_like(s.W2), np.zeros_like(s.b2))
                for n, s in blk.subnets()}
        blocks.append(CouplingBlock(perm=blk.perm, **subs))
    return FlowModel(config=model.config, blocks=blocks)


def flow_forward(model: FlowModel, f: np.ndarray) -> FlowOutput:
    """Single-vector forward pass."""
    z, log_det, _ = flow_fwd(model, np.asarray(f, dtype=F32)[None])
    return FlowOutput(z=z[0], log_det=float(log_det[0]))


def flow_inverse(model: FlowModel, z: np.ndarray) -> np.ndarray:
    """Exact algebraic inverse of flow_forward, blocks in reverse order."""
    z = np.asarray(z, dtype=F32)
    single = z.ndim == 1
    x = z[None] if single else z
    if x.shape[1] != model.dim:
        raise DimensionError(
            f"flow expects dim {model.dim}, got {tuple(z.shape)}")
    alpha = model.config.clamp
    half = model.dim // 2
    for blk in reversed(model.blocks):
        v1, v2 = x[:, :half], x[:, half:]
        r1, _ = _subnet_fwd(blk.s1, v1)
        t1, _ = _subnet_fwd(blk.t1, v1)
        u2 = (v2 - t1) * np.exp(-_clamp(r1, alpha))
        r2, _ = _subnet_fwd(blk.s2, u2)
        t2, _ = _subnet_fwd(blk.t2, u2)
        u1 = (v1 - t2) * np.exp(-_clamp(r2, alpha))
        u = np.concatenate([u1, u2], axis=1)
        x = np.empty_like(u)
        x[:, blk.perm] = u
    return x[0] if single else x


# ---------------------------------------------------------------------------
# likelihood


def nll_values(z: np.ndarray, log_det: np.ndarray) -> np.ndarray:
    """Per-sample negative log-likelihood up to the (D/2) log 2pi constant."""
    return 0.5 * (z * z).sum(axis=1) - log_det


def nll(out: FlowOutput) -> float:
    """||z||^2 / 2 - log|det J|; lower means more likely."""
    return float(0.5 * np.dot(out.z, out.z) - out.log_det)


def nll_gradient(model: FlowModel, f: np.ndarray):
    """Gradient of nll(flow_forward(f)) w.r.t. parameters and f.

    Returns (grads, gf) where grads maps canonical parameter names to
    arrays and gf has f's shape.
    """
    fb = np.asarray(f, dtype=F32)[None]
    z, log_det, cache = flow_fwd(model, fb, keep=True)
    gf, grads = flow_bwd(model, cache, z, -np.ones(1, dtype=F32))
    return dict(grads.named_params()), gf[0]


# ---------------------------------------------------------------------------
# serialization


def export_flow(model: FlowModel, path) -> None:
    write_weights(path, model.named_perms() + model.named_params())


def flow_records(model: FlowModel) -> list[tuple[str, np.ndarray]]:
    return model.named_perms() + model.named_params()


def import_flow(model: FlowModel, path) -> FlowModel:
    """Copy of model with permutations and weights taken from an ADWT file."""
    records = read_weights(path)
    return load_flow_records(model, records, str(path))


def load_flow_records(model: FlowModel, records: dict[str, np.ndarray],
                      origin: str) -> FlowModel:
    out = model.copy()
    for name, arr in out.named_perms():
        if name not in records:
            raise FormatError(f"{origin}: missing record {name!r}")
        new = records[name]
        if new.dtype != np.uint32 or new.shape != arr.shape:
            raise FormatError(f"{origin}: record {name!r} is not a valid "
                              f"permutation of {arr.shape[0]} indices")
        if sorted(new.tolist()) != list(range(arr.shape[0])):
            raise FormatError(f"{origin}: record {name!r} is not a bijection")
        arr[...] = new
    for name, arr in out.named_params():
        if name not in records:
            raise FormatError(f"{origin}: missing record {name!r}")
        new = records[name]
        if new.dtype != np.float32 or tuple(new.shape) != tuple(arr.shape):
            raise FormatError(
                f"{origin}: record {name!r} has shape {tuple(new.shape)}, "
                f"expected {tuple(arr.shape)}")
        arr[...] = new
    return out
