"""Command-line frontend: synth, train, score, eval, explain.

Every command is a pure function of its flags, config file and input files;
outputs are written atomically.  Exit codes: 0 success, 1 usage/config
error, 2 numeric divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .attribution import grad_cam, heatmap_filename, write_heatmap_overlay
from .backbone import BackboneSpec, PoolSpec, StageSpec, build_backbone, \
    default_spec, import_weights
from .datapipe import IMAGE_EXTS, decode_image, load_dataset, synth_dataset
from .errors import ConfigError, FormatError, InputError, LayoutError, \
    NumericError
from .evalkit import ANOMALOUS, FLAWLESS, EvalReport, ScoredSet, evaluate, \
    render_report
from .flow import FlowConfig, build_flow, import_flow
from .kernels import ConvSpec
from .trainer import ScoringConfig, TrainConfig, anomaly_score, \
    per_transform_nll, save_checkpoint, train
from .trainer import _atomic_write_text as atomic_write_text

VARIANTS = {"differnet": "none", "attent_se": "se", "attent_cbam": "cbam"}

CONFIG_DEFAULTS: dict = {
    "variant": "differnet",
    "scales": [256, 128, 64],
    "top_channels": 128,
    "stages": None,
    "n_blocks": 8,
    "subnet_hidden": None,
    "clamp": 3.0,
    "epochs": 24,
    "batch_size": 16,
    "learning_rate": 2e-4,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "n_train_transforms": 4,
    "freeze_backbone": False,
    "n_eval_transforms": 8,
    "seed": 0,
    "dataset_root": None,
    "category": None,
    "out_dir": None,
}


# ---------------------------------------------------------------------------
# config handling


def resolve_config(raw: dict) -> dict:
    """Validate a flat config dict and fill in every default."""
    unknown = sorted(set(raw) - set(CONFIG_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    cfg = dict(CONFIG_DEFAULTS)
    cfg.update(raw)
    if cfg["variant"] not in VARIANTS:
        raise ConfigError(
            f"config key 'variant' must be one of {sorted(VARIANTS)}, "
            f"got {cfg['variant']!r}")
    dim = len(cfg["scales"]) * cfg["top_channels"]
    if cfg["subnet_hidden"] is None:
        from .flow import default_hidden
        cfg["subnet_hidden"] = default_hidden(dim)
    return cfg


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return resolve_config(raw)


def backbone_spec_from_config(cfg: dict) -> BackboneSpec:
    attention = VARIANTS[cfg["variant"]]
    if cfg["stages"] is None:
        return default_spec(attention=attention,
                            scales=tuple(cfg["scales"]),
                            top_channels=cfg["top_channels"])
    stages = []
    c_in = 3
    for i, raw in enumerate(cfg["stages"]):
        extra = sorted(set(raw) - {"out_channels", "kernel", "pool"})
        if extra:
            raise ConfigError(f"stage {i + 1}: unknown key {extra[0]!r}")
        k = raw.get("kernel", 3)
        conv = ConvSpec(out_channels=raw["out_channels"], in_channels=c_in,
                        kernel_h=k, kernel_w=k, stride=1, padding=(k - 1) // 2)
        pool = PoolSpec() if raw.get("pool", False) else None
        stages.append(StageSpec(conv=conv, pool=pool, attention=attention))
        c_in = raw["out_channels"]
    return BackboneSpec(stages=tuple(stages), scales=tuple(cfg["scales"]),
                        top_channels=cfg["top_channels"])


def flow_config_from(cfg: dict) -> FlowConfig:
    dim = len(cfg["scales"]) * cfg["top_channels"]
    return FlowConfig(dim=dim, n_blocks=cfg["n_blocks"],
                      subnet_hidden=cfg["subnet_hidden"], clamp=cfg["clamp"],
                      seed=cfg["seed"] + 1)


def train_config_from(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                       learning_rate=cfg["learning_rate"], beta1=cfg["beta1"],
                       beta2=cfg["beta2"], adam_eps=cfg["adam_eps"],
                       n_train_transforms=cfg["n_train_transforms"],
                       seed=cfg["seed"] + 2,
                       freeze_backbone=cfg["freeze_backbone"])


def scoring_config_from(cfg: dict) -> ScoringConfig:
    return ScoringConfig(n_eval_transforms=cfg["n_eval_transforms"])


def build_models(cfg: dict):
    bb = build_backbone(backbone_spec_from_config(cfg), cfg["seed"])
    fl = build_flow(flow_config_from(cfg))
    return bb, fl


def load_checkpoint(path):
    """Load (backbone, flow, config) from a checkpoint weight file.

    path may be the .adwt file or the directory holding checkpoint.adwt;
    the sidecar .json config is read from the same basename.
    """
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.adwt"
    sidecar = p.with_suffix(".json")
    if not p.is_file():
        raise FormatError(f"checkpoint weight file not found: {p}")
    if not sidecar.is_file():
        raise FormatError(f"checkpoint sidecar config not found: {sidecar}")
    with open(sidecar, "r", encoding="utf-8") as f:
        cfg = resolve_config(json.load(f))
    bb, fl = build_models(cfg)
    bb = import_weights(bb, p)
    fl = import_flow(fl, p)
    return bb, fl, cfg


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    layout = synth_dataset(args.out, args.n_train, args.n_test_good,
                           args.n_test_defect, args.seed,
                           category=args.category)
    by_type: dict[str, int] = {}
    for _, t in layout.test_anomalous:
        by_type[t] = by_type.get(t, 0) + 1
    defects = ", ".join(f"{t}: {n}" for t, n in sorted(by_type.items()))
    print(f"wrote {layout.root / layout.category}")
    print(f"  train/good: {len(layout.train_flawless)}")
    print(f"  test/good:  {len(layout.test_flawless)}")
    print(f"  test defects: {defects}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg["out_dir"] = str(args.out)
    if cfg["out_dir"] is None:
        raise ConfigError("config key 'out_dir' (or --out) is required")
    if cfg["dataset_root"] is None or cfg["category"] is None:
        raise ConfigError("config keys 'dataset_root' and 'category' are "
                          "required for training")
    layout = load_dataset(cfg["dataset_root"], cfg["category"])
    bb, fl = build_models(cfg)
    lines = ["epoch,mean_nll"]

    def log(epoch, mean_nll):
        lines.append(f"{epoch},{mean_nll:.6f}")
        print(f"epoch {epoch:3d}  mean nll {mean_nll:.4f}")

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        ckpt = train(bb, fl, layout, train_config_from(cfg), log=log)
    finally:
        atomic_write_text(out_dir / "loss.csv", "\n".join(lines) + "\n")
    wpath, _ = save_checkpoint(out_dir, ckpt.backbone, ckpt.flow, cfg)
    from .figures import plot_loss_curve
    plot_loss_curve(ckpt.epoch_nll, out_dir / "loss_curve.png")
    print(f"checkpoint: {wpath}")
    return 0


def _collect_images(images_arg) -> list[tuple[str, Path]]:
    root = Path(images_arg)
    if root.is_dir():
        pairs = [(p.relative_to(root).as_posix(), p)
                 for p in sorted(root.rglob("*"))
                 if p.is_file() and p.suffix in IMAGE_EXTS]
    elif root.is_file():
        pairs = [(root.name, root)]
    else:
        raise InputError(f"no such image file or directory: {root}")
    if not pairs:
        raise InputError(f"no images found under {root}")
    return sorted(pairs)


def cmd_score(args) -> int:
    bb, fl, cfg = load_checkpoint(args.checkpoint)
    scoring = scoring_config_from(cfg)
    rows = ["id,score"]
    for img_id, path in _collect_images(args.images):
        sample = decode_image(path, id=img_id)
        if args.debug:
            nlls = per_transform_nll(bb, fl, sample.image, scoring)
            detail = " ".join(f"{v:.6f}" for v in nlls)
            print(f"{img_id} nll {detail}")
            score = float(np.mean(nlls))
        else:
            score = anomaly_score(bb, fl, sample.image, scoring)
        rows.append(f"{img_id},{score:.6f}")
    atomic_write_text(args.out, "\n".join(rows) + "\n")
    print(f"wrote {args.out} ({len(rows) - 1} images)")
    return 0


def _read_csv_rows(path, expected_header: str) -> list[list[str]]:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != expected_header:
        raise FormatError(
            f"{path}: expected header {expected_header!r}")
    return [ln.split(",") for ln in lines[1:]]


def _labels_from_dataset(root, category) -> dict[str, str]:
    layout = load_dataset(root, category)
    base = Path(root) / category / "test"
    labels = {}
    for p in layout.test_flawless:
        labels[p.relative_to(base).as_posix()] = FLAWLESS
    for p, _ in layout.test_anomalous:
        labels[p.relative_to(base).as_posix()] = ANOMALOUS
    return labels


def cmd_eval(args) -> int:
    rows = _read_csv_rows(args.scores, "id,score")
    scores = {r[0]: float(r[1]) for r in rows}
    if args.labels:
        labels = {r[0]: r[1] for r in
                  _read_csv_rows(args.labels, "id,label")}
        bad = sorted(v for v in set(labels.values())
                     if v not in (FLAWLESS, ANOMALOUS))
        if bad:
            raise FormatError(f"{args.labels}: unknown label {bad[0]!r}")
    elif args.dataset and args.category:
        labels = _labels_from_dataset(args.dataset, args.category)
    else:
        raise ConfigError("eval needs --labels or --dataset with --category")
    missing = sorted(set(scores) - set(labels))
    if missing:
        raise InputError(f"no label for scored id {missing[0]!r}")
    s = ScoredSet()
    for img_id in sorted(scores):
        s.add(img_id, scores[img_id], labels[img_id])
    category = args.category or "category"
    report = evaluate({category: s}, variant=args.variant)
    text = render_report([report], format=args.format)
    if args.out:
        atomic_write_text(args.out, text)
        print(f"wrote {args.out}")
        if not args.no_figures:
            from .figures import plot_roc_curve, plot_score_hist
            stem = Path(args.out)
            plot_roc_curve(s, stem.with_name(stem.stem + "_roc.png"))
            plot_score_hist(s, stem.with_name(stem.stem + "_hist.png"))
    else:
        sys.stdout.write(text)
    return 0


def cmd_explain(args) -> int:
    bb, fl, cfg = load_checkpoint(args.checkpoint)
    sample = decode_image(args.image)
    stage = args.stage or bb.stage_names()[-1]
    scoring = ScoringConfig(n_eval_transforms=args.transforms)
    heat = grad_cam(bb, fl, sample.image, stage, scoring,
                    input_id=sample.id)
    out = Path(args.out)
    if out.is_dir() or out.suffix != ".ppm":
        out.mkdir(parents=True, exist_ok=True)
        out = out / heatmap_filename(sample.id, stage)
    write_heatmap_overlay(sample.image, heat, out)
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anomflow",
                description="Likelihood-based image anomaly detection with "
                            "attention-gated features")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate the synthetic benchmark tree")
    sp.add_argument("--out", required=True, help="dataset root directory")
    sp.add_argument("--seed", type=int, default=7)
    sp.add_argument("--n-train", type=int, default=200)
    sp.add_argument("--n-test-good", type=int, default=50)
    sp.add_argument("--n-test-defect", type=int, default=50)
    sp.add_argument("--category", default="synthetic")
    sp.set_defaults(func=cmd_synth)

    tp = sub.add_parser("train", help="train a model from a JSON config")
    tp.add_argument("--config", required=True)
    tp.add_argument("--out", help="output directory (overrides out_dir)")
    tp.set_defaults(func=cmd_train)

    cp = sub.add_parser("score", help="score images with a checkpoint")
    cp.add_argument("--checkpoint", required=True)
    cp.add_argument("--images", required=True,
                    help="image file or directory (recursed)")
    cp.add_argument("--out", required=True, help="output scores CSV")
    cp.add_argument("--debug", action="store_true",
                    help="print per-transform nll values")
    cp.set_defaults(func=cmd_score)

    ep = sub.add_parser("eval", help="AUROC report from scores")
    ep.add_argument("--scores", required=True, help="CSV with header id,score")
    ep.add_argument("--labels", help="CSV with header id,label")
    ep.add_argument("--dataset", help="dataset root (labels from the tree)")
    ep.add_argument("--category", help="category name")
    ep.add_argument("--variant", default="model", help="column label")
    ep.add_argument("--format", choices=("csv", "markdown"),
                    default="markdown")
    ep.add_argument("--out", help="write report here instead of stdout")
    ep.add_argument("--no-figures", action="store_true",
                    help="skip ROC/histogram PNGs next to --out")
    ep.set_defaults(func=cmd_eval)

    xp = sub.add_parser("explain", help="Grad-CAM heatmap overlay")
    xp.add_argument("--checkpoint", required=True)
    xp.add_argument("--image", required=True)
    xp.add_argument("--stage", help="target stage (default: last)")
    xp.add_argument("--out", required=True, help="output PPM file or directory")
    xp.add_argument("--transforms", type=int, default=1,
                    help="scoring transforms for the explained score")
    xp.set_defaults(func=cmd_explain)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, LayoutError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
