"""``selfreg`` command line: train, eval, diagnose, ablate and synth.

Every run takes one nested JSON config (``--config``), dotted overrides
(``--set scr.lambda1=0.015``) and a top-level ``--seed``. Child seeds for the
model, channel selection, training order and data are derived from the
top-level seed with :func:`~selfreg_unet.training.derive_seed` using the
purposes ``model``, ``rcs``, ``train``, ``data/train``, ``data/val`` and
``data/split``.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys

import numpy as np

from .data import export_dataset, generate_synthetic, load_directory_dataset, make_folds
from .diagnostics import diagnose_model
from .errors import CheckpointError, ConfigError
from .losses import IFDConfig, SCRConfig
from .training import (
    TrainConfig,
    build_model_for,
    default_grid,
    derive_seed,
    evaluate,
    run_ablation,
    train,
    write_ablation_csv,
    write_loss_csv,
    write_report,
)
from .unet import UNetConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger("selfreg_unet")

DEFAULT_CONFIG = {
    "seed": 0,
    "unet": {
        "backbone": "cnn",
        "in_channels": 1,
        "num_classes": 2,
        "base_channels": 8,
        "input_size": [64, 64],
        "window_size": 4,
    },
    "scr": {"lambda1": 0.015, "enabled": True, "resample_each_step": True},
    "ifd": {"lambda2": 0.015, "enabled": True},
    "train": {
        "epochs": 10,
        "batch_size": 8,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "weight_decay": 1e-4,
        "eval_every": 1,
        "augment": True,
        "max_steps": None,
        "dtype": "float32",
    },
    "data": {
        "source": "synthetic",
        "n_train": 200,
        "n_val": 50,
        "difficulty": 0.6,
        "images_dir": None,
        "masks_dir": None,
        "val_images_dir": None,
        "val_masks_dir": None,
        "val_fraction": 0.2,
        "split": "val",
    },
    "crossval": {"k": 5, "repeats": 3},
    "ablation": {"lambdas": [0.0, 0.005, 0.015, 0.045], "flag_lambda": 0.015},
    "diagnose": {"n_samples": 4, "target_class": 1},
    "synth": {"n": 50},
}


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def merge_config(base: dict, update: dict, prefix="") -> dict:
    """Recursively overlay ``update`` on ``base``; unknown keys are rejected."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[key] = merge_config(out[key], value, path + ".")
        else:
            out[key] = value
    return out


def apply_override(cfg: dict, assignment: str) -> dict:
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not KEY=VALUE")
    key, raw = assignment.split("=", 1)
    nested = parse_value(raw)
    for part in reversed(key.strip().split(".")):
        nested = {part: nested}
    return merge_config(cfg, nested)


def resolve_config(config_path=None, overrides=(), seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        try:
            with open(config_path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        cfg = merge_config(cfg, user)
    for assignment in overrides:
        cfg = apply_override(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    build_train_config(cfg)  # validates every section
    return cfg


def build_train_config(cfg: dict) -> TrainConfig:
    seed = int(cfg["seed"])
    try:
        unet = UNetConfig(**cfg["unet"], seed=derive_seed(seed, "model"))
        scr = SCRConfig(rng_seed=derive_seed(seed, "rcs"), **cfg["scr"])
        ifd = IFDConfig(**cfg["ifd"])
        return TrainConfig(unet=unet, scr=scr, ifd=ifd, seed=derive_seed(seed, "train"), **cfg["train"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_datasets(cfg: dict):
    """Return ``(train_set, val_set)`` described by the ``data`` section."""
    data, unet, seed = cfg["data"], cfg["unet"], int(cfg["seed"])
    size = tuple(unet["input_size"])
    if data["source"] == "synthetic":
        kw = dict(size=size, classes=unet["num_classes"], difficulty=data["difficulty"], in_channels=unet["in_channels"])
        train_set = generate_synthetic(data["n_train"], seed=derive_seed(seed, "data", "train"), **kw)
        val_set = generate_synthetic(data["n_val"], seed=derive_seed(seed, "data", "val"), **kw)
        return train_set, val_set
    if data["source"] != "directory":
        raise ConfigError(f"data.source must be 'synthetic' or 'directory', got {data['source']!r}")
    if not data["images_dir"] or not data["masks_dir"]:
        raise ConfigError("data.images_dir and data.masks_dir are required for directory datasets")
    load = lambda i, m: load_directory_dataset(i, m, unet["num_classes"], size, unet["in_channels"])
    samples = load(data["images_dir"], data["masks_dir"])
    if data["val_images_dir"]:
        return samples, load(data["val_images_dir"], data["val_masks_dir"] or data["masks_dir"])
    rng = np.random.default_rng(derive_seed(seed, "data", "split"))
    perm = rng.permutation(len(samples))
    n_val = max(1, int(round(data["val_fraction"] * len(samples))))
    return [samples[i] for i in sorted(perm[n_val:])], [samples[i] for i in sorted(perm[:n_val])]


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands


def cmd_train(args, cfg):
    tcfg = build_train_config(cfg)
    train_set, val_set = load_datasets(cfg)
    model = build_model_for(tcfg)
    model, report = train(model, train_set, val_set, tcfg)
    save_checkpoint(model, os.path.join(args.out, "checkpoint.npz"), {"best_epoch": report.best_epoch})
    write_report(report, os.path.join(args.out, "report.json"))
    write_loss_csv(report, os.path.join(args.out, "loss_trace.csv"))
    write_json({"wall_clock": report.wall_clock}, os.path.join(args.out, "timing.json"))
    best = max(report.val_metrics, key=lambda m: m["mean_dsc"])
    print(f"best val mean DSC {best['mean_dsc']:.4f} (epoch {best['epoch']}) -> {args.out}")
    return 0


def _require_checkpoint(args):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    return load_checkpoint(args.checkpoint)


def cmd_eval(args, cfg):
    model = _require_checkpoint(args)
    train_set, val_set = load_datasets(cfg)
    dataset = train_set if cfg["data"]["split"] == "train" else val_set
    metrics = evaluate(model, dataset, model.config.num_classes)
    write_json({"split": cfg["data"]["split"], "n_samples": len(dataset), **metrics.to_dict()}, os.path.join(args.out, "metrics.json"))
    print(f"mean DSC {metrics.mean_dsc:.4f}  mean IoU {metrics.mean_iou:.4f}")
    return 0


def cmd_diagnose(args, cfg):
    model = _require_checkpoint(args)
    _, val_set = load_datasets(cfg)
    samples = val_set[: cfg["diagnose"]["n_samples"]]
    summary = diagnose_model(model, samples, args.out, cfg["diagnose"]["target_class"])
    print(f"wrote {len(summary['records'])} redundancy records -> {args.out}")
    return 0


def cmd_ablate(args, cfg):
    tcfg = build_train_config(cfg)
    train_set, _ = load_datasets(cfg)
    folds = make_folds(len(train_set), cfg["crossval"]["k"], cfg["crossval"]["repeats"], derive_seed(cfg["seed"], "folds"))
    grid = default_grid(tuple(cfg["ablation"]["lambdas"]), cfg["ablation"]["flag_lambda"])
    rows = run_ablation(train_set, grid, tcfg, folds)
    write_ablation_csv(rows, os.path.join(args.out, "ablation.csv"))
    write_json(rows, os.path.join(args.out, "ablation.json"))
    print(f"{len(rows)} ablation rows -> {args.out}")
    return 0


def cmd_synth(args, cfg):
    unet, data = cfg["unet"], cfg["data"]
    samples = generate_synthetic(
        cfg["synth"]["n"],
        size=tuple(unet["input_size"]),
        classes=unet["num_classes"],
        difficulty=data["difficulty"],
        seed=derive_seed(cfg["seed"], "data", "synth"),
        in_channels=unet["in_channels"],
    )
    export_dataset(samples, os.path.join(args.out, "images"), os.path.join(args.out, "masks"), unet["num_classes"])
    print(f"{len(samples)} samples -> {args.out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "diagnose": cmd_diagnose, "ablate": cmd_ablate, "synth": cmd_synth}


def build_parser():
    parser = argparse.ArgumentParser(prog="selfreg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", dest="overrides", action="extend", nargs="+", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", default=f"runs/{name}", help="output directory")
        p.add_argument("--seed", type=int)
        if name in ("eval", "diagnose"):
            p.add_argument("--checkpoint", help="checkpoint written by `selfreg train`")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        os.makedirs(args.out, exist_ok=True)
        write_json(cfg, os.path.join(args.out, "config.json"))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
