"""Training loop, DSC/IoU evaluation, cross-validation and ablation harness."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .data import FoldSpec, SegSample, augment
from .errors import ConfigError, DivergenceError, ShapeError
from .losses import IFDConfig, LossBreakdown, SCRConfig, total_loss
from .unet import UNet, UNetConfig, build_unet

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def derive_seed(seed: int, *purpose) -> int:
    """Child seed from a parent seed and a purpose path, stable across runs and platforms."""
    text = "/".join([str(int(seed)), *map(str, purpose)])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:4], "little") & 0x7FFFFFFF


@dataclass
class TrainConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    scr: SCRConfig = field(default_factory=SCRConfig)
    ifd: IFDConfig = field(default_factory=IFDConfig)
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    eval_every: int = 1
    augment: bool = True
    max_steps: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.unet, dict):
            self.unet = UNetConfig.from_dict(self.unet)
        if isinstance(self.scr, dict):
            self.scr = SCRConfig(**self.scr)
        if isinstance(self.ifd, dict):
            self.ifd = IFDConfig(**self.ifd)
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be ≥ 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be ≥ 1")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be ≥ 0")
        if self.eval_every < 1:
            raise ConfigError("train.eval_every must be ≥ 1")
        if self.dtype not in DTYPES:
            raise ConfigError(f"train.dtype must be one of {sorted(DTYPES)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unet"] = self.unet.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    def with_losses(self, lambda1=None, lambda2=None, use_scr=None, use_ifd=None) -> TrainConfig:
        scr = replace(
            self.scr,
            lambda1=self.scr.lambda1 if lambda1 is None else lambda1,
            enabled=self.scr.enabled if use_scr is None else use_scr,
        )
        ifd = replace(
            self.ifd,
            lambda2=self.ifd.lambda2 if lambda2 is None else lambda2,
            enabled=self.ifd.enabled if use_ifd is None else use_ifd,
        )
        return replace(self, scr=scr, ifd=ifd)


# ---------------------------------------------------------------- metrics


def _check_masks(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def dice_coefficient(pred_mask, gt_mask, class_id: int) -> float:
    pred, gt = _check_masks(pred_mask, gt_mask)
    p, g = pred == class_id, gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def iou(pred_mask, gt_mask, class_id: int) -> float:
    pred, gt = _check_masks(pred_mask, gt_mask)
    p, g = pred == class_id, gt == class_id
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


@dataclass
class MetricSet:
    dsc_per_class: list[float]
    iou_per_class: list[float]
    mean_dsc: float
    mean_iou: float

    def to_dict(self):
        return asdict(self)


def metrics_from_predictions(preds, masks, num_classes: int) -> MetricSet:
    """Per-class DSC/IoU averaged over samples; means over foreground classes."""
    preds, masks = list(preds), list(masks)
    if len(preds) != len(masks):
        raise ShapeError(f"{len(preds)} predictions for {len(masks)} masks")
    if not preds:
        raise ValueError("cannot evaluate an empty dataset")
    dsc = np.zeros(num_classes)
    jac = np.zeros(num_classes)
    for p, g in zip(preds, masks):
        for c in range(num_classes):
            dsc[c] += dice_coefficient(p, g, c)
            jac[c] += iou(p, g, c)
    dsc /= len(preds)
    jac /= len(preds)
    return MetricSet(dsc.tolist(), jac.tolist(), float(dsc[1:].mean()), float(jac[1:].mean()))


def _logits(model, images):
    out = model(images)
    return out[0] if isinstance(out, tuple) else out


def _model_dtype(model):
    params = list(model.parameters())
    return params[0].dtype if params else torch.float32


def stack_batch(samples, dtype=torch.float32):
    images = torch.as_tensor(np.stack([s.image for s in samples])).to(dtype)
    masks = torch.as_tensor(np.stack([s.mask for s in samples])).long()
    return images, masks


@torch.no_grad()
def predict_masks(model, samples, batch_size=16) -> list[np.ndarray]:
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    dtype = _model_dtype(model)
    preds = []
    try:
        for start in range(0, len(samples), batch_size):
            images, _ = stack_batch(samples[start : start + batch_size], dtype)
            preds.extend(_logits(model, images).argmax(dim=1).cpu().numpy())
    finally:
        if hasattr(model, "train"):
            model.train(was_training)
    return preds


def evaluate(model, dataset, num_classes: int | None = None, batch_size=16) -> MetricSet:
    """Argmax predictions scored with per-class DSC and IoU."""
    samples = list(dataset)
    if num_classes is None:
        num_classes = model.config.num_classes
    preds = predict_masks(model, samples, batch_size)
    return metrics_from_predictions(preds, [s.mask for s in samples], num_classes)


# ---------------------------------------------------------------- training


@dataclass
class RunReport:
    config: dict
    seed: int
    loss_trace: list[dict] = field(default_factory=list)  # per epoch
    step_trace: list[dict] = field(default_factory=list)  # per step
    val_metrics: list[dict] = field(default_factory=list)  # per evaluation
    folds: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    best_epoch: int | None = None
    wall_clock: float = 0.0

    def to_dict(self, include_timing=True) -> dict:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_clock")
        return d


def write_report(report: RunReport, path, include_timing=False):
    """Stable-key JSON; timing is excluded by default so reruns are byte-identical."""
    with open(path, "w") as fh:
        json.dump(report.to_dict(include_timing=include_timing), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path) -> RunReport:
    with open(path) as fh:
        return RunReport(**json.load(fh))


def write_loss_csv(report: RunReport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "epoch", "l_cd", "l_scr", "l_ifd", "total"])
        for row in report.step_trace:
            writer.writerow([row["step"], row["epoch"], *(repr(row[k]) for k in ("l_cd", "l_scr", "l_ifd", "total"))])


def default_objective(cfg: TrainConfig):
    def objective(logits, labels, taps, rng):
        return total_loss(logits, labels, taps, cfg.scr, cfg.ifd, rng)

    return objective


def train(model: UNet, train_set, val_set, cfg: TrainConfig, objective=None) -> tuple[UNet, RunReport]:
    """Momentum-SGD training on the combined objective.

    Validation runs every ``cfg.eval_every`` epochs; the parameters with the
    best validation mean DSC are restored before returning. ``objective`` may
    replace the default loss (``(logits, labels, taps, rng) -> LossBreakdown``).
    """
    train_set, val_set = list(train_set), list(val_set)
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    objective = objective or default_objective(cfg)
    dtype = _model_dtype(model)
    optimizer = torch.optim.SGD(
        model.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay
    )
    order_rng = np.random.default_rng(derive_seed(cfg.seed, "train", "order"))
    rcs_rng = np.random.default_rng(cfg.scr.rng_seed)
    report = RunReport(config=cfg.to_dict(), seed=cfg.seed)
    best_dsc, best_state = -math.inf, None
    t0 = time.perf_counter()
    step = 0
    done = False
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = order_rng.permutation(len(train_set))
        aug_seeds = order_rng.integers(0, 2**31, size=len(train_set))
        epoch_rows = []
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            batch = [augment(train_set[i], aug_seeds[i]) if cfg.augment else train_set[i] for i in idx]
            images, labels = stack_batch(batch, dtype)
            if not cfg.scr.resample_each_step:
                rcs_rng = np.random.default_rng(cfg.scr.rng_seed)
            logits, taps = model(images)
            losses: LossBreakdown = objective(logits, labels, taps, rcs_rng)
            step += 1
            if not torch.isfinite(losses.total):
                raise DivergenceError(step, float(losses.total.detach()))
            optimizer.zero_grad(set_to_none=True)
            losses.total.backward()
            optimizer.step()
            row = {"step": step, "epoch": epoch, **losses.as_floats()}
            report.step_trace.append(row)
            epoch_rows.append(row)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        report.loss_trace.append(
            {"epoch": epoch, **{k: float(np.mean([r[k] for r in epoch_rows])) for k in ("l_cd", "l_scr", "l_ifd", "total")}}
        )
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs or done:
            metrics = evaluate(model, val_set, cfg.unet.num_classes)
            report.val_metrics.append({"epoch": epoch, **metrics.to_dict()})
            logger.info("epoch %d loss %.4f val dsc %.4f", epoch, report.loss_trace[-1]["total"], metrics.mean_dsc)
            if metrics.mean_dsc > best_dsc:
                best_dsc = metrics.mean_dsc
                best_state = copy.deepcopy(model.state_dict())
                report.best_epoch = epoch
        if done:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    report.wall_clock = time.perf_counter() - t0
    return model, report


def build_model_for(cfg: TrainConfig, seed_purpose=()) -> UNet:
    unet_cfg = cfg.unet if not seed_purpose else replace(cfg.unet, seed=derive_seed(cfg.unet.seed, *seed_purpose))
    return build_unet(unet_cfg, dtype=DTYPES[cfg.dtype])


# ---------------------------------------------------------------- cross-validation


def aggregate_folds(folds: list[dict]) -> dict:
    """Mean and population std of mean_dsc / mean_iou over fold entries."""
    out = {"n_folds": len(folds)}
    for key in ("mean_dsc", "mean_iou"):
        vals = np.array([f["metrics"][key] for f in folds], dtype=np.float64)
        out[f"{key}_mean"] = float(vals.mean())
        out[f"{key}_std"] = float(vals.std())
    return out


def _run_fold(args):
    samples, train_idx, val_idx, cfg, repeat, fold = args
    torch.set_num_threads(1)
    fold_cfg = replace(cfg, seed=derive_seed(cfg.seed, "crossval", repeat, fold))
    model = build_model_for(cfg, ("crossval", repeat, fold))
    train_set = [samples[i] for i in train_idx]
    val_set = [samples[i] for i in val_idx]
    model, rep = train(model, train_set, val_set, fold_cfg)
    metrics = evaluate(model, val_set, cfg.unet.num_classes)
    return {
        "repeat": repeat,
        "fold": fold,
        "n_train": len(train_idx),
        "n_val": len(val_idx),
        "best_epoch": rep.best_epoch,
        "metrics": metrics.to_dict(),
        "loss_trace": rep.loss_trace,
    }


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("SELFREG_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def run_crossval(dataset, folds: FoldSpec, cfg: TrainConfig, workers=None) -> RunReport:
    """Train one model per (repeat, fold) and aggregate validation metrics."""
    samples = list(dataset)
    t0 = time.perf_counter()
    jobs = [
        (samples, tr, va, cfg, r, f) for r in range(folds.repeats) for f, tr, va in folds.splits(r)
    ]
    workers = workers or num_workers()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_run_fold, jobs))
    else:
        entries = [_run_fold(job) for job in jobs]
    entries.sort(key=lambda e: (e["repeat"], e["fold"]))
    report = RunReport(config=cfg.to_dict(), seed=cfg.seed, folds=entries, aggregate=aggregate_folds(entries))
    report.config["folds"] = {"k": folds.k, "repeats": folds.repeats, "seed": folds.seed}
    report.wall_clock = time.perf_counter() - t0
    return report


# ---------------------------------------------------------------- ablation

DEFAULT_LAMBDAS = (0.0, 0.005, 0.015, 0.045)
FLAG_SETTINGS = {"none": (False, False), "scr": (True, False), "ifd": (False, True), "both": (True, True)}


def default_grid(lambdas=DEFAULT_LAMBDAS, flag_lambda=0.015):
    """λ1 x λ2 sweep with both losses on, plus the four loss-flag combinations."""
    grid = [(l1, l2, "both") for l1 in lambdas for l2 in lambdas]
    grid += [(flag_lambda, flag_lambda, flags) for flags in FLAG_SETTINGS]
    return grid


def run_ablation(dataset, grid, cfg: TrainConfig, folds: FoldSpec) -> list[dict]:
    if not grid:
        raise ValueError("ablation grid is empty")
    rows = []
    for lambda1, lambda2, flags in grid:
        if flags not in FLAG_SETTINGS:
            raise ConfigError(f"unknown loss flags {flags!r}; choose from {sorted(FLAG_SETTINGS)}")
        use_scr, use_ifd = FLAG_SETTINGS[flags]
        cell_cfg = cfg.with_losses(lambda1, lambda2, use_scr, use_ifd)
        rep = run_crossval(dataset, folds, cell_cfg)
        agg = rep.aggregate
        rows.append(
            {
                "lambda1": float(lambda1),
                "lambda2": float(lambda2),
                "flags": flags,
                "mean_dsc": agg["mean_dsc_mean"],
                "std_dsc": agg["mean_dsc_std"],
                "mean_iou": agg["mean_iou_mean"],
                "std_iou": agg["mean_iou_std"],
            }
        )
    return rows


ABLATION_COLUMNS = ["lambda1", "lambda2", "flags", "mean_dsc", "std_dsc", "mean_iou", "std_iou"]


def write_ablation_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
