"""Segmentation objective and the two self-regularisation terms.

``total = dice_ce + lambda1 * scr + lambda2 * ifd``

* ``scr_loss`` pulls every non-final tap towards the final decoder feature
  map (D1), pooled to the tap's resolution. The tap's channels are matched
  to the teacher's by random channel selection.
* ``ifd_loss`` pulls the second (deep) half of each tap's channels towards
  its first (shallow) half.

Teachers (the pooled final map, the shallow half) are detached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.nn import functional as F

from .errors import AlignmentError, ChannelParityError, ConfigError, LabelRangeError, ShapeError
from .unet import FINAL_BLOCK, FeatureTap

DICE_EPS = 1e-5


@dataclass
class SCRConfig:
    lambda1: float = 0.015
    rng_seed: int = 0
    resample_each_step: bool = True
    enabled: bool = True

    def __post_init__(self):
        if not self.lambda1 >= 0:
            raise ConfigError("scr.lambda1 must be ≥ 0")


@dataclass
class IFDConfig:
    lambda2: float = 0.015
    p: int = 2
    enabled: bool = True

    def __post_init__(self):
        if not self.lambda2 >= 0:
            raise ConfigError("ifd.lambda2 must be ≥ 0")
        if self.p != 2:
            raise ConfigError("ifd.p must be 2")


@dataclass
class LossBreakdown:
    l_cd: torch.Tensor
    l_scr: torch.Tensor
    l_ifd: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l_cd", "l_scr", "l_ifd", "total")}


def dice_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """``0.5 * cross-entropy + 0.5 * (1 - mean soft Dice over classes)``."""
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (B, K, H, W), got {tuple(logits.shape)}")
    b, k, h, w = logits.shape
    if tuple(labels.shape) != (b, h, w):
        raise ShapeError(f"labels must be {(b, h, w)}, got {tuple(labels.shape)}")
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise LabelRangeError(f"labels must lie in [0, {k})")
    ce = F.cross_entropy(logits, labels)
    probs = logits.softmax(dim=1)
    onehot = F.one_hot(labels, k).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = ((2 * inter + DICE_EPS) / (denom + DICE_EPS)).mean()
    return 0.5 * ce + 0.5 * (1 - dice)


def random_channel_select(feature: torch.Tensor, k: int, rng: np.random.Generator):
    """Pick ``k`` distinct channels uniformly at random.

    Returns the selected sub-tensor (gradient flows through it) and the
    chosen indices in selection order.
    """
    c = feature.shape[1]
    if not 1 <= k <= c:
        raise ValueError(f"k must be in [1, {c}], got {k}")
    indices = rng.choice(c, size=k, replace=False)
    index = torch.as_tensor(indices, dtype=torch.long, device=feature.device)
    return feature.index_select(1, index), [int(i) for i in indices]


def spatial_average_pool(feature: torch.Tensor, target_hw) -> torch.Tensor:
    h, w = feature.shape[-2:]
    th, tw = target_hw
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ShapeError(f"cannot pool {(h, w)} to {(th, tw)}: sides must divide")
    if (th, tw) == (h, w):
        return feature
    return F.avg_pool2d(feature, kernel_size=(h // th, w // tw))


def split_scr_taps(taps: list[FeatureTap]) -> tuple[list[FeatureTap], FeatureTap]:
    """Separate the SCR students (all non-D1 taps) from the teacher (last D1 tap)."""
    students = [t for t in taps if t.address.block != FINAL_BLOCK]
    final = [t for t in taps if t.address.block == FINAL_BLOCK]
    if not final:
        raise AlignmentError("no D1 tap present to act as the SCR teacher")
    return students, max(final, key=lambda t: t.address)


def scr_loss(taps: list[FeatureTap], final_tap: FeatureTap, rng: np.random.Generator) -> torch.Tensor:
    """Mean squared gap between each student tap and the pooled final map."""
    if not taps:
        raise ValueError("scr_loss needs at least one student tap")
    teacher_full = final_tap.values.detach()
    c_final = teacher_full.shape[1]
    terms = []
    for tap in taps:
        if tap.values.shape[1] < c_final:
            raise AlignmentError(
                f"tap {tap.address} has {tap.values.shape[1]} channels, fewer than the teacher's {c_final}"
            )
        teacher = spatial_average_pool(teacher_full, tap.values.shape[-2:])
        student, _ = random_channel_select(tap.values, c_final, rng)
        terms.append((student - teacher).square().mean())
    return torch.stack(terms).mean()


def ifd_loss(taps: list[FeatureTap]) -> torch.Tensor:
    """Mean squared gap between deep (second-half) and detached shallow (first-half) channels."""
    if not taps:
        raise ValueError("ifd_loss needs at least one tap")
    terms = []
    for tap in taps:
        c = tap.values.shape[1]
        if c % 2:
            raise ChannelParityError(f"tap {tap.address} has an odd channel count {c}")
        shallow, deep = tap.values[:, : c // 2], tap.values[:, c // 2 :]
        terms.append((deep - shallow.detach()).square().mean())
    return torch.stack(terms).mean()


def total_loss(logits, labels, taps, scr_cfg: SCRConfig, ifd_cfg: IFDConfig, rng) -> LossBreakdown:
    l_cd = dice_ce_loss(logits, labels)
    zero = l_cd.new_zeros(())
    if scr_cfg.enabled:
        students, final = split_scr_taps(taps)
        l_scr = scr_loss(students, final, rng)
    else:
        l_scr = zero
    l_ifd = ifd_loss(taps) if ifd_cfg.enabled else zero
    total = l_cd + scr_cfg.lambda1 * l_scr + ifd_cfg.lambda2 * l_ifd
    return LossBreakdown(l_cd, l_scr, l_ifd, total)
