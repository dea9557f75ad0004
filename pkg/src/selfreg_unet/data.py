"""Datasets: synthetic shapes, GlaS/MoNuSeg-style directories, augmentation, folds."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, MissingMaskError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class SegSample:
    image: np.ndarray  # (C, H, W) float in [0, 1]
    mask: np.ndarray  # (H, W) int
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} disagree")


# ---------------------------------------------------------------- synthetic


def _shape_mask(kind, yy, xx, cy, cx, ry, rx, angle, thickness):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    if kind == "rectangle":
        return (np.abs(u) <= 1) & (np.abs(v) <= 1)
    r2 = u**2 + v**2
    if kind == "ellipse":
        return r2 <= 1
    return (r2 <= 1) & (r2 >= (1 - thickness) ** 2)


def random_shapes(rng, size, classes):
    """Draw 1-4 shapes per foreground class; returns (class_id, shape params) in paint order."""
    h, w = size
    shapes = []
    for cls in range(1, classes):
        for _ in range(rng.integers(1, 5)):
            kind = ("ellipse", "rectangle", "ring")[rng.integers(3)]
            shapes.append(
                (
                    cls,
                    dict(
                        kind=kind,
                        cy=rng.uniform(0.15, 0.85) * h,
                        cx=rng.uniform(0.15, 0.85) * w,
                        ry=rng.uniform(0.06, 0.2) * h,
                        rx=rng.uniform(0.06, 0.2) * w,
                        angle=rng.uniform(0, np.pi),
                        thickness=rng.uniform(0.35, 0.6),
                    ),
                )
            )
    order = rng.permutation(len(shapes))
    return [shapes[i] for i in order]


def rasterize(shapes, size) -> np.ndarray:
    """Exact label mask: later shapes overwrite earlier ones."""
    yy, xx = np.mgrid[0 : size[0], 0 : size[1]].astype(np.float64) + 0.5
    mask = np.zeros(size, dtype=np.int64)
    for cls, params in shapes:
        mask[_shape_mask(yy=yy, xx=xx, **params)] = cls
    return mask


def class_intensity_ranges(classes, difficulty):
    """Background and per-class foreground intensity bands.

    At difficulty 0 the foreground bands sit strictly above the background
    band; increasing difficulty slides them down into it.
    """
    bg = (0.1, 0.4)
    lo = 0.5 - 0.35 * difficulty
    hi = 0.9 - 0.2 * difficulty
    width = (hi - lo) / (classes - 1)
    return bg, [(lo + i * width, lo + (i + 1) * width) for i in range(classes - 1)]


def _texture(rng, size, lo, hi):
    yy, xx = np.mgrid[0 : size[0], 0 : size[1]] / np.array(size).reshape(2, 1, 1)
    t = np.zeros(size)
    for _ in range(3):
        fy, fx = rng.uniform(1, 6, size=2)
        t += np.sin(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    return lo + (hi - lo) * t


def generate_synthetic(n, size=(64, 64), classes=2, difficulty=0.5, seed=0, in_channels=1) -> list[SegSample]:
    """Textured background with random ellipses, rectangles and rings per class."""
    size = tuple(int(s) for s in size)
    if n < 0 or classes < 2 or min(size) < 32 or not 0 <= difficulty <= 1 or in_channels < 1:
        raise ValueError("need n >= 0, classes >= 2, size >= 32x32 and difficulty in [0, 1]")
    rng = np.random.default_rng(seed)
    bg_range, fg_ranges = class_intensity_ranges(classes, difficulty)
    noise_sigma = 0.15 * difficulty
    samples = []
    for i in range(n):
        shapes = random_shapes(rng, size, classes)
        mask = rasterize(shapes, size)
        image = _texture(rng, size, *bg_range)
        for cls in range(1, classes):
            lo, hi = fg_ranges[cls - 1]
            level = rng.uniform(lo, lo + 0.5 * (hi - lo))
            fg = _texture(rng, size, level, level + 0.5 * (hi - lo))
            image = np.where(mask == cls, fg, image)
        if noise_sigma > 0:
            image = image + rng.normal(0, noise_sigma, size)
        image = np.clip(image, 0, 1)
        channels = np.repeat(image[None], in_channels, axis=0).astype(np.float32)
        samples.append(SegSample(channels, mask, f"synth_{i:05d}"))
    return samples


def export_dataset(samples, images_dir, masks_dir, num_classes=None):
    """Write samples as 8-bit PNG pairs; masks are scaled to span 0..255."""
    os.makedirs(images_dir, exist_ok=True)
    os.makedirs(masks_dir, exist_ok=True)
    for s in samples:
        img = np.round(255 * np.clip(s.image.mean(axis=0) if s.image.shape[0] != 3 else s.image.transpose(1, 2, 0), 0, 1))
        Image.fromarray(img.astype(np.uint8)).save(os.path.join(images_dir, f"{s.id}.png"))
        k = num_classes or int(s.mask.max()) + 1
        scale = 255 // max(k - 1, 1)
        Image.fromarray((s.mask * scale).astype(np.uint8), mode="L").save(os.path.join(masks_dir, f"{s.id}.png"))


# ---------------------------------------------------------------- directory loader


def _index_dir(path):
    found = {}
    for name in os.listdir(path):
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTENSIONS:
            found.setdefault(stem, os.path.join(path, name))
    return found


def remap_mask(mask: np.ndarray, num_classes: int, stem: str = "") -> np.ndarray:
    values = np.unique(mask)
    if values.min() >= 0 and values.max() < num_classes:
        return mask.astype(np.int64)
    if len(values) != num_classes:
        raise DecodeError(f"{stem}: mask has {len(values)} distinct values, expected {num_classes}")
    return np.searchsorted(values, mask).astype(np.int64)


def _open(path):
    try:
        with Image.open(path) as img:
            img.load()
            return img.copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def load_directory_dataset(images_dir, masks_dir, num_classes=2, target_size=(64, 64), in_channels=None) -> list[SegSample]:
    """Load ``images_dir/<stem>.*`` with masks ``masks_dir/<stem>.*``, sorted by stem."""
    images = _index_dir(images_dir)
    masks = _index_dir(masks_dir)
    th, tw = target_size
    samples = []
    for stem in sorted(images):
        if stem not in masks:
            raise MissingMaskError(stem)
        img = _open(images[stem])
        if in_channels == 1 or (in_channels is None and img.mode in ("L", "I", "I;16", "F")):
            img = img.convert("L")
        else:
            img = img.convert("RGB")
        arr = np.asarray(img.resize((tw, th), Image.BILINEAR), dtype=np.float32) / 255.0
        arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
        m = _open(masks[stem])
        if m.mode not in ("L", "I", "P", "1"):
            m = m.convert("L")
        m = np.asarray(m.resize((tw, th), Image.NEAREST))
        samples.append(SegSample(np.ascontiguousarray(arr), remap_mask(m, num_classes, stem), stem))
    return samples


# ---------------------------------------------------------------- augmentation


def augment(sample: SegSample, seed, hflip=None, vflip=None, rot90=None) -> SegSample:
    """Random flips and quarter turns applied identically to image and mask.

    Explicit ``hflip``/``vflip``/``rot90`` arguments override the random draw.
    """
    rng = np.random.default_rng(seed)
    draw_h, draw_v, draw_k = bool(rng.integers(2)), bool(rng.integers(2)), int(rng.integers(4))
    hflip = draw_h if hflip is None else hflip
    vflip = draw_v if vflip is None else vflip
    k = draw_k if rot90 is None else rot90
    image, mask = sample.image, sample.mask
    if hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    if k % 4:
        image, mask = np.rot90(image, k, axes=(1, 2)), np.rot90(mask, k)
    return SegSample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.id)


# ---------------------------------------------------------------- folds


@dataclass
class FoldSpec:
    k: int
    repeats: int
    seed: int
    assignments: list[list[int]] = field(default_factory=list)

    def splits(self, repeat):
        """Yield ``(fold, train_idx, val_idx)`` for one repeat."""
        fold_ids = np.asarray(self.assignments[repeat])
        for f in range(self.k):
            yield f, np.flatnonzero(fold_ids != f).tolist(), np.flatnonzero(fold_ids == f).tolist()


def make_folds(n_samples, k=5, repeats=3, seed=0) -> FoldSpec:
    """Repeated k-fold assignment: each repeat is an independent shuffle."""
    if k < 2 or repeats < 1:
        raise ValueError("need k >= 2 and repeats >= 1")
    if n_samples < k:
        raise ValueError(f"n_samples={n_samples} is smaller than k={k}")
    rng = np.random.default_rng(seed)
    assignments = []
    for _ in range(repeats):
        perm = rng.permutation(n_samples)
        fold_ids = np.empty(n_samples, dtype=np.int64)
        fold_ids[perm] = np.arange(n_samples) % k
        assignments.append(fold_ids.tolist())
    return FoldSpec(k, repeats, seed, assignments)
