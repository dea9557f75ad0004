"""Per-block Grad-CAM maps and channel-similarity (redundancy) analysis."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torch.nn import functional as F

from .errors import ChannelParityError
from .unet import FeatureTap, TapAddress, UNet


class Half(str, enum.Enum):
    SHALLOW = "shallow"
    DEEP = "deep"


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    half: Half
    address: TapAddress


@dataclass
class AttentionMap:
    values: np.ndarray
    address: TapAddress
    target_class: int


def channel_similarity(tap: FeatureTap, half: Half | str) -> SimilarityMatrix:
    """Batch-averaged pairwise cosine similarity between channels of one half."""
    half = Half(half)
    x = tap.values.detach().to(torch.float64)
    c = x.shape[1]
    if c % 2:
        raise ChannelParityError(f"tap {tap.address} has an odd channel count {c}")
    x = x[:, : c // 2] if half is Half.SHALLOW else x[:, c // 2 :]
    flat = x.flatten(2)
    norms = flat.norm(dim=2, keepdim=True)
    unit = torch.where(norms > 0, flat / norms.clamp_min(1e-300), torch.zeros_like(flat))
    sim = unit @ unit.transpose(1, 2)
    eye = torch.eye(sim.shape[-1], dtype=sim.dtype)
    sim = sim * (1 - eye) + eye
    sim = sim.clamp(-1.0, 1.0).mean(dim=0)
    # enforce exact symmetry after floating-point matmul
    sim = 0.5 * (sim + sim.T)
    return SimilarityMatrix(sim.numpy(), half, tap.address)


def redundancy_score(matrix: SimilarityMatrix | np.ndarray) -> float:
    """Mean absolute off-diagonal similarity, 0 for a 1x1 matrix."""
    values = np.asarray(getattr(matrix, "values", matrix), dtype=np.float64)
    n = values.shape[0]
    if n < 2:
        return 0.0
    off = np.abs(values[~np.eye(n, dtype=bool)])
    return float(off.mean())


def _minmax(cam: torch.Tensor) -> torch.Tensor:
    lo, hi = cam.min(), cam.max()
    if hi > lo:
        return (cam - lo) / (hi - lo)
    return torch.zeros_like(cam)


def grad_cam(model: UNet, image, target_class: int, address: TapAddress | str) -> AttentionMap:
    """Grad-CAM of the summed ``target_class`` logits with respect to one tap.

    ``image`` is (C, H, W) or (1, C, H, W). The map is rectified, min-max
    normalised and nearest-neighbour resized to the input resolution.
    """
    if isinstance(address, str):
        address = TapAddress.parse(address)
    if address not in model.tap_registry:
        raise ValueError(f"unknown tap address {address}")
    if not 0 <= target_class < model.config.num_classes:
        raise ValueError(f"target_class must be in [0, {model.config.num_classes})")
    x = torch.as_tensor(np.asarray(image)) if not torch.is_tensor(image) else image
    if x.ndim == 3:
        x = x.unsqueeze(0)
    x = x.to(next(model.parameters()).dtype)

    with torch.enable_grad():
        logits, taps = model(x)
        activ = taps[model.tap_registry.index(address)].values
        target = logits[:, target_class].sum()
        (grads,) = torch.autograd.grad(target, activ, allow_unused=True)
    if grads is None:
        grads = torch.zeros_like(activ)
    cam = cam_from_gradients(activ.detach()[0], grads.detach()[0], tuple(x.shape[-2:]))
    return AttentionMap(cam, address, int(target_class))


def cam_from_gradients(activ: torch.Tensor, grads: torch.Tensor, out_hw) -> np.ndarray:
    """Weighted channel sum of one (C, h, w) activation, rectified, normalised and resized."""
    weights = grads.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * activ).sum(dim=0))
    cam = _minmax(cam)
    cam = F.interpolate(cam[None, None], size=tuple(out_hw), mode="nearest")[0, 0]
    return cam.to(torch.float64).numpy()


def block_addresses(model: UNet) -> list[TapAddress]:
    """One address per block: its last layer."""
    return [a for a in model.tap_registry if a.layer_index == 2]


def _similarity_image(values: np.ndarray, scale: int = 8) -> Image.Image:
    # diverging map: -1 blue, 0 white, +1 red
    v = np.clip(values, -1, 1)
    r = np.where(v >= 0, 1.0, 1.0 + v)
    b = np.where(v <= 0, 1.0, 1.0 - v)
    g = 1.0 - np.abs(v)
    rgb = np.stack([r, g, b], axis=-1)
    img = Image.fromarray(np.round(255 * rgb).astype(np.uint8), mode="RGB")
    return img.resize((values.shape[1] * scale, values.shape[0] * scale), Image.NEAREST)


def diagnose_model(model: UNet, samples, out_dir, target_class: int = 1) -> dict:
    """Write attention maps, similarity heatmaps and a redundancy summary.

    ``samples`` is a sequence of :class:`~selfreg_unet.data.SegSample` or of
    (C, H, W) arrays. Attention maps are averaged over samples; similarity
    matrices average over the whole sample batch.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("diagnose_model needs at least one sample")
    images = np.stack([np.asarray(getattr(s, "image", s)) for s in samples])
    target_class = min(target_class, model.config.num_classes - 1)
    was_training = model.training
    model.eval()
    try:
        attention = {}
        for addr in block_addresses(model):
            maps = [grad_cam(model, img, target_class, addr).values for img in images]
            attention[addr] = np.mean(maps, axis=0)
        with torch.no_grad():
            _, taps = model(torch.as_tensor(images).to(next(model.parameters()).dtype))
    finally:
        model.train(was_training)

    os.makedirs(out_dir, exist_ok=True)
    att_dir = os.path.join(out_dir, "attention")
    sim_dir = os.path.join(out_dir, "similarity")
    os.makedirs(att_dir, exist_ok=True)
    os.makedirs(sim_dir, exist_ok=True)

    for addr, cam in attention.items():
        img = Image.fromarray(np.round(255 * np.clip(cam, 0, 1)).astype(np.uint8), mode="L")
        img.save(os.path.join(att_dir, f"{addr.block}.png"))

    records = []
    for tap in taps:
        for half in Half:
            sim = channel_similarity(tap, half)
            _similarity_image(sim.values).save(os.path.join(sim_dir, f"{tap.address}_{half.value}.png"))
            records.append(
                {
                    "address": str(tap.address),
                    "half": half.value,
                    "redundancy_score": round(redundancy_score(sim), 12),
                }
            )
    summary = {"target_class": target_class, "num_samples": len(samples), "records": records}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def redundancy_at(taps: list[FeatureTap], address: TapAddress | str) -> dict[str, float]:
    if isinstance(address, str):
        address = TapAddress.parse(address)
    tap = next(t for t in taps if t.address == address)
    return {h.value: redundancy_score(channel_similarity(tap, h)) for h in Half}
