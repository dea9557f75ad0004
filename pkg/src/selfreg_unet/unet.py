"""Unified depth-5 UNet with a tap registry.

Both backbones share one layout: an input projection, encoder blocks E1..E4,
a bottleneck B, decoder blocks D4..D1 and a 1x1 output projection. Every
block holds two layers and the output of each layer is exposed as a
:class:`FeatureTap`, giving 18 taps in the order

    E1(1), E1(2), ..., E4(2), B(1), B(2), D4(1), D4(2), ..., D1(1), D1(2)

For the windowed-attention backbone the patch embedding is the input
projection followed by E1, and the last patch-expanding stage is D1, so tap
addresses and shapes are identical to the CNN backbone.
"""

from __future__ import annotations

import enum
import functools
import io
import json
import math
import re
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import CheckpointError, ConfigError, ShapeError

CHECKPOINT_FORMAT = "selfreg-ckpt/1"
NUM_LEVELS = 4
LAYERS_PER_BLOCK = 2


class BlockKind(str, enum.Enum):
    ENCODER = "E"
    BOTTLENECK = "B"
    DECODER = "D"


class Backbone(str, enum.Enum):
    CNN = "cnn"
    ATTENTION = "attention"


_ADDRESS_RE = re.compile(r"^([EBD])(\d?)\((\d)\)$")


@functools.total_ordering
@dataclass(frozen=True)
class TapAddress:
    """Block/layer address of a feature map, e.g. ``E1(2)`` or ``B(1)``."""

    block_kind: BlockKind
    block_index: int
    layer_index: int

    def __post_init__(self):
        object.__setattr__(self, "block_kind", BlockKind(self.block_kind))
        if self.block_kind is BlockKind.BOTTLENECK:
            object.__setattr__(self, "block_index", 0)
        elif not 1 <= self.block_index <= NUM_LEVELS:
            raise ValueError(f"block_index must be in 1..{NUM_LEVELS}, got {self.block_index}")
        if not 1 <= self.layer_index <= LAYERS_PER_BLOCK:
            raise ValueError(f"layer_index must be in 1..{LAYERS_PER_BLOCK}, got {self.layer_index}")

    @classmethod
    def parse(cls, text: str) -> TapAddress:
        m = _ADDRESS_RE.match(text.strip())
        if m is None:
            raise ValueError(f"cannot parse tap address {text!r}")
        kind, index, layer = m.groups()
        if (kind == "B") != (index == ""):
            raise ValueError(f"cannot parse tap address {text!r}")
        return cls(BlockKind(kind), int(index or 0), int(layer))

    @property
    def rank(self) -> int:
        if self.block_kind is BlockKind.ENCODER:
            block = self.block_index - 1
        elif self.block_kind is BlockKind.BOTTLENECK:
            block = NUM_LEVELS
        else:
            block = 2 * NUM_LEVELS + 1 - self.block_index
        return block * LAYERS_PER_BLOCK + self.layer_index - 1

    @property
    def level(self) -> int:
        """Resolution level: 1..4 for E/D blocks, 5 for the bottleneck."""
        return NUM_LEVELS + 1 if self.block_kind is BlockKind.BOTTLENECK else self.block_index

    @property
    def block(self) -> str:
        idx = "" if self.block_kind is BlockKind.BOTTLENECK else str(self.block_index)
        return f"{self.block_kind.value}{idx}"

    def __lt__(self, other):
        if not isinstance(other, TapAddress):
            return NotImplemented
        return self.rank < other.rank

    def __str__(self):
        return f"{self.block}({self.layer_index})"


def tap_registry() -> list[TapAddress]:
    """All 18 tap addresses in forward order."""
    addrs = []
    for m in range(1, NUM_LEVELS + 1):
        addrs += [TapAddress(BlockKind.ENCODER, m, l) for l in (1, 2)]
    addrs += [TapAddress(BlockKind.BOTTLENECK, 0, l) for l in (1, 2)]
    for m in range(NUM_LEVELS, 0, -1):
        addrs += [TapAddress(BlockKind.DECODER, m, l) for l in (1, 2)]
    return addrs


FINAL_BLOCK = "D1"


@dataclass
class FeatureTap:
    address: TapAddress
    values: torch.Tensor

    @property
    def shape(self):
        return tuple(self.values.shape)


@dataclass
class UNetConfig:
    backbone: str = Backbone.CNN.value
    in_channels: int = 1
    num_classes: int = 2
    base_channels: int = 8
    input_size: tuple[int, int] = (64, 64)
    window_size: int = 4
    depth: int = 5
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        self.validate()

    def validate(self):
        try:
            Backbone(self.backbone)
        except ValueError:
            raise ConfigError(f"unknown backbone {self.backbone!r}") from None
        if self.depth != 5:
            raise ConfigError(f"only depth 5 is supported, got {self.depth}")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.base_channels < 4 or self.base_channels % 2:
            raise ConfigError("base_channels must be even and >= 4")
        if len(self.input_size) != 2:
            raise ConfigError("input_size must be (H, W)")
        for side in self.input_size:
            if side < 16 or side % 16:
                raise ConfigError(f"input side {side} is not divisible by 16")
        if self.backbone == Backbone.ATTENTION.value:
            if self.window_size < 1:
                raise ConfigError("window_size must be >= 1")
            for side in self.input_size:
                for j in range(NUM_LEVELS + 1):
                    if (side >> j) % self.window_size:
                        raise ConfigError(
                            f"window_size {self.window_size} does not divide feature side {side >> j}"
                        )

    @property
    def is_attention(self) -> bool:
        return self.backbone == Backbone.ATTENTION.value

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> UNetConfig:
        return cls(**d)


def tap_shapes(config: UNetConfig) -> dict[TapAddress, tuple[int, int, int]]:
    """``(C, H, W)`` of every tap for ``config``, in registry order."""
    config.validate()
    h, w = config.input_size
    shapes = {}
    for addr in tap_registry():
        scale = 2 ** (addr.level - 1)
        shapes[addr] = (config.channels(addr.level), h // scale, w // scale)
    return shapes


# ---------------------------------------------------------------- layers


def _num_groups(channels):
    return 4 if channels % 4 == 0 else 2


class ConvLayer(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(_num_groups(out_ch), out_ch),
            nn.ReLU(),
        )


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping square windows."""

    def __init__(self, dim, num_heads, window_size):
        super().__init__()
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        ws = window_size
        self.relative_position_bias = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, num_heads))
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
        self.register_buffer("relative_index", rel[..., 0] * (2 * ws - 1) + rel[..., 1], persistent=False)

    def forward(self, x):
        # x: (B, H, W, C)
        b, h, w, c = x.shape
        ws = self.window_size
        windows = (
            x.view(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)
        )
        n = windows.shape[1]
        qkv = self.qkv(windows).reshape(-1, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias[self.relative_index.reshape(-1)].reshape(n, n, -1)
        attn = (attn + bias.permute(2, 0, 1).unsqueeze(0)).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, n, c)
        out = self.proj(out)
        return out.view(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


class TransformerLayer(nn.Module):
    def __init__(self, dim, num_heads, window_size, mlp_ratio=2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim), nn.GELU(), nn.Linear(mlp_ratio * dim, dim))

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x.permute(0, 3, 1, 2)


class PatchMerging(nn.Module):
    """2x2 neighbourhood -> one token, channels ``in_ch`` -> ``out_ch``."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.norm = nn.LayerNorm(4 * in_ch)
        self.reduction = nn.Linear(4 * in_ch, out_ch, bias=False)

    def forward(self, x):
        x = F.pixel_unshuffle(x, 2).permute(0, 2, 3, 1)
        return self.reduction(self.norm(x)).permute(0, 3, 1, 2)


class PatchExpanding(nn.Module):
    """One token -> 2x2 tokens, channels ``in_ch`` -> ``out_ch``."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.expand = nn.Linear(in_ch, 4 * out_ch, bias=False)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x):
        x = self.expand(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)
        x = F.pixel_shuffle(x, 2).permute(0, 2, 3, 1)
        return self.norm(x).permute(0, 3, 1, 2)


class Pointwise(nn.Module):
    """Per-position linear map on (B, C, H, W) tensors."""

    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.linear = nn.Linear(in_ch, out_ch)

    def forward(self, x):
        return self.linear(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class Block(nn.Module):
    """``pre`` (down/up-sampling, skip fusion) followed by two tapped layers."""

    def __init__(self, pre, layers, fuse=None):
        super().__init__()
        self.pre = pre if pre is not None else nn.Identity()
        self.fuse = fuse if fuse is not None else nn.Identity()
        self.layers = nn.ModuleList(layers)


class UNet(nn.Module):
    """Depth-5 UNet whose forward returns ``(logits, taps)``."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.tap_registry = tap_registry()
        attn = config.is_attention
        base = config.base_channels

        def layer(in_ch, out_ch, level):
            if attn:
                assert in_ch == out_ch
                return TransformerLayer(out_ch, 2 ** (level - 1), config.window_size)
            return ConvLayer(in_ch, out_ch)

        if attn:
            self.input_proj = nn.Conv2d(config.in_channels, base, 1)
        else:
            self.input_proj = nn.Conv2d(config.in_channels, base, 3, padding=1)

        self.encoders = nn.ModuleList()
        for level in range(1, NUM_LEVELS + 2):
            c = config.channels(level)
            if level == 1:
                pre, c_in = None, base
            elif attn:
                pre, c_in = PatchMerging(c // 2, c), c
            else:
                pre, c_in = nn.MaxPool2d(2), c // 2
            self.encoders.append(Block(pre, [layer(c_in, c, level), layer(c, c, level)]))
        self.bottleneck = self.encoders.pop(NUM_LEVELS)

        self.decoders = nn.ModuleList()
        for level in range(NUM_LEVELS, 0, -1):
            c = config.channels(level)
            if attn:
                pre = PatchExpanding(2 * c, c)
                fuse = Pointwise(2 * c, c)
                layers = [layer(c, c, level), layer(c, c, level)]
            else:
                pre = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(2 * c, c, 3, padding=1))
                fuse = None
                layers = [layer(2 * c, c, level), layer(c, c, level)]
            self.decoders.append(Block(pre, layers, fuse))

        self.output_proj = nn.Conv2d(base, config.num_classes, 1)
        init_parameters(self, config.seed)

    def check_input(self, images):
        cfg = self.config
        expected = (cfg.in_channels, *cfg.input_size)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape (B, {', '.join(map(str, expected))}), got {tuple(images.shape)}")

    def forward(self, images, tap_override=None):
        """Run the network.

        ``tap_override`` optionally maps tap addresses to tensors that replace
        the corresponding layer outputs for the rest of the forward pass.
        """
        self.check_input(images)
        override = tap_override or {}
        addrs = iter(self.tap_registry)
        taps = []

        def run_block(block, x):
            for lyr in block.layers:
                addr = next(addrs)
                x = override.get(addr, lyr(x))
                taps.append(FeatureTap(addr, x))
            return x

        x = self.input_proj(images)
        skips = []
        for block in self.encoders:
            x = run_block(block, block.pre(x))
            skips.append(x)
        x = run_block(self.bottleneck, self.bottleneck.pre(x))
        for block, skip in zip(self.decoders, reversed(skips)):
            x = block.fuse(torch.cat([block.pre(x), skip], dim=1))
            x = run_block(block, x)
        return self.output_proj(x), taps


def init_parameters(model: nn.Module, seed: int):
    """Deterministic fan-in scaled initialisation of every parameter."""
    gen = torch.Generator().manual_seed(int(seed))

    def normal(p, std):
        p.copy_(std * torch.randn(p.shape, generator=gen, dtype=torch.float64))

    with torch.no_grad():
        for _, mod in model.named_modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = math.prod(mod.weight.shape[1:])
                gain = 2.0 if isinstance(mod, nn.Conv2d) else 1.0
                normal(mod.weight, math.sqrt(gain / fan_in))
                if mod.bias is not None:
                    mod.bias.zero_()
            elif isinstance(mod, (nn.GroupNorm, nn.LayerNorm)):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
            elif isinstance(mod, WindowAttention):
                normal(mod.relative_position_bias, 0.02)


def build_unet(config: UNetConfig, dtype=torch.float32) -> UNet:
    return UNet(config).to(dtype)


def forward(model: UNet, images) -> tuple[torch.Tensor, list[FeatureTap]]:
    if not torch.is_tensor(images):
        images = torch.as_tensor(np.asarray(images))
    dtype = next(model.parameters()).dtype
    return model(images.to(dtype))


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over every parameter's raw bytes, in name order."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: UNet, path, metadata: dict | None = None):
    """Write config + parameters as one ``.npz`` archive tagged with the format."""
    arrays = {
        "__format__": np.array(CHECKPOINT_FORMAT),
        "__config__": np.array(json.dumps(model.config.to_dict(), sort_keys=True)),
        "__metadata__": np.array(json.dumps(metadata or {}, sort_keys=True)),
    }
    for name, tensor in model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, dtype=None) -> UNet:
    try:
        with np.load(path, allow_pickle=False) as archive:
            tag = str(archive["__format__"]) if "__format__" in archive.files else None
            if tag != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: format tag mismatch (expected {CHECKPOINT_FORMAT!r}, found {tag!r})")
            config = UNetConfig.from_dict(json.loads(str(archive["__config__"])))
            state = {k[len("param/"):]: torch.from_numpy(archive[k].copy()) for k in archive.files if k.startswith("param/")}
    except CheckpointError:
        raise
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint, format tag mismatch (expected {CHECKPOINT_FORMAT!r}): {exc}") from exc
    first = next(iter(state.values()))
    model = build_unet(config, dtype=dtype or first.dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match config: {exc}") from exc
    return model
