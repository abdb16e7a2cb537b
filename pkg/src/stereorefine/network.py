"""Residual Unet refiner with its loss, optimizer step, and checkpoints.

The net regresses a height correction from a stack of normalized DEM and
warped image channels; a long residual connection adds the DEM channel back
to the head output, so a zero-initialized head starts as the identity on
heights. Encoder levels are conv3x3-BN-ReLU followed by 2x2 max pooling;
decoder levels are a stride-2 up-convolution, skip concatenation, and one
fusing conv block; the head is a plain 3x3 conv. The checkpoint container
is a small self-describing binary format, not a pickle.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .raster import NormalizationStats
from .warping import Variant

CHECKPOINT_MAGIC = b"SRDPNET1"


def default_widths(levels: int) -> tuple[int, ...]:
    """Standard doubling-then-capping channel progression (cap 512)."""
    return tuple(min(64 * 2**i, 512) for i in range(levels))


@dataclass(frozen=True)
class UnetConfig:
    """Architecture hyperparameters; the bottleneck is always 4x4 spatial."""

    in_channels: int
    levels: int = 5
    channel_widths: tuple[int, ...] = (64, 128, 256, 512, 512)
    patch_size: int = 128
    residual: bool = True

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.levels < 1:
            raise ValueError("in_channels and levels must be positive")
        if len(self.channel_widths) != self.levels:
            raise ValueError("need one channel width per level")
        if any(w < 1 for w in self.channel_widths):
            raise ValueError("channel widths must be positive")
        if self.patch_size != 4 * 2**self.levels:
            raise ValueError(
                f"patch_size must be 4 * 2**levels = {4 * 2 ** self.levels}"
            )
        object.__setattr__(self, "channel_widths", tuple(self.channel_widths))

    @classmethod
    def for_variant(cls, variant: Variant, levels: int = 5) -> "UnetConfig":
        return cls(
            in_channels=variant.in_channels,
            levels=levels,
            channel_widths=default_widths(levels),
            patch_size=4 * 2**levels,
            residual=variant.residual,
        )


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    # replicate padding keeps constant rasters constant through every layer,
    # which is what makes tiled inference seam-free
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="replicate"),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class Unet(nn.Module):
    """Encoder-decoder with exhaustive skips and an optional DEM residual."""

    def __init__(self, cfg: UnetConfig) -> None:
        super().__init__()
        self.cfg = cfg
        widths = cfg.channel_widths
        blocks = []
        c_in = cfg.in_channels
        for w in widths:
            blocks.append(_conv_block(c_in, w))
            c_in = w
        self.encoder = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2)
        ups, fuses = [], []
        prev = widths[-1]
        for w in reversed(widths):
            # nearest upsample + 2x2 conv doubles resolution while mapping
            # constant inputs to constant outputs, unlike a transposed conv
            ups.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(prev, w, 2, padding="same", padding_mode="replicate"),
                )
            )
            fuses.append(_conv_block(2 * w, w))
            prev = w
        self.ups = nn.ModuleList(ups)
        self.fuses = nn.ModuleList(fuses)
        self.head = nn.Conv2d(widths[0], 1, 3, padding=1, padding_mode="replicate")
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        # zero head: a residual net starts as the identity on heights
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        if stack.dim() != 4 or stack.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected Bx{self.cfg.in_channels}xPxP input, got {tuple(stack.shape)}"
            )
        p = self.cfg.patch_size
        if stack.shape[2] != p or stack.shape[3] != p:
            raise ValueError(f"expected {p}x{p} patches, got {tuple(stack.shape[2:])}")
        return self._run(stack)

    def run_raster(self, stack: torch.Tensor) -> torch.Tensor:
        """Whole-raster forward pass; sides must be multiples of 2**levels.

        Training goes through ``forward``'s strict patch-size check; this is
        the fully convolutional entry point for inference on larger rasters.
        """
        if stack.dim() != 4 or stack.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected Bx{self.cfg.in_channels}xHxW input, got {tuple(stack.shape)}"
            )
        stride = 2**self.cfg.levels
        h, w = stack.shape[2], stack.shape[3]
        if h % stride or w % stride or h < stride or w < stride:
            raise ValueError(f"raster sides must be multiples of {stride}, got {(h, w)}")
        return self._run(stack)

    def _run(self, stack: torch.Tensor) -> torch.Tensor:
        x = stack
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        for up, fuse, skip in zip(self.ups, self.fuses, reversed(skips)):
            x = up(x)
            x = fuse(torch.cat([x, skip], dim=1))
        out = self.head(x)
        if self.cfg.residual:
            out = out + stack[:, :1]
        return out


def param_count(cfg: UnetConfig) -> int:
    """Closed-form parameter total (convs with bias, affine batch norm)."""
    total = 0
    c_in = cfg.in_channels
    for w in cfg.channel_widths:
        total += w * c_in * 9 + w + 2 * w
        c_in = w
    prev = cfg.channel_widths[-1]
    for w in reversed(cfg.channel_widths):
        total += w * prev * 4 + w  # up-convolution, 2x2 kernel
        total += w * (2 * w) * 9 + w + 2 * w  # fusing conv after skip concat
        prev = w
    total += cfg.channel_widths[0] * 9 + 1  # head
    return total


def l1_loss(
    pred: torch.Tensor, target: torch.Tensor, valid_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean absolute error over valid cells (zero when nothing is valid)."""
    diff = (pred - target).abs()
    if valid_mask is None:
        return diff.mean()
    mask = valid_mask.to(diff.dtype)
    total = mask.sum()
    if total.item() == 0:
        return diff.sum() * 0.0
    return (diff * mask).sum() / total


@dataclass
class AdamState:
    """First/second moment estimates, keyed like the parameter dict."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: "OrderedDict[str, torch.Tensor]",
    grads: dict,
    state: AdamState | None,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update in place; weight decay is an additive L2 term.

    Bias-corrected moments, epsilon added outside the square root.
    """
    if state is None:
        state = AdamState()
    if not state.m:
        for k, p in params.items():
            state.m[k] = torch.zeros_like(p)
            state.v[k] = torch.zeros_like(p)
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            if g is None:
                continue
            if weight_decay:
                g = g + weight_decay * p
            m = state.m[k].mul_(b1).add_(g, alpha=1.0 - b1)
            v = state.v[k].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / bc2).sqrt().add_(eps)
            p.sub_((m / bc1) / denom, alpha=lr)
    return state


@dataclass
class Checkpoint:
    """Everything needed to reload and run a trained refiner."""

    config: UnetConfig
    variant: Variant
    state: "OrderedDict[str, torch.Tensor]"
    stats: NormalizationStats
    extra: dict


def save_checkpoint(
    path,
    model,
    cfg: UnetConfig,
    variant: Variant,
    stats: NormalizationStats,
    extra: dict | None = None,
) -> None:
    """Write the versioned binary container (magic, JSON record, tensors).

    Layout: 8-byte magic; u32 record length + JSON record (config, variant,
    normalization stats, extra); u32 tensor count; then per tensor a u16
    name length + name, u8 ndim, u32 dims, and little-endian float32 data.
    Integer buffers (num_batches_tracked) are cast to float32 and restored
    on load.
    """
    record = {
        "format_version": 1,
        "config": {
            "in_channels": cfg.in_channels,
            "levels": cfg.levels,
            "channel_widths": list(cfg.channel_widths),
            "patch_size": cfg.patch_size,
            "residual": cfg.residual,
        },
        "variant": variant.value,
        "stats": {
            "mean_height": stats.mean_height,
            "std_height": stats.std_height,
            "mode": stats.mode,
            "baseline": stats.baseline,
        },
        "extra": extra or {},
    }
    blob = json.dumps(record, sort_keys=True).encode("utf-8")
    state = model.state_dict() if isinstance(model, nn.Module) else model
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            # astype(order="C") keeps 0-dim buffers 0-dim, unlike ascontiguousarray
            arr = tensor.detach().cpu().numpy().astype("<f4", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            if arr.ndim:
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated checkpoint file")
    return data


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError("not a refiner checkpoint (bad magic)")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4))
        record = json.loads(_read_exact(f, blob_len).decode("utf-8"))
        cfg_rec = dict(record["config"])
        cfg_rec["channel_widths"] = tuple(cfg_rec["channel_widths"])
        cfg = UnetConfig(**cfg_rec)
        variant = Variant(record["variant"])
        stats = NormalizationStats(**record["stats"])
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(f, 1))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim)) if ndim else ()
            numel = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            arr = np.frombuffer(_read_exact(f, 4 * numel), dtype="<f4").reshape(shape)
            tensor = torch.from_numpy(arr.astype(np.float32, copy=True))
            if name.endswith("num_batches_tracked"):
                tensor = tensor.to(torch.long)
            state[name] = tensor
    return Checkpoint(cfg, variant, state, stats, record.get("extra", {}))
