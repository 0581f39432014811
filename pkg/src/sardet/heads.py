"""Lightweight conv + pixel-shuffle heads on top of the last backbone stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BackboneConfig, FeaturePyramid
from .tensor import core as F
from .tensor.core import ConfigError, ShapeError, Tensor
from .tensor.nn import Conv2d, Module


@dataclass(frozen=True)
class HeadConfig:
    in_channels: int
    upsample_factor: int
    conv_channels: tuple[int, ...] = (64, 16)
    out_channels: int = 1
    skip_channels: int = 0
    patch_size: int = 4

    def __post_init__(self):
        f = self.upsample_factor
        if f < 2 or f & (f - 1):
            raise ConfigError(f"upsample factor {f} must be a power of two >= 2")
        if len(self.conv_channels) != 2:
            raise ConfigError("conv_channels needs one entry per upsampling stage (2)")

    @property
    def stage_factors(self) -> tuple[int, int]:
        if self.skip_channels:
            # first shuffle lands on the stage-1 grid, the second undoes the patch embedding
            return self.upsample_factor // self.patch_size, self.patch_size
        k = int(np.log2(self.upsample_factor))
        return 2 ** (k // 2), 2 ** (k - k // 2)

    @classmethod
    def for_backbone(cls, cfg: BackboneConfig, skip: bool = False, **kw) -> "HeadConfig":
        return cls(in_channels=cfg.hidden_size, upsample_factor=cfg.patch_size * 8,
                   skip_channels=cfg.embed_dim if skip else 0, patch_size=cfg.patch_size, **kw)


class _ShuffleStage(Module):
    def __init__(self, in_ch: int, hidden: int, out_ch: int, r: int, rng: np.random.Generator,
                 out_gain: float = 1.0):
        self.conv = Conv2d(in_ch, hidden, 3, rng, padding=1)
        self.expand = Conv2d(hidden, out_ch * r * r, 1, rng, gain=out_gain)
        self.r = r

    def forward(self, x: Tensor) -> Tensor:
        return F.pixel_shuffle(self.expand(F.gelu(self.conv(x))), self.r)


class ShuffleHead(Module):
    """Two stages of conv3x3 -> GELU -> conv1x1 -> pixel_shuffle.

    With ``skip_channels`` set, the first stage upsamples the last backbone
    stage to the stage-1 grid, where a 1x1 projection of the stage-1
    features is added before the final shuffle.
    """

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator, out_gain: float = 0.1):
        self.cfg = cfg
        r1, r2 = cfg.stage_factors
        c1, c2 = cfg.conv_channels
        self.up1 = _ShuffleStage(cfg.in_channels, c1, c2, r1, rng)
        self.up2 = _ShuffleStage(c2, c2, cfg.out_channels, r2, rng, out_gain=out_gain)
        self.skip = Conv2d(cfg.skip_channels, c2, 1, rng) if cfg.skip_channels else None

    def forward(self, feats: FeaturePyramid | Tensor) -> Tensor:
        x = feats.grid(len(feats) - 1) if isinstance(feats, FeaturePyramid) else feats
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"head expects {self.cfg.in_channels} channels, got {x.shape}")
        x = self.up1(x)
        if self.skip is not None:
            if not isinstance(feats, FeaturePyramid):
                raise ShapeError("a head with a skip connection needs the full feature pyramid")
            x = x + self.skip(feats.grid(0))
        return self.up2(x)


class MIMHead(ShuffleHead):
    """Reconstructs the normalised chip."""


class DetectionHead(ShuffleHead):
    """Emits per-pixel logits; ``prior`` sets the initial foreground probability."""

    def __init__(self, cfg: HeadConfig, rng: np.random.Generator, prior: float = 0.01):
        super().__init__(cfg, rng)
        self.up2.expand.bias.data[:] = np.log(prior / (1.0 - prior))


def check_output_size(out: Tensor, chip_size: int) -> None:
    if out.shape[-2:] != (chip_size, chip_size):
        raise ShapeError(f"head output {out.shape[-2:]} does not match chip size {chip_size}")
