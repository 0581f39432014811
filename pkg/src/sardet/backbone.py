"""Hierarchical shifted-window transformer encoder.

Tokens travel between blocks as ``[B, N, C]`` with the grid shape carried
alongside.  Each block applies normalisation *after* its sub-layer, inside
the residual sum (``x + norm(f(x))``).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .tensor import core as F
from .tensor.core import ConfigError, Tensor
from .tensor.nn import Conv2d, LayerNorm, Linear, Module, parameter, trunc_normal

_MASK_NEG = -100.0


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch_size: int = 4
    embed_dim: int = 32
    depths: tuple[int, ...] = (1, 1, 2, 1)
    num_heads: tuple[int, ...] = (1, 2, 4, 8)
    window_size: int = 4
    qkv_bias: bool = True
    in_chans: int = 1
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "num_heads", tuple(self.num_heads))
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError("depths and num_heads must both have 4 entries")
        for s, heads in enumerate(self.num_heads):
            if (self.embed_dim * 2 ** s) % heads:
                raise ConfigError(f"stage {s}: dim {self.embed_dim * 2 ** s} not divisible by {heads} heads")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.grid_size % 8:
            raise ConfigError(f"patch grid {self.grid_size} must halve cleanly three times")
        if self.window_size < 1:
            raise ConfigError("window_size must be positive")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def hidden_size(self) -> int:
        return self.embed_dim * 2 ** 3

    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2 ** s for s in range(4)]

    def stage_sides(self) -> list[int]:
        return [self.grid_size // 2 ** s for s in range(4)]

    @classmethod
    def preset(cls, name: str, image_size: int | None = None) -> "BackboneConfig":
        cfg = PRESETS[name]
        return replace(cfg, image_size=image_size) if image_size is not None else cfg


PRESETS: dict[str, BackboneConfig] = {
    "nano": BackboneConfig(64, 4, 32, (1, 1, 2, 1), (1, 2, 4, 8), 4),
    "tiny": BackboneConfig(512, 4, 96, (2, 2, 6, 2), (3, 6, 12, 24), 7),
    "medium": BackboneConfig(512, 4, 128, (2, 2, 18, 2), (4, 8, 16, 32), 7),
    "large": BackboneConfig(512, 4, 192, (2, 2, 18, 2), (6, 12, 24, 48), 12),
}


@lru_cache(maxsize=None)
def relative_position_index(window: int) -> np.ndarray:
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel.transpose(1, 2, 0) + (window - 1)
    return (rel[..., 0] * (2 * window - 1) + rel[..., 1]).astype(np.intp)


@lru_cache(maxsize=None)
def attention_mask(H: int, W: int, window: int, shift: int) -> np.ndarray | None:
    """Additive mask [nW, N, N] for a grid padded from (H, W) to window multiples.

    Keys on padded tokens are always masked; with a shift, tokens from
    different pre-roll regions cannot attend to each other.
    """
    Hp, Wp = -(-H // window) * window, -(-W // window) * window
    if Hp == H and Wp == W and shift == 0:
        return None
    # region labels live in the rolled frame, where the last `shift` rows/cols wrapped around
    region = np.zeros((Hp, Wp), dtype=np.int64)
    if shift:
        cnt = 0
        for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
                region[hs, ws] = cnt
                cnt += 1
    padded = np.ones((Hp, Wp), dtype=bool)
    padded[:H, :W] = False
    if shift:
        padded = np.roll(padded, (-shift, -shift), axis=(0, 1))
    nh, nw = Hp // window, Wp // window
    region_w = region.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, -1)
    padded_w = padded.reshape(nh, window, nw, window).transpose(0, 2, 1, 3).reshape(nh * nw, -1)
    mask = np.where(region_w[:, :, None] != region_w[:, None, :], _MASK_NEG, 0.0)
    mask = np.where(padded_w[:, None, :], _MASK_NEG, mask)
    return mask.astype(np.float32)


def window_partition(x: Tensor, window: int) -> Tensor:
    """[B, H, W, C] -> [B*nW, window*window, C]."""
    B, H, W, C = x.shape
    x = x.reshape(B, H // window, window, W // window, window, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(-1, window * window, C)


def window_reverse(w: Tensor, window: int, B: int, H: int, W: int) -> Tensor:
    C = w.shape[-1]
    x = w.reshape(B, H // window, W // window, window, window, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)


class WindowAttention(Module):
    def __init__(self, dim: int, window: int, num_heads: int, rng: np.random.Generator, qkv_bias: bool = True):
        self.dim = dim
        self.window = window
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = Linear(dim, 3 * dim, rng, bias=qkv_bias)
        self.proj = Linear(dim, dim, rng)
        self.relative_position_bias_table = parameter(
            trunc_normal(rng, ((2 * window - 1) ** 2, num_heads), 0.02))

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """x: [B_, N, C]; mask: additive [nW, N, N] with B_ a multiple of nW."""
        Bw, N, C = x.shape
        h = self.num_heads
        qkv = self.qkv(x).reshape(Bw, N, 3, h, C // h).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0] * self.scale, qkv[1], qkv[2]
        attn = F.matmul(q, k.transpose(0, 1, 3, 2))
        idx = relative_position_index(self.window).reshape(-1)
        bias = F.take(self.relative_position_bias_table, idx, axis=0).reshape(N, N, h).transpose(2, 0, 1)
        attn = attn + F.broadcast_to(bias.reshape(1, h, N, N), attn.shape)
        if mask is not None:
            nW = mask.shape[0]
            full = np.broadcast_to(mask[None, :, None].astype(attn.dtype), (Bw // nW, nW, h, N, N))
            attn = attn + Tensor(full.reshape(Bw, h, N, N))
        attn = F.softmax(attn, axis=-1)
        out = F.matmul(attn, v).transpose(0, 2, 1, 3).reshape(Bw, N, C)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(Module):
    def __init__(self, dim: int, num_heads: int, window: int, shifted: bool,
                 rng: np.random.Generator, qkv_bias: bool = True, mlp_ratio: float = 4.0):
        self.dim = dim
        self.window = window
        self.shifted = shifted
        self.attn = WindowAttention(dim, window, num_heads, rng, qkv_bias)
        self.norm1 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)
        self.norm2 = LayerNorm(dim)

    def shift_for(self, H: int, W: int) -> int:
        # a single window has nothing to exchange with, so shifting is skipped
        if not self.shifted or max(H, W) <= self.window:
            return 0
        return self.window // 2

    def _attend(self, x: Tensor, H: int, W: int) -> Tensor:
        B, _, C = x.shape
        w = self.window
        shift = self.shift_for(H, W)
        grid = x.reshape(B, H, W, C)
        Hp, Wp = -(-H // w) * w, -(-W // w) * w
        if Hp != H or Wp != W:
            grid = F.pad(grid, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0)))
        if shift:
            grid = F.roll(grid, (-shift, -shift), (1, 2))
        windows = window_partition(grid, w)
        out = self.attn(windows, attention_mask(H, W, w, shift))
        grid = window_reverse(out, w, B, Hp, Wp)
        if shift:
            grid = F.roll(grid, (shift, shift), (1, 2))
        if Hp != H or Wp != W:
            grid = grid[:, :H, :W, :]
        return grid.reshape(B, H * W, C)

    def forward(self, x: Tensor, H: int, W: int) -> Tensor:
        x = x + self.norm1(self._attend(x, H, W))
        return x + self.norm2(self.mlp(x))


class PatchMerging(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.reduction = Linear(4 * dim, 2 * dim, rng, bias=False)
        self.norm = LayerNorm(2 * dim)

    def forward(self, x: Tensor, H: int, W: int) -> tuple[Tensor, int, int]:
        if H % 2 or W % 2:
            raise ConfigError(f"patch merging needs an even token grid, got {H}x{W}")
        B, _, C = x.shape
        # concatenation order (h0w0, h1w0, h0w1, h1w1)
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 4, 2, 5).reshape(B, H // 2, W // 2, 4 * C)
        x = self.norm(self.reduction(x))
        return x.reshape(B, (H // 2) * (W // 2), 2 * C), H // 2, W // 2


class PatchEmbed(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.patch_size = cfg.patch_size
        self.proj = Conv2d(cfg.in_chans, cfg.embed_dim, cfg.patch_size, rng, stride=cfg.patch_size)
        self.norm = LayerNorm(cfg.embed_dim)

    def forward(self, chip: Tensor) -> Tensor:
        B, _, H, W = chip.shape
        p = self.patch_size
        if H % p or W % p:
            raise ConfigError(f"chip {H}x{W} not divisible by patch size {p}")
        x = self.proj(chip)
        x = x.transpose(0, 2, 3, 1).reshape(B, (H // p) * (W // p), x.shape[1])
        return self.norm(x)


@dataclass
class FeaturePyramid:
    features: list[Tensor] = field(default_factory=list)
    sides: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)

    def grid(self, s: int) -> Tensor:
        """Stage ``s`` as [B, C, h, w]."""
        x = self.features[s]
        h, w = self.sides[s]
        return x.reshape(x.shape[0], h, w, x.shape[-1]).transpose(0, 3, 1, 2)


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.mask_token = parameter(trunc_normal(rng, (cfg.embed_dim,), 0.02))
        dims = cfg.stage_dims()
        self.merges = [PatchMerging(dims[s - 1], rng) for s in range(1, 4)]
        self.stages = [
            [SwinBlock(dims[s], cfg.num_heads[s], cfg.window_size, shifted=(i % 2 == 1),
                       rng=rng, qkv_bias=cfg.qkv_bias, mlp_ratio=cfg.mlp_ratio)
             for i in range(cfg.depths[s])]
            for s in range(4)
        ]

    def forward(self, chip: Tensor, mask: np.ndarray | None = None) -> FeaturePyramid:
        """chip: [B, 1, H, W]; mask: optional boolean [B, H/p, W/p] of patches to hide."""
        B, _, H, W = chip.shape
        p = self.cfg.patch_size
        x = self.patch_embed(chip)
        h, w = H // p, W // p
        if mask is not None:
            m = np.asarray(mask, dtype=x.dtype).reshape(B, h * w, 1)
            keep = Tensor(np.broadcast_to(1.0 - m, x.shape))
            token = F.broadcast_to(self.mask_token.reshape(1, 1, -1), x.shape)
            x = x * keep + token * Tensor(np.broadcast_to(m, x.shape))
        pyramid = FeaturePyramid()
        for s in range(4):
            if s > 0:
                x, h, w = self.merges[s - 1](x, h, w)
            for block in self.stages[s]:
                x = block(x, h, w)
            pyramid.features.append(x)
            pyramid.sides.append((h, w))
        return pyramid
