"""Chip extraction, intensity normalisation, augmentation and target encoding."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .synth import U16_MAX, Scene
from .tensor.core import ConfigError

NORMALIZATION_MODES = ("log", "linear", "arctan")


class SamplingError(RuntimeError):
    pass


# -- normalisation ---------------------------------------------------------------
def scale_intensity(raw: np.ndarray, mode: str = "log", s_norm: float = 16.0,
                    arctan_scale: float = 1024.0) -> np.ndarray:
    """Map raw 16-bit intensities into the pre-centring space."""
    raw = np.asarray(raw, dtype=np.float64)
    if mode == "log":
        return np.log2(np.maximum(raw, 1.0)) / s_norm
    if mode == "linear":
        return raw / U16_MAX
    if mode == "arctan":
        return (2.0 / np.pi) * np.arctan(raw / arctan_scale)
    raise ConfigError(f"unknown normalisation mode {mode!r}; choose from {NORMALIZATION_MODES}")


def normalize(raw: np.ndarray, mode: str = "log", s_norm: float = 16.0, sigma_g: float = 1.0,
              valid_mask: np.ndarray | None = None, arctan_scale: float = 1024.0) -> np.ndarray:
    """Scale, subtract the chip mean, divide by the global standard deviation.

    With a ``valid_mask`` the mean is taken over valid pixels and invalid
    pixels are set to zero afterwards.
    """
    if not sigma_g > 0:
        raise ConfigError(f"sigma_g must be positive, got {sigma_g}")
    x = scale_intensity(raw, mode, s_norm, arctan_scale)
    if valid_mask is not None and valid_mask.any():
        mu = x[valid_mask].mean()
        out = np.where(valid_mask, (x - mu) / sigma_g, 0.0)
    else:
        out = (x - x.mean()) / sigma_g
    return out.astype(np.float32)


def global_sigma(scenes: list[Scene], mode: str = "log", s_norm: float = 16.0,
                 arctan_scale: float = 1024.0) -> float:
    """Standard deviation of the scaled intensities over all valid training pixels."""
    total = total_sq = 0.0
    n = 0
    for sc in scenes:
        x = scale_intensity(sc.pixels[sc.valid_mask], mode, s_norm, arctan_scale)
        total += x.sum()
        total_sq += (x * x).sum()
        n += x.size
    if n == 0:
        raise ConfigError("no valid pixels to estimate sigma_g from")
    var = total_sq / n - (total / n) ** 2
    return float(np.sqrt(max(var, 0.0)))


@dataclass(frozen=True)
class NormSpec:
    """Everything needed to normalise a chip the same way at train and test time."""
    mode: str = "log"
    s_norm: float = 16.0
    sigma_g: float = 1.0
    arctan_scale: float = 1024.0

    def __post_init__(self):
        if self.mode not in NORMALIZATION_MODES:
            raise ConfigError(f"unknown normalisation mode {self.mode!r}; choose from {NORMALIZATION_MODES}")
        if not self.sigma_g > 0:
            raise ConfigError(f"sigma_g must be positive, got {self.sigma_g}")

    def __call__(self, raw: np.ndarray, valid_mask: np.ndarray | None = None) -> np.ndarray:
        return normalize(raw, self.mode, self.s_norm, self.sigma_g, valid_mask, self.arctan_scale)

    @classmethod
    def fit(cls, scenes: list[Scene], mode: str = "log", s_norm: float = 16.0,
            arctan_scale: float = 1024.0) -> "NormSpec":
        return cls(mode, s_norm, global_sigma(scenes, mode, s_norm, arctan_scale), arctan_scale)


# -- chips ------------------------------------------------------------------------
@dataclass
class Chip:
    raw: np.ndarray
    valid_mask: np.ndarray
    targets: list[tuple[int, int]]
    origin: tuple[int, tuple[int, int]] = (0, (0, 0))
    image: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.raw.shape[0]

    @property
    def class_label(self) -> str:
        return "fg" if self.targets else "bg"

    def normalized(self, mode: str = "log", s_norm: float = 16.0, sigma_g: float = 1.0,
                   arctan_scale: float = 1024.0) -> "Chip":
        img = normalize(self.raw, mode, s_norm, sigma_g, self.valid_mask, arctan_scale)
        return replace(self, image=img)


def crop_chip(scene: Scene, x0: int, y0: int, size: int, scene_id: int = 0) -> Chip:
    raw = scene.pixels[y0:y0 + size, x0:x0 + size]
    mask = scene.valid_mask[y0:y0 + size, x0:x0 + size]
    targets = [(x - x0, y - y0) for x, y in scene.targets if x0 <= x < x0 + size and y0 <= y < y0 + size]
    return Chip(raw.copy(), mask.copy(), targets, (scene_id, (x0, y0)))


def sample_train_chip(scene: Scene, class_wanted: str, size: int, rng: np.random.Generator,
                      scene_id: int = 0, max_retries: int = 64) -> Chip:
    """Random training crop of the requested class ('fg' or 'bg')."""
    H, W = scene.shape
    if H < size or W < size:
        raise SamplingError(f"scene {W}x{H} smaller than chip size {size}")
    if class_wanted == "fg":
        usable = [(x, y) for x, y in scene.targets if scene.valid_mask[y, x]]
        if not usable:
            raise SamplingError("no target on a valid pixel; cannot draw a foreground chip")
        tx, ty = usable[int(rng.integers(len(usable)))]
        j = size // 4
        cx = tx + int(rng.integers(-j, j + 1))
        cy = ty + int(rng.integers(-j, j + 1))
        x0 = int(np.clip(cx - size // 2, 0, W - size))
        y0 = int(np.clip(cy - size // 2, 0, H - size))
        return crop_chip(scene, x0, y0, size, scene_id)
    if class_wanted == "bg":
        pts = np.array(scene.targets, dtype=np.int64).reshape(-1, 2)
        for _ in range(max_retries):
            x0 = int(rng.integers(0, W - size + 1))
            y0 = int(rng.integers(0, H - size + 1))
            inside = ((pts[:, 0] >= x0) & (pts[:, 0] < x0 + size)
                      & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + size))
            if not inside.any():
                return crop_chip(scene, x0, y0, size, scene_id)
        raise SamplingError(f"no target-free chip found after {max_retries} tries")
    raise ValueError(f"class_wanted must be 'fg' or 'bg', got {class_wanted!r}")


def grid_positions(extent: int, size: int, stride: int) -> list[int]:
    if extent < size:
        raise SamplingError(f"scene extent {extent} smaller than chip size {size}")
    pos = list(range(0, extent - size + 1, stride))
    if pos[-1] != extent - size:
        pos.append(extent - size)
    return pos


def _ownership(pos: list[int], size: int, extent: int) -> list[tuple[int, int]]:
    """Split [0, extent) among chips at midpoints between neighbouring centres."""
    bounds = [0]
    for a, b in zip(pos[:-1], pos[1:]):
        bounds.append((a + b) // 2 + size // 2)
    bounds.append(extent)
    return list(zip(bounds[:-1], bounds[1:]))


@dataclass(frozen=True)
class CropWindow:
    """Scene-coordinate region whose predictions a chip owns: [x0, x1) x [y0, y1)."""
    x0: int
    y0: int
    x1: int
    y1: int

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1


def eval_grid(scene: Scene, size: int = 64, stride: int = 32, crop: int = 32,
              scene_id: int = 0) -> list[tuple[Chip, CropWindow]]:
    """Overlapping evaluation chips and the region each one is trusted for.

    Interior chips own (a subset of) their central ``crop`` window; chips on
    the scene border also own the margin out to the edge, so the windows
    partition the scene.
    """
    if not stride <= crop <= size:
        raise ConfigError(f"need stride <= crop <= size, got {stride}, {crop}, {size}")
    H, W = scene.shape
    xs, ys = grid_positions(W, size, stride), grid_positions(H, size, stride)
    own_x, own_y = _ownership(xs, size, W), _ownership(ys, size, H)
    out = []
    for y0, (oy0, oy1) in zip(ys, own_y):
        for x0, (ox0, ox1) in zip(xs, own_x):
            out.append((crop_chip(scene, x0, y0, size, scene_id), CropWindow(ox0, oy0, ox1, oy1)))
    return out


def chip_class_counts(scenes: list[Scene], size: int) -> tuple[int, int]:
    """(foreground, background) counts over the non-overlapping chip grid of each scene."""
    fg = bg = 0
    for sc in scenes:
        H, W = sc.shape
        occupied = set((x // size, y // size) for x, y in sc.targets)
        n = (H // size) * (W // size)
        k = sum(1 for cx, cy in occupied if cx < W // size and cy < H // size)
        fg += k
        bg += n - k
    return fg, bg


# -- augmentation -------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentFlags:
    hflip: bool = True
    vflip: bool = True
    rot90: bool = True
    affine: bool = False
    max_angle: float = 15.0
    brightness: float = 0.0
    contrast: float = 0.0
    gamma: float = 0.0


@dataclass(frozen=True)
class AugmentParams:
    """A concrete draw of augmentation parameters (identity by default)."""
    hflip: bool = False
    vflip: bool = False
    k90: int = 0
    angle: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0
    gamma: float = 1.0


def draw_params(rng: np.random.Generator, flags: AugmentFlags) -> AugmentParams:
    return AugmentParams(
        hflip=bool(flags.hflip and rng.random() < 0.5),
        vflip=bool(flags.vflip and rng.random() < 0.5),
        k90=int(rng.integers(4)) if flags.rot90 else 0,
        angle=float(rng.uniform(-flags.max_angle, flags.max_angle)) if flags.affine else 0.0,
        brightness=float(rng.uniform(-flags.brightness, flags.brightness)) if flags.brightness else 0.0,
        contrast=float(np.exp2(rng.uniform(-flags.contrast, flags.contrast))) if flags.contrast else 1.0,
        gamma=float(np.exp2(rng.uniform(-flags.gamma, flags.gamma))) if flags.gamma else 1.0,
    )


def _radiometric(raw: np.ndarray, valid: np.ndarray, p: AugmentParams) -> np.ndarray:
    if p.gamma == 1.0 and p.contrast == 1.0 and p.brightness == 0.0:
        return raw
    v = raw.astype(np.float64)
    if p.gamma != 1.0:
        v = U16_MAX * (v / U16_MAX) ** p.gamma
    if p.contrast != 1.0 or p.brightness != 0.0:
        # contrast and brightness act in log2 intensity around the chip's mean level
        lg = np.log2(np.maximum(v, 1.0))
        mu = lg[valid].mean() if valid.any() else lg.mean()
        v = np.exp2(mu + p.contrast * (lg - mu) + p.brightness)
    out = np.clip(np.rint(v), 0, U16_MAX).astype(np.uint16)
    out[~valid] = 0
    return out


def apply_augment(chip: Chip, p: AugmentParams) -> Chip:
    raw, mask = chip.raw, chip.valid_mask
    img = chip.image
    L = chip.size
    pts = list(chip.targets)

    def geo(fn):
        nonlocal raw, mask, img
        raw, mask = fn(raw), fn(mask)
        if img is not None:
            img = fn(img)

    if p.hflip:
        geo(lambda a: a[:, ::-1])
        pts = [(L - 1 - x, y) for x, y in pts]
    if p.vflip:
        geo(lambda a: a[::-1, :])
        pts = [(x, L - 1 - y) for x, y in pts]
    for _ in range(p.k90 % 4):
        # np.rot90 sends pixel (x, y) to (y, L-1-x)
        geo(np.rot90)
        pts = [(y, L - 1 - x) for x, y in pts]
    if p.angle:
        raw, mask, img, pts = _rotate(raw, mask, img, pts, p.angle)
    raw = _radiometric(np.ascontiguousarray(raw), np.ascontiguousarray(mask), p)
    if img is not None:
        img = np.ascontiguousarray(img)
    return Chip(np.ascontiguousarray(raw), np.ascontiguousarray(mask), pts, chip.origin, img)


def _rotate(raw, mask, img, pts, angle_deg):
    """Nearest-neighbour rotation about the chip centre; targets are rounded and
    those leaving the chip are dropped."""
    L = raw.shape[0]
    c = (L - 1) / 2.0
    th = np.deg2rad(angle_deg)
    cos, sin = np.cos(th), np.sin(th)
    yy, xx = np.mgrid[0:L, 0:L]
    # inverse map output pixel -> source pixel
    sx = np.rint(cos * (xx - c) + sin * (yy - c) + c).astype(np.int64)
    sy = np.rint(-sin * (xx - c) + cos * (yy - c) + c).astype(np.int64)
    inside = (sx >= 0) & (sx < L) & (sy >= 0) & (sy < L)
    sxc, syc = np.clip(sx, 0, L - 1), np.clip(sy, 0, L - 1)
    new_raw = np.where(inside, raw[syc, sxc], 0).astype(raw.dtype)
    new_mask = inside & mask[syc, sxc]
    new_img = None if img is None else np.where(new_mask, img[syc, sxc], 0).astype(img.dtype)
    new_pts = []
    for x, y in pts:
        nx = int(round(cos * (x - c) - sin * (y - c) + c))
        ny = int(round(sin * (x - c) + cos * (y - c) + c))
        if 0 <= nx < L and 0 <= ny < L:
            new_pts.append((nx, ny))
    return new_raw, new_mask, new_img, new_pts


def augment(chip: Chip, rng: np.random.Generator, flags: AugmentFlags = AugmentFlags()) -> Chip:
    return apply_augment(chip, draw_params(rng, flags))


# -- targets -------------------------------------------------------------------------
@dataclass
class TargetMap:
    heatmap: np.ndarray
    valid_mask: np.ndarray
    fg_pixel_count: int
    bg_pixel_count: int


def gaussian_heatmap(shape: tuple[int, int], points, sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Max-combined truncated Gaussian blobs, peak value 1 at each point."""
    if not sigma > 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    H, W = shape
    y = np.zeros(shape, dtype=np.float32)
    rad = truncate * sigma
    r = int(np.floor(rad))
    for px, py in points:
        x0, x1 = max(0, int(np.floor(px)) - r), min(W, int(np.floor(px)) + r + 2)
        y0, y1 = max(0, int(np.floor(py)) - r), min(H, int(np.floor(py)) + r + 2)
        if x0 >= x1 or y0 >= y1:
            continue
        gy, gx = np.mgrid[y0:y1, x0:x1]
        d2 = (gx - px) ** 2 + (gy - py) ** 2
        blob = np.where(d2 <= rad * rad, np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
        np.maximum(y[y0:y1, x0:x1], blob.astype(np.float32), out=y[y0:y1, x0:x1])
    return y


def encode_targets(chip: Chip, sigma: float = 10.0, truncate: float = 3.0) -> TargetMap:
    y = gaussian_heatmap(chip.raw.shape, chip.targets, sigma, truncate)
    valid = chip.valid_mask
    y[~valid] = 0.0
    fg = int(((y > 0.5) & valid).sum())
    return TargetMap(y, valid.copy(), fg, int(valid.sum()) - fg)


# -- masked image modelling ------------------------------------------------------
@dataclass
class MaskPlan:
    mask: np.ndarray
    block_size: int
    mask_ratio: float

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())

    def pixel_mask(self, patch_size: int) -> np.ndarray:
        return np.kron(self.mask, np.ones((patch_size, patch_size), dtype=bool)).astype(bool)


def plan_mask(grid: int, block_size: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Hide random disjoint block_size x block_size patch blocks until ``ratio`` is reached."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    if block_size < 1 or grid < 1:
        raise ConfigError("grid and block size must be positive")
    nb = -(-grid // block_size)
    order = rng.permutation(nb * nb)
    mask = np.zeros((grid, grid), dtype=bool)
    target = ratio * grid * grid
    count = 0
    for k in order:
        if count >= target:
            break
        by, bx = divmod(int(k), nb)
        sl = (slice(by * block_size, (by + 1) * block_size), slice(bx * block_size, (bx + 1) * block_size))
        count += int((~mask[sl]).sum())
        mask[sl] = True
    return MaskPlan(mask, block_size, ratio)


@dataclass
class Batch:
    """Stacked model inputs for one training step."""
    images: np.ndarray
    heatmaps: np.ndarray | None = None
    valid: np.ndarray | None = None
    labels: list[str] = field(default_factory=list)
