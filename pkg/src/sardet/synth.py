"""Seeded synthetic SAR scenes and their on-disk format.

A scene is Rayleigh speckle over an optional smooth reflectivity field, with
small bright point targets, unlabelled bright distractors and zeroed
rectangles standing in for unpopulated projection pixels.

Files per scene stem ``S``: ``S.pgm`` (16-bit binary PGM, big-endian as the
format requires), ``S_mask.pgm`` (8-bit, 255 = valid) and ``S.csv`` with an
``x,y`` header.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

U16_MAX = 65535


class GenerationError(RuntimeError):
    pass


class SceneIOError(IOError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    size: int = 512
    target_count: tuple[int, int] = (1, 6)
    target_amplitude: tuple[float, float] = (6.0, 12.0)
    target_pixels: tuple[int, int] = (2, 4)
    speckle_scale: float = 120.0
    texture_strength: float = 0.0
    texture_scale: float = 12.0
    distractor_count: tuple[int, int] = (0, 3)
    distractor_amplitude: tuple[float, float] = (10.0, 20.0)
    distractor_pixels: tuple[int, int] = (8, 14)
    invalid_regions: tuple[int, int] = (0, 1)
    invalid_extent: tuple[int, int] = (16, 96)
    min_separation: float = 30.0
    max_retries: int = 200

    def __post_init__(self):
        for name in ("target_count", "target_amplitude", "target_pixels", "distractor_count",
                     "distractor_amplitude", "distractor_pixels", "invalid_regions", "invalid_extent"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name}: bad range ({lo}, {hi})")
        if self.size < 8 or self.speckle_scale <= 0:
            raise ValueError("size must be >= 8 and speckle_scale positive")
        if self.target_pixels[0] < 1 or self.distractor_pixels[0] < 1:
            raise ValueError("stamps need at least one pixel")


# Fixed-seed benchmark scenes: one target per 640x640 scene gives about one
# foreground chip per hundred 64-pixel chips.  Distractors stay dimmer than
# targets so they pressure precision without hiding the targets.
BENCHMARK = SynthConfig(size=640, target_count=(1, 1), target_amplitude=(20.0, 40.0),
                        distractor_count=(0, 2), distractor_amplitude=(6.0, 12.0))

# The same scenes over a log-normal reflectivity texture, which gives masked
# image modelling spatial structure to recover.
TEXTURED = SynthConfig(size=640, target_count=(1, 1), target_amplitude=(20.0, 40.0),
                       distractor_count=(0, 2), distractor_amplitude=(6.0, 12.0),
                       texture_strength=3.0, texture_scale=12.0)


@dataclass
class Scene:
    pixels: np.ndarray
    targets: list[tuple[int, int]]
    valid_mask: np.ndarray
    seed: int = 0
    distractors: list[tuple[int, int]] = field(default_factory=list)
    foreground: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def foreground_fraction(self) -> float:
        if self.foreground is None:
            return float("nan")
        return float(self.foreground.mean())

    def equals(self, other: "Scene") -> bool:
        return (np.array_equal(self.pixels, other.pixels)
                and np.array_equal(self.valid_mask, other.valid_mask)
                and list(map(tuple, self.targets)) == list(map(tuple, other.targets)))


def scene_seed(master_seed: int, index: int) -> int:
    """Independent 64-bit stream seed for scene ``index`` of a dataset."""
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1, np.uint64)[0])


def _rint_range(rng: np.random.Generator, lo_hi: tuple[int, int]) -> int:
    return int(rng.integers(lo_hi[0], lo_hi[1] + 1))


def _grow_stamp(rng: np.random.Generator, n: int) -> list[tuple[int, int]]:
    """Random 4-connected pixel cluster of size ``n`` containing (0, 0)."""
    cells = [(0, 0)]
    taken = {(0, 0)}
    steps = ((1, 0), (-1, 0), (0, 1), (0, -1))
    while len(cells) < n:
        bx, by = cells[int(rng.integers(len(cells)))]
        dx, dy = steps[int(rng.integers(4))]
        cand = (bx + dx, by + dy)
        if cand not in taken:
            taken.add(cand)
            cells.append(cand)
    return cells


def _reflectivity(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.texture_strength <= 0:
        return np.ones((cfg.size, cfg.size))
    field_ = gaussian_filter(rng.standard_normal((cfg.size, cfg.size)), cfg.texture_scale, mode="wrap")
    field_ /= field_.std() + 1e-12
    return np.exp2(cfg.texture_strength * field_)


def generate_scene(cfg: SynthConfig, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    S = cfg.size
    scale = cfg.speckle_scale * _reflectivity(cfg, rng)
    amp = scale * rng.rayleigh(1.0, size=(S, S))

    valid = np.ones((S, S), dtype=bool)
    for _ in range(_rint_range(rng, cfg.invalid_regions)):
        h, w = (_rint_range(rng, cfg.invalid_extent) for _ in range(2))
        h, w = min(h, S), min(w, S)
        # unpopulated pixels hug the image border, as after a projection
        side = int(rng.integers(4))
        off = int(rng.integers(0, S - max(h, w) + 1))
        if side == 0:
            valid[:h, off:off + w] = False
        elif side == 1:
            valid[S - h:, off:off + w] = False
        elif side == 2:
            valid[off:off + h, :w] = False
        else:
            valid[off:off + h, S - w:] = False

    foreground = np.zeros((S, S), dtype=bool)
    occupied = np.zeros((S, S), dtype=bool)
    sqrt_half_pi = np.sqrt(np.pi / 2)

    def place(n_items, amp_range, pix_range, avoid: list[tuple[int, int]]):
        placed = []
        for _ in range(n_items):
            for _attempt in range(cfg.max_retries):
                x, y = int(rng.integers(2, S - 2)), int(rng.integers(2, S - 2))
                if any((x - ax) ** 2 + (y - ay) ** 2 < cfg.min_separation ** 2 for ax, ay in [(p[0], p[1]) for p in placed] + avoid):
                    continue
                cells = [(x + dx, y + dy) for dx, dy in _grow_stamp(rng, _rint_range(rng, pix_range))]
                if not all(0 <= cx < S and 0 <= cy < S and valid[cy, cx] and not occupied[cy, cx]
                           for cx, cy in cells):
                    continue
                mult = rng.uniform(*amp_range)
                for cx, cy in cells:
                    amp[cy, cx] = mult * scale[cy, cx] * sqrt_half_pi
                    occupied[cy, cx] = True
                placed.append((x, y, cells))
                break
            else:
                raise GenerationError(
                    f"could not place item {len(placed) + 1}/{n_items} without overlap "
                    f"after {cfg.max_retries} retries")
        return placed

    targets = place(_rint_range(rng, cfg.target_count), cfg.target_amplitude, cfg.target_pixels, [])
    for _, _, cells in targets:
        for cx, cy in cells:
            foreground[cy, cx] = True
    distractors = place(_rint_range(rng, cfg.distractor_count), cfg.distractor_amplitude,
                        cfg.distractor_pixels, [(x, y) for x, y, _ in targets])

    pixels = np.clip(np.rint(amp), 0, U16_MAX).astype(np.uint16)
    pixels[~valid] = 0
    return Scene(
        pixels=pixels,
        targets=[(x, y) for x, y, _ in targets],
        valid_mask=valid,
        seed=int(seed),
        distractors=[(x, y) for x, y, _ in distractors],
        foreground=foreground,
    )


def generate_dataset(cfg: SynthConfig, n: int, master_seed: int) -> list[Scene]:
    return [generate_scene(cfg, scene_seed(master_seed, i)) for i in range(n)]


# -- file formats --------------------------------------------------------------
def write_pgm(path: str | os.PathLike, image: np.ndarray, comment: str | None = None) -> None:
    if image.dtype == np.uint16:
        maxval, payload = U16_MAX, image.astype(">u2").tobytes()
    elif image.dtype == np.uint8:
        maxval, payload = 255, image.tobytes()
    else:
        raise TypeError(f"PGM needs uint8 or uint16 data, got {image.dtype}")
    h, w = image.shape
    header = "P5\n"
    if comment:
        header += f"# {comment}\n"
    header += f"{w} {h}\n{maxval}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload)


def read_pgm(path: str | os.PathLike) -> tuple[np.ndarray, list[str]]:
    """Parse a binary PGM; returns the image and any header comments."""
    raw = Path(path).read_bytes()
    pos = 0
    comments: list[str] = []

    def token() -> tuple[int, str]:
        nonlocal pos
        while True:
            while pos < len(raw) and raw[pos:pos + 1].isspace():
                pos += 1
            if pos < len(raw) and raw[pos:pos + 1] == b"#":
                end = raw.find(b"\n", pos)
                end = len(raw) if end < 0 else end
                comments.append(raw[pos + 1:end].decode("ascii", "replace").strip())
                pos = end + 1
                continue
            break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SceneIOError(f"{path}: malformed PGM header, expected token at byte offset {start}")
        return start, raw[start:pos].decode("ascii", "replace")

    at, magic = token()
    if magic != "P5":
        raise SceneIOError(f"{path}: malformed PGM header, bad magic at byte offset {at}")
    fields = []
    for _ in range(3):
        at, tok = token()
        if not tok.isdigit():
            raise SceneIOError(f"{path}: malformed PGM header, non-numeric field {tok!r} at byte offset {at}")
        fields.append(int(tok))
    w, h, maxval = fields
    pos += 1  # single whitespace byte before the raster
    if maxval not in (255, U16_MAX):
        raise SceneIOError(f"{path}: unsupported maxval {maxval} in header ending at byte offset {pos}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = w * h * dtype.itemsize
    if len(raw) - pos < need:
        raise SceneIOError(f"{path}: truncated payload, expected {need} bytes from byte offset {pos}, "
                           f"found {len(raw) - pos}")
    img = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return img.astype(np.uint16 if maxval > 255 else np.uint8), comments


def write_points_csv(path: str | os.PathLike, points, header=("x", "y")) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(points)


def read_points_csv(path: str | os.PathLike) -> list[tuple[int, int]]:
    text = Path(path).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0][:2]] != ["x", "y"]:
        raise SceneIOError(f"{path}: malformed annotation header at byte offset 0, expected 'x,y'")
    out = []
    offset = len(text.splitlines(keepends=True)[0])
    for line, row in zip(text.splitlines(keepends=True)[1:], rows[1:]):
        try:
            out.append((int(row[0]), int(row[1])))
        except (ValueError, IndexError) as exc:
            raise SceneIOError(f"{path}: malformed annotation row at byte offset {offset}") from exc
        offset += len(line)
    return out


def save_scene(scene: Scene, stem: str | os.PathLike) -> None:
    stem = str(stem)
    write_pgm(stem + ".pgm", scene.pixels, comment=f"seed {scene.seed}")
    write_pgm(stem + "_mask.pgm", np.where(scene.valid_mask, 255, 0).astype(np.uint8))
    write_points_csv(stem + ".csv", scene.targets)


def load_scene(stem: str | os.PathLike) -> Scene:
    stem = str(stem)
    pixels, comments = read_pgm(stem + ".pgm")
    if pixels.dtype != np.uint16:
        raise SceneIOError(f"{stem}.pgm: expected a 16-bit image")
    mask, _ = read_pgm(stem + "_mask.pgm")
    if mask.shape != pixels.shape:
        raise SceneIOError(f"{stem}_mask.pgm: shape {mask.shape} does not match image {pixels.shape}")
    seed = 0
    for c in comments:
        if c.startswith("seed "):
            seed = int(c.split()[1])
    return Scene(pixels=pixels, targets=read_points_csv(stem + ".csv"), valid_mask=mask > 0, seed=seed)


def list_scenes(directory: str | os.PathLike) -> list[str]:
    """Scene stems in a directory, sorted."""
    d = Path(directory)
    return sorted(str(p.with_suffix("")) for p in d.glob("*.pgm") if not p.stem.endswith("_mask"))
