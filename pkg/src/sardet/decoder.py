"""Heatmap to point detections: threshold, 3x3 peak picking, distance NMS.

Peaks are strict local maxima over the 8-neighbourhood.  On plateaus the
pixel that comes first in (y, x) order wins: a neighbour that precedes the
pixel must be strictly lower, a neighbour that follows it may be equal.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .pipeline import CropWindow

DEFAULT_CONF = 0.5
DEFAULT_NMS = 23.0


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    confidence: float

    def translated(self, dx: float, dy: float) -> "Detection":
        return Detection(self.x + dx, self.y + dy, self.confidence)


# neighbour offsets in (dy, dx); the first four precede the centre in raster order
_BEFORE = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
_AFTER = ((0, 1), (1, -1), (1, 0), (1, 1))


def find_peaks(v: np.ndarray) -> np.ndarray:
    """Boolean map of plateau-aware strict local maxima with value > 0."""
    H, W = v.shape
    p = np.pad(v, 1, mode="constant", constant_values=-np.inf)
    peak = v > 0
    for dy, dx in _BEFORE:
        peak &= v > p[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
    for dy, dx in _AFTER:
        peak &= v >= p[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
    return peak


def nms(dets: Sequence[Detection], d_nms: float) -> list[Detection]:
    """Greedy suppression: keep a detection iff it is >= d_nms from every kept one.

    Candidates are visited by descending confidence, then by (y, x).
    """
    order = sorted(dets, key=lambda d: (-d.confidence, d.y, d.x))
    if d_nms <= 0:
        return order
    kept: list[Detection] = []
    kx = np.empty(len(order))
    ky = np.empty(len(order))
    d2 = d_nms * d_nms
    for d in order:
        n = len(kept)
        if n and np.any((kx[:n] - d.x) ** 2 + (ky[:n] - d.y) ** 2 < d2):
            continue
        kx[n], ky[n] = d.x, d.y
        kept.append(d)
    return kept


def decode(heatmap: np.ndarray, c: float = DEFAULT_CONF, d_nms: float = DEFAULT_NMS) -> list[Detection]:
    """Point detections from a probability map, strongest first."""
    v = np.asarray(heatmap, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {v.shape}")
    v = np.where(v >= c, v, 0.0)
    ys, xs = np.nonzero(find_peaks(v))
    dets = [Detection(float(x), float(y), float(v[y, x])) for y, x in zip(ys, xs)]
    return nms(dets, d_nms)


def stitch(chip_dets: Iterable[tuple[Sequence[Detection], tuple[int, int], CropWindow]],
           d_nms: float = DEFAULT_NMS) -> list[Detection]:
    """Merge per-chip detections into scene coordinates.

    Each item is (detections in chip coordinates, chip origin (x0, y0), owned
    window in scene coordinates).  Detections outside their chip's window are
    dropped, and NMS runs again over the union to clear seam duplicates.
    """
    merged = []
    for dets, (ox, oy), win in chip_dets:
        for d in dets:
            s = d.translated(ox, oy)
            if win.contains(s.x, s.y):
                merged.append(s)
    return nms(merged, d_nms)


def write_detections_csv(path: str | os.PathLike, dets: Sequence[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "confidence"])
        for d in dets:
            w.writerow([f"{d.x:g}", f"{d.y:g}", f"{d.confidence:.6f}"])


def read_detections_csv(path: str | os.PathLike) -> list[Detection]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["x", "y", "confidence"]:
        raise ValueError(f"{path}: expected header 'x,y,confidence'")
    return [Detection(float(r[0]), float(r[1]), float(r[2])) for r in rows[1:] if r]
