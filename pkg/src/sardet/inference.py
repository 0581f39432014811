"""Sliding-window inference over full scenes with cached heatmaps.

``predict_scene`` runs the model once per scene and keeps every chip's
probability map, so re-decoding at other thresholds or suppression
distances never touches the model again.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .decoder import DEFAULT_CONF, DEFAULT_NMS, Detection, decode, stitch
from .pipeline import CropWindow, NormSpec, eval_grid
from .synth import Scene


@dataclass
class ScenePrediction:
    shape: tuple[int, int]
    heatmaps: np.ndarray                      # [n_chips, L, L] probabilities
    origins: list[tuple[int, int]]
    windows: list[CropWindow]
    targets: list[tuple[int, int]] = field(default_factory=list)

    def heatmap(self) -> np.ndarray:
        """Scene-sized map assembled from each chip's owned window."""
        out = np.zeros(self.shape, dtype=np.float32)
        for hm, (ox, oy), w in zip(self.heatmaps, self.origins, self.windows):
            out[w.y0:w.y1, w.x0:w.x1] = hm[w.y0 - oy:w.y1 - oy, w.x0 - ox:w.x1 - ox]
        return out


class CountingPredictor:
    """Wraps a chips -> heatmaps callable and counts how often it is invoked."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn
        self.calls = 0

    def __call__(self, images: np.ndarray) -> np.ndarray:
        self.calls += 1
        return self.fn(images)


def _map(pool: Executor | None, fn, items):
    return list(pool.map(fn, items)) if pool is not None else [fn(i) for i in items]


def predict_scene(predict: Callable[[np.ndarray], np.ndarray], scene: Scene, norm: NormSpec,
                  size: int = 64, stride: int = 32, crop: int = 32,
                  pool: Executor | None = None) -> ScenePrediction:
    """Tile the scene, normalise each chip, and run ``predict`` once on the stack."""
    grid = eval_grid(scene, size, stride, crop)
    images = np.stack(_map(pool, lambda cw: norm(cw[0].raw, cw[0].valid_mask), grid))
    probs = np.asarray(predict(images), dtype=np.float32)
    if probs.shape != images.shape:
        raise ValueError(f"predictor returned {probs.shape}, expected {images.shape}")
    valid = np.stack([cw[0].valid_mask for cw in grid])
    probs = np.where(valid, probs, 0.0).astype(np.float32)
    return ScenePrediction(scene.shape, probs, [cw[0].origin[1] for cw in grid],
                           [cw[1] for cw in grid], list(scene.targets))


def decode_scene(pred: ScenePrediction, c: float = DEFAULT_CONF, d_nms: float = DEFAULT_NMS,
                 pool: Executor | None = None) -> list[Detection]:
    def one(i):
        hm = pred.heatmaps[i]
        return decode(hm, c, d_nms) if hm.max() >= c and hm.max() > 0 else []

    per_chip = _map(pool, one, range(len(pred.heatmaps)))
    return stitch(zip(per_chip, pred.origins, pred.windows), d_nms)
