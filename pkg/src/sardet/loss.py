"""Detection and reconstruction objectives.

Detection: ``alpha * BCE_w + beta * Dice`` on logits, restricted to valid
pixels.  Class weights multiply the per-pixel BCE only (a pixel is
foreground when its target heatmap exceeds 0.5); Dice is the soft binary
overlap over the whole batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import core as F
from .tensor.core import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    alpha_bce: float = 0.05
    beta_dice: float = 1.0
    dice_smooth: float = 1e-6

    def __post_init__(self):
        if self.alpha_bce < 0 or self.beta_dice < 0 or (self.alpha_bce == 0 and self.beta_dice == 0):
            raise ValueError("alpha_bce and beta_dice must be non-negative and not both zero")


def _check(a: Tensor, y: np.ndarray, valid: np.ndarray | None) -> np.ndarray:
    if a.shape != y.shape:
        raise ShapeError(f"prediction {a.shape} and target {y.shape} differ")
    if valid is None:
        return np.ones(y.shape, dtype=bool)
    if valid.shape != y.shape:
        raise ShapeError(f"valid mask {valid.shape} does not match target {y.shape}")
    return valid.astype(bool)


def bce_weighted(logits: Tensor, y: np.ndarray, valid: np.ndarray | None = None,
                 weights=(1.0, 1.0)) -> Tensor:
    """Mean over valid pixels of w_pixel * BCE(sigmoid(logits), y).

    ``weights`` is (w_fg, w_bg).  With no valid pixels the loss is 0 and a
    warning is logged.
    """
    valid = _check(logits, y, valid)
    n = int(valid.sum())
    if n == 0:
        log.warning("bce_weighted: no valid pixels, returning 0")
        return F.tsum(logits * 0.0)
    dt = logits.dtype
    y = np.asarray(y, dtype=dt)
    w_fg, w_bg = weights
    wpix = np.where(y > 0.5, w_fg, w_bg).astype(dt) * valid
    # softplus(z) - y*z == -(y log p + (1-y) log(1-p))
    per_pixel = F.softplus(logits) - logits * Tensor(y)
    return F.tsum(per_pixel * Tensor(wpix)) / float(n)


def dice_loss(probs: Tensor, y: np.ndarray, valid: np.ndarray | None = None, smooth: float = 1e-6) -> Tensor:
    valid = _check(probs, y, valid)
    dt = probs.dtype
    v = Tensor(valid.astype(dt))
    yv = np.asarray(y, dtype=dt) * valid
    pv = probs * v
    inter = F.tsum(pv * Tensor(yv))
    denom = F.tsum(pv) + float(yv.sum()) + smooth
    return 1.0 - (inter * 2.0 + smooth) / denom


def detection_loss(logits: Tensor, y: np.ndarray, valid: np.ndarray | None = None,
                   weights=(1.0, 1.0), cfg: LossConfig = LossConfig()) -> Tensor:
    total = None
    if cfg.alpha_bce:
        total = bce_weighted(logits, y, valid, weights) * cfg.alpha_bce
    if cfg.beta_dice:
        d = dice_loss(F.sigmoid(logits), y, valid, cfg.dice_smooth) * cfg.beta_dice
        total = d if total is None else total + d
    return total


def mim_loss(recon: Tensor, target: np.ndarray, pixel_mask: np.ndarray,
             valid: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over masked (and valid) pixels."""
    if recon.shape != target.shape:
        raise ShapeError(f"reconstruction {recon.shape} and target {target.shape} differ")
    m = np.broadcast_to(pixel_mask, target.shape).astype(bool)
    if valid is not None:
        m = m & np.broadcast_to(valid, target.shape)
    n = int(m.sum())
    if n == 0:
        raise ValueError("mim_loss: mask selects no pixels")
    diff = F.tabs(recon - Tensor(np.asarray(target, dtype=recon.dtype)))
    return F.tsum(diff * Tensor(m.astype(recon.dtype))) / float(n)
