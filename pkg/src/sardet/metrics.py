"""Hit-distance matching, precision/recall/F1, threshold tables and sweeps.

Counts are pooled over scenes before forming ratios.  Conventions for empty
sets: precision is 1 with no detections, recall is 1 with no ground truth,
and F1 is 0 whenever precision + recall is 0.

``AP_tau`` is the pooled precision at detection-confidence threshold tau;
mAP is its mean over the 19-point grid 0.05 .. 0.95.  A trapezoidal area
under the (recall, precision) curve traced by the same sweep is reported
alongside as ``auc_ap``.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .decoder import DEFAULT_CONF, DEFAULT_NMS, Detection
from .inference import ScenePrediction, decode_scene

DEFAULT_HIT = 45.0
TAUS: tuple[float, ...] = tuple(k / 20 for k in range(1, 20))
SWEEP_AXES = ("d_nms", "confidence", "d_hit")


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]] = field(default_factory=list)   # (detection idx, ground-truth idx)


def match(dets: Sequence[Detection], gts: Sequence[tuple[float, float]], d_hit: float = DEFAULT_HIT) -> MatchResult:
    """Greedy assignment: by descending confidence, each detection takes its
    nearest still-unmatched ground truth within ``d_hit``."""
    if not d_hit > 0:
        raise ValueError(f"d_hit must be positive, got {d_hit}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    free = np.ones(len(g), dtype=bool)
    pairs = []
    for i in order:
        if not free.any():
            break
        d2 = (g[:, 0] - dets[i].x) ** 2 + (g[:, 1] - dets[i].y) ** 2
        d2[~free] = np.inf
        j = int(np.argmin(d2))
        if d2[j] <= d_hit * d_hit:
            free[j] = False
            pairs.append((i, j))
    tp = len(pairs)
    return MatchResult(tp, len(dets) - tp, len(g) - tp, pairs)


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    p = tp / (tp + fp) if tp + fp else 1.0
    r = tp / (tp + fn) if tp + fn else 1.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass(frozen=True)
class ThresholdRow:
    tau: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def _pool_counts(det_lists, gt_lists, d_hit) -> tuple[int, int, int]:
    tp = fp = fn = 0
    for dets, gts in zip(det_lists, gt_lists, strict=True):
        m = match(dets, gts, d_hit)
        tp, fp, fn = tp + m.tp, fp + m.fp, fn + m.fn
    return tp, fp, fn


def _row(value, det_lists, gt_lists, d_hit) -> ThresholdRow:
    tp, fp, fn = _pool_counts(det_lists, gt_lists, d_hit)
    return ThresholdRow(float(value), *prf(tp, fp, fn), tp, fp, fn)


def pr_at_threshold(source: Sequence[ScenePrediction] | Sequence[Sequence[Detection]],
                    gts: Sequence[Sequence[tuple[float, float]]], tau: float,
                    d_hit: float = DEFAULT_HIT, d_nms: float = DEFAULT_NMS, pool=None) -> ThresholdRow:
    """Pooled P/R/F1 at confidence ``tau``.

    ``source`` holds either cached scene predictions (decoded afresh at tau)
    or ready detection lists (filtered to confidence >= tau).
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    det_lists = [decode_scene(s, tau, d_nms, pool) if isinstance(s, ScenePrediction)
                 else [d for d in s if d.confidence >= tau] for s in source]
    return _row(tau, det_lists, gts, d_hit)


@dataclass
class EvalReport:
    rows: list[ThresholdRow]
    d_hit: float
    d_nms: float

    def ap(self, tau: float) -> float:
        for r in self.rows:
            if math.isclose(r.tau, tau, abs_tol=1e-9):
                return r.precision
        raise KeyError(f"tau {tau} not in the table")

    @property
    def ap25(self) -> float:
        return self.ap(0.25)

    @property
    def ap50(self) -> float:
        return self.ap(0.50)

    @property
    def ap75(self) -> float:
        return self.ap(0.75)

    @property
    def map(self) -> float:
        return float(np.mean([r.precision for r in self.rows]))

    @property
    def best(self) -> ThresholdRow:
        """Highest-F1 row; ties go to the lower threshold."""
        return max(self.rows, key=lambda r: (r.f1, -r.tau))

    @property
    def auc_ap(self) -> float:
        pts = sorted((r.recall, r.precision) for r in self.rows)
        rec = np.array([p[0] for p in pts])
        prec = np.array([p[1] for p in pts])
        return float(np.sum(np.diff(rec) * (prec[1:] + prec[:-1]) / 2.0)) if len(pts) > 1 else 0.0

    def summary(self) -> dict:
        b = self.best
        return {"AP25": self.ap25, "AP50": self.ap50, "AP75": self.ap75, "mAP": self.map,
                "best_tau": b.tau, "best_precision": b.precision, "best_recall": b.recall,
                "best_f1": b.f1, "auc_ap": self.auc_ap, "d_hit": self.d_hit, "d_nms": self.d_nms}

    def write_csv(self, path: str | os.PathLike) -> None:
        write_rows_csv(path, self.rows, "tau")

    def write_summary_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k, v in self.summary().items():
                w.writerow([k, f"{v:.6f}"])


def write_rows_csv(path: str | os.PathLike, rows: Sequence[ThresholdRow], first: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([first, "precision", "recall", "f1", "tp", "fp", "fn"])
        for r in rows:
            w.writerow([f"{r.tau:.6g}", f"{r.precision:.6f}", f"{r.recall:.6f}", f"{r.f1:.6f}", r.tp, r.fp, r.fn])


def ap_table(preds: Sequence[ScenePrediction], gts: Sequence[Sequence[tuple[float, float]]] | None = None,
             d_hit: float = DEFAULT_HIT, d_nms: float = DEFAULT_NMS, taus: Sequence[float] = TAUS,
             pool=None) -> EvalReport:
    if gts is None:
        gts = [p.targets for p in preds]
    rows = [pr_at_threshold(preds, gts, t, d_hit, d_nms, pool) for t in taus]
    return EvalReport(rows, d_hit, d_nms)


def sweep_grid(axis: str) -> np.ndarray:
    if axis == "d_nms":
        return np.linspace(0.0, 500.0, 10)
    if axis == "confidence":
        return np.round(np.arange(11) * 0.1, 10)
    if axis == "d_hit":
        return np.logspace(0.0, 4.0, 50)
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


def sensitivity_sweep(preds: Sequence[ScenePrediction], axis: str, grid: Sequence[float] | None = None,
                      gts=None, c: float = DEFAULT_CONF, d_nms: float = DEFAULT_NMS,
                      d_hit: float = DEFAULT_HIT, pool=None) -> list[ThresholdRow]:
    """P/R/F1 as one hyperparameter varies and the others stay at their defaults.

    Works entirely on cached predictions: d_nms and confidence points
    re-decode the stored heatmaps, d_hit points re-match one fixed set of
    detections.  The ``tau`` field of each row holds the swept value.
    """
    grid = sweep_grid(axis) if grid is None else np.asarray(grid, dtype=np.float64)
    if gts is None:
        gts = [p.targets for p in preds]
    if axis == "d_nms":
        return [_row(v, [decode_scene(p, c, v, pool) for p in preds], gts, d_hit) for v in grid]
    if axis == "confidence":
        return [_row(v, [decode_scene(p, v, d_nms, pool) for p in preds], gts, d_hit) for v in grid]
    if axis == "d_hit":
        cached = [decode_scene(p, c, d_nms, pool) for p in preds]
        return [_row(v, cached, gts, v) for v in grid]
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
