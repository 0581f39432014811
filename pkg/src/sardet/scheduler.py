"""Adaptive class-sampling schedule.

The per-epoch target class distribution is the training distribution raised
to an exponent that mixes a decaying curriculum term ``g`` and a
performance-feedback term ``h``::

    d_target(0) = d_train
    d_target(t) = d_train ** (alpha * g(t) + (1 - alpha) * h(t))      t > 0

followed by normalisation.  Loss weights are ``max(d_train / d_target, 1)``.
``d_train`` has entries ``1 - C_i / C_max`` (clamped away from 0 and 1), so
the majority class starts near zero and the schedule relaxes to uniform as
the exponent falls to zero.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

G_KINDS = ("linear", "cosine", "exponential")
EXP_RATE = 5.0


@dataclass(frozen=True)
class ClassStats:
    counts: tuple[int, ...]

    def __post_init__(self):
        if any(c < 0 for c in self.counts):
            raise ValueError(f"class counts must be non-negative: {self.counts}")

    @property
    def c_max(self) -> int:
        return max(self.counts)


def raw_d_train(stats: ClassStats) -> np.ndarray:
    """1 - C_i / C_max, without clamping."""
    if stats.c_max <= 0:
        raise ValueError("all class counts are zero")
    c = np.asarray(stats.counts, dtype=np.float64)
    return 1.0 - c / stats.c_max


def compute_d_train(stats: ClassStats, eps: float = 0.01) -> np.ndarray:
    return np.clip(raw_d_train(stats), eps, 1.0 - eps)


def g(t: float, T: float, kind: str = "cosine") -> float:
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if not 0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    if kind == "linear":
        return 1.0 - t / T
    if kind == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * t / T))
    if kind == "exponential":
        floor = math.exp(-EXP_RATE)
        return max(0.0, (math.exp(-EXP_RATE * t / T) - floor) / (1.0 - floor))
    raise ValueError(f"unknown schedule kind {kind!r}; choose from {G_KINDS}")


def h(t: int, f1_history: list[float]) -> float:
    """1 - validation F1 of the previous epoch (1 at t = 0)."""
    for f in f1_history:
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"F1 value {f} outside [0, 1]")
    if t == 0 or not f1_history:
        return 1.0
    return 1.0 - f1_history[min(t, len(f1_history)) - 1]


def normalized(v: np.ndarray) -> np.ndarray:
    return v / v.sum()


@dataclass
class SchedulerState:
    d_train: np.ndarray
    T: int
    alpha: float = 0.8
    kind: str = "cosine"
    eps: float = 0.01
    enabled: bool = True
    f1_history: list[float] = field(default_factory=list)

    @classmethod
    def from_counts(cls, counts, T: int, alpha: float = 0.8, kind: str = "cosine",
                    eps: float = 0.01, enabled: bool = True) -> "SchedulerState":
        return cls(compute_d_train(ClassStats(tuple(counts)), eps), T, alpha, kind, eps, enabled)

    @property
    def K(self) -> int:
        return len(self.d_train)

    def exponent(self, t: int) -> float:
        tt = min(t, self.T)
        return self.alpha * g(tt, self.T, self.kind) + (1.0 - self.alpha) * h(t, self.f1_history)

    def components(self, t: int) -> tuple[float, float, float]:
        tt = min(t, self.T)
        gv, hv = g(tt, self.T, self.kind), h(t, self.f1_history)
        return self.alpha * gv + (1.0 - self.alpha) * hv, gv, hv

    def d_target(self, t: int) -> np.ndarray:
        if not self.enabled:
            return np.full(self.K, 1.0 / self.K)
        if t == 0:
            return normalized(self.d_train)
        return normalized(self.d_train ** self.exponent(t))

    def loss_weights(self, t: int) -> np.ndarray:
        if not self.enabled:
            return np.ones(self.K)
        return np.maximum(normalized(self.d_train) / self.d_target(t), 1.0)

    def compose_batch(self, t: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Class index per batch slot, drawn i.i.d. from d_target(t)."""
        return rng.choice(self.K, size=batch_size, p=self.d_target(t))

    def record_f1(self, f1: float) -> None:
        if not 0.0 <= f1 <= 1.0:
            raise ValueError(f"F1 value {f1} outside [0, 1]")
        self.f1_history.append(float(f1))


def write_schedule_csv(path, rows: list[dict]) -> None:
    """Per-epoch CSV: epoch,e(t),g,h,d_target_fg,d_target_bg,w_fg,w_bg."""
    cols = ["epoch", "e(t)", "g", "h", "d_target_fg", "d_target_bg", "w_fg", "w_bg"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["epoch"]] + [f"{r[c]:.10g}" for c in cols[1:]])


def schedule_row(state: SchedulerState, t: int, fg: int = 0, bg: int = 1) -> dict:
    e, gv, hv = state.components(t)
    if not state.enabled:
        e = 0.0
    d = state.d_target(t)
    w = state.loss_weights(t)
    return {"epoch": t, "e(t)": e, "g": gv, "h": hv, "d_target_fg": d[fg], "d_target_bg": d[bg],
            "w_fg": w[fg], "w_bg": w[bg]}
