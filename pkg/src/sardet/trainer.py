"""Masked-image pretraining and heatmap fine-tuning loops.

Randomness is keyed, never sequential: every draw comes from a generator
seeded by ``SeedSequence([seed, stream, epoch, iteration, slot])``.  A run
therefore reproduces bit for bit regardless of worker-thread count, and a
run resumed from a checkpoint continues exactly where an uninterrupted one
would have been.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .backbone import BackboneConfig
from .inference import decode_scene, predict_scene
from .loss import LossConfig, detection_loss, mim_loss
from .metrics import _pool_counts, prf
from .models import DetectorModel, MIMModel
from .pipeline import (AugmentFlags, NormSpec, SamplingError, augment, chip_class_counts,
                       crop_chip, encode_targets, gaussian_heatmap, plan_mask,
                       sample_train_chip)
from .scheduler import G_KINDS, SchedulerState
from .synth import Scene
from .tensor.core import ConfigError, Tensor, no_grad
from .tensor.nn import Module

log = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune")
SCHEDULERS = ("none",) + G_KINDS
FG, BG = 0, 1
CLASS_NAMES = ("fg", "bg")

# stream ids for keyed random generators
_S_INIT, _S_BATCH, _S_CHIP, _S_MASK, _S_VAL, _S_ORDER = 1, 2, 3, 4, 5, 6


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "finetune"
    backbone: str = "nano"
    chip_size: int = 64
    epochs: int = 25
    iters_per_epoch: int = 100
    batch_size: int = 8
    lr_peak: float | None = None
    warmup_epochs: float = 1.0
    seed: int = 0
    patience: int = 5
    scheduler: str = "cosine"
    alpha: float = 0.8
    d_eps: float = 0.01
    normalization: str = "log"
    s_norm: float = 16.0
    arctan_scale: float = 1024.0
    mask_size: int = 8
    mask_ratio: float = 0.6
    heatmap_sigma: float = 10.0
    loss_alpha: float = 0.05
    loss_beta: float = 1.0
    augment: bool = True
    val_chips: int = 64
    val_stride: int = 32
    val_crop: int = 32
    conf: float = 0.5
    d_nms: float = 23.0
    d_hit: float = 45.0
    threads: int = 1
    from_scratch: bool = False
    init_checkpoint: str | None = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigError(f"scheduler must be one of {SCHEDULERS}, got {self.scheduler!r}")
        for name in ("epochs", "iters_per_epoch", "batch_size", "chip_size", "threads", "patience"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.warmup_steps >= self.total_steps:
            raise ConfigError("warmup must end before the last training step")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mask_size < 1 or self.mask_size % self.backbone_config().patch_size:
            raise ConfigError(f"mask size {self.mask_size} px must be a positive multiple of the patch size")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.phase == "finetune" and not self.from_scratch and not self.init_checkpoint:
            raise ConfigError("finetune needs a pretrained checkpoint or from_scratch=True")

    @property
    def lr(self) -> float:
        if self.lr_peak is not None:
            return self.lr_peak
        return 1e-3 if self.phase == "pretrain" else 3e-4

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iters_per_epoch

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_epochs * self.iters_per_epoch))

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig.preset(self.backbone, self.chip_size)

    def to_dict(self) -> dict:
        """Settings that determine results; worker count is excluded on purpose."""
        d = asdict(self)
        d.pop("threads")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, lr_peak: float) -> float:
    """Linear ramp 0 -> lr_peak over ``warmup_steps``, then half-cosine down to 0."""
    if not 0 <= warmup_steps < total_steps:
        raise ValueError(f"need 0 <= warmup_steps < total_steps, got {warmup_steps}, {total_steps}")
    step = min(max(step, 0), total_steps)
    if step < warmup_steps:
        return lr_peak * step / warmup_steps
    frac = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * lr_peak * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        for n, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient in {n}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for n, _ in self.params:
            out[f"adam.m.{n}"] = self.m[n]
            out[f"adam.v.{n}"] = self.v[n]
        out["adam.step"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state_tensors(self, state) -> None:
        for n, _ in self.params:
            for key, store in ((f"adam.m.{n}", self.m), (f"adam.v.{n}", self.v)):
                if key not in state:
                    raise ckpt.CheckpointError(f"optimizer state missing tensor {key!r}")
                store[n] = np.array(state[key], dtype=np.float32)
        self.t = int(state["adam.step"][0])


def _check_finite(loss: Tensor, where: str) -> float:
    val = float(loss.data)
    if not math.isfinite(val):
        raise NumericalError(f"loss became {val} at {where}; try a lower learning rate")
    return val


def save_training_state(path: str, model: Module, opt: Adam, meta: dict) -> None:
    tensors = dict(model.state_dict())
    tensors.update(opt.state_tensors())
    ckpt.save_tensors(path, tensors)
    ckpt.save_meta(path, meta)


def load_training_state(path: str, model: Module, opt: Adam | None = None) -> dict:
    state = ckpt.load_tensors(path)
    model_state = {k: v for k, v in state.items() if not k.startswith("adam.")}
    try:
        model.load_state_dict(model_state, strict=True)
    except (KeyError, ValueError) as e:
        raise ckpt.CheckpointError(f"{path}: {e}") from e
    if opt is not None:
        opt.load_state_tensors(state)
    return ckpt.load_meta(path)


def split_indices(n: int, fractions: Sequence[float], seed: int) -> list[list[int]]:
    """Seeded shuffle of range(n) cut into consecutive parts with the given fractions."""
    perm = keyed_rng(seed, 99).permutation(n)
    cuts = np.floor(np.cumsum(fractions)[:-1] * n + 1e-9).astype(int)
    return [sorted(int(i) for i in part) for part in np.split(perm, cuts)]


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_report_csv(path: str, rows: list[dict]) -> None:
    if not rows:
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])


# -- pretraining ---------------------------------------------------------------
@dataclass
class PretrainResult:
    model: MIMModel
    reports: list[dict]
    norm: NormSpec
    best_path: str | None = None


def _random_crop(scene: Scene, size: int, rng: np.random.Generator, min_valid: float = 0.5, tries: int = 32):
    H, W = scene.shape
    for _ in range(tries):
        x0 = int(rng.integers(0, W - size + 1))
        y0 = int(rng.integers(0, H - size + 1))
        chip = crop_chip(scene, x0, y0, size)
        if chip.valid_mask.mean() >= min_valid:
            return chip
    return chip


def _mim_example(cfg: TrainConfig, scene: Scene, norm: NormSpec, rng: np.random.Generator,
                 flags: AugmentFlags | None):
    bcfg = cfg.backbone_config()
    chip = _random_crop(scene, cfg.chip_size, rng)
    if flags is not None:
        chip = augment(chip, rng, flags)
    img = norm(chip.raw, chip.valid_mask)
    for _ in range(16):
        plan = plan_mask(bcfg.grid_size, cfg.mask_size // bcfg.patch_size, cfg.mask_ratio, rng)
        pm = plan.pixel_mask(bcfg.patch_size)
        if (pm & chip.valid_mask).any():
            break
    return img, plan.mask, pm, chip.valid_mask


def _stack_mim(examples):
    imgs, masks, pms, valids = zip(*examples)
    return np.stack(imgs)[:, None], np.stack(masks), np.stack(pms)[:, None], np.stack(valids)[:, None]


def pretrain(cfg: TrainConfig, scenes: Sequence[Scene], out_dir: str | None = None,
             progress: Callable[[dict], None] | None = None, extra_meta: dict | None = None) -> PretrainResult:
    """Masked-image pretraining; report row 0 is the untrained model."""
    if cfg.phase != "pretrain":
        cfg = replace(cfg, phase="pretrain")
    if len(scenes) < 2:
        raise ConfigError("pretraining needs at least two scenes (train + validation)")
    tr_idx, va_idx = split_indices(len(scenes), (0.9, 0.1), cfg.seed)
    if not va_idx:
        tr_idx, va_idx = tr_idx[:-1], tr_idx[-1:]
    train = [scenes[i] for i in tr_idx]
    val = [scenes[i] for i in va_idx]
    norm = NormSpec.fit(train, cfg.normalization, cfg.s_norm, cfg.arctan_scale)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    model = MIMModel(cfg.backbone_config(), keyed_rng(cfg.seed, _S_INIT))
    opt = Adam(model.named_parameters())
    flags = AugmentFlags() if cfg.augment else None

    vrng = keyed_rng(cfg.seed, _S_VAL)
    val_batch = _stack_mim([_mim_example(cfg, val[k % len(val)], norm, vrng, None)
                            for k in range(cfg.val_chips)])

    def val_loss() -> float:
        imgs, masks, pms, valids = val_batch
        total = n = 0.0
        with no_grad():
            for i in range(0, len(imgs), 32):
                sl = slice(i, i + 32)
                rec = model(Tensor(imgs[sl]), masks[sl])
                sel = pms[sl] & valids[sl]
                total += float(np.abs(rec.data - imgs[sl])[sel].sum())
                n += int(sel.sum())
        return total / max(n, 1)

    reports = [{"epoch": 0, "train_loss": float("nan"), "val_loss": val_loss(), "lr": 0.0}]
    if progress:
        progress(reports[-1])
    best, best_path = reports[0]["val_loss"], None
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = keyed_rng(cfg.seed, _S_ORDER, epoch).permutation(len(train))
            losses = []
            lr = 0.0
            for it in range(cfg.iters_per_epoch):
                scene = train[order[it % len(train)]]
                step = (epoch - 1) * cfg.iters_per_epoch + it
                make = lambda slot: _mim_example(cfg, scene, norm, keyed_rng(cfg.seed, _S_CHIP, epoch, it, slot), flags)
                slots = range(cfg.batch_size)
                imgs, masks, pms, valids = _stack_mim(list(pool.map(make, slots)) if pool else [make(s) for s in slots])
                rec = model(Tensor(imgs), masks)
                loss = mim_loss(rec, imgs, pms, valids)
                losses.append(_check_finite(loss, f"epoch {epoch} iter {it}"))
                model.zero_grad()
                loss.backward()
                lr = lr_schedule(step + 1, cfg.total_steps, cfg.warmup_steps, cfg.lr)
                opt.step(lr)
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss(), "lr": lr}
            reports.append(row)
            if progress:
                progress(row)
            meta = {"phase": "pretrain", "epoch": epoch, "config": cfg.to_dict(), "norm": asdict(norm),
                    "reports": reports, **(extra_meta or {})}
            if out_dir:
                save_training_state(os.path.join(out_dir, "last.tsar"), model, opt, meta)
            if row["val_loss"] < best:
                best = row["val_loss"]
                if out_dir:
                    best_path = os.path.join(out_dir, "best.tsar")
                    save_training_state(best_path, model, opt, meta)
    finally:
        if pool:
            pool.shutdown()
    return PretrainResult(model, reports, norm, best_path)


# -- fine-tuning -----------------------------------------------------------------
@dataclass
class FinetuneResult:
    model: DetectorModel
    reports: list[dict]
    schedule: list[dict]
    norm: NormSpec
    best_f1: float
    best_epoch: int
    stopped_early: bool = False
    best_path: str | None = None
    best_state: dict = field(default_factory=dict)


def _fg_pool(scenes: Sequence[Scene]) -> list[int]:
    return [i for i, s in enumerate(scenes) if any(s.valid_mask[y, x] for x, y in s.targets)]


def _det_example(cfg: TrainConfig, scenes: Sequence[Scene], scene_idx: int, fg_pool: list[int],
                 cls: int, norm: NormSpec, rng: np.random.Generator, flags: AugmentFlags | None):
    """One (image, heatmap, valid) triple of the requested class."""
    idx = scene_idx
    if cls == FG and idx not in fg_pool:
        idx = fg_pool[int(rng.integers(len(fg_pool)))]
    for attempt in range(len(scenes) + 1):
        try:
            chip = sample_train_chip(scenes[idx], CLASS_NAMES[cls], cfg.chip_size, rng)
            break
        except SamplingError:
            idx = (idx + 1) % len(scenes)
    else:
        raise SamplingError(f"no scene yields a {CLASS_NAMES[cls]} chip")
    if flags is not None:
        chip = augment(chip, rng, flags)
    tm = encode_targets(chip, cfg.heatmap_sigma)
    return norm(chip.raw, chip.valid_mask), tm.heatmap, tm.valid_mask


def _numpy_detection_loss(p: np.ndarray, y: np.ndarray, valid: np.ndarray, cfg: LossConfig) -> float:
    """Unweighted detection loss on probabilities, for validation reporting only."""
    p64 = np.clip(p.astype(np.float64), 1e-7, 1 - 1e-7)
    v = valid.astype(bool)
    n = max(int(v.sum()), 1)
    bce = -(y * np.log(p64) + (1 - y) * np.log(1 - p64))[v].sum() / n
    pv, yv = p64 * v, y * v
    dice = 1.0 - (2 * (pv * yv).sum() + cfg.dice_smooth) / (pv.sum() + yv.sum() + cfg.dice_smooth)
    return cfg.alpha_bce * bce + cfg.beta_dice * dice


def evaluate_detector(model: DetectorModel, scenes: Sequence[Scene], norm: NormSpec, cfg: TrainConfig,
                      pool=None):
    """(precision, recall, f1, val_loss) of the model over full scenes."""
    lcfg = LossConfig(cfg.loss_alpha, cfg.loss_beta)
    preds = [predict_scene(model.probabilities, s, norm, cfg.chip_size, cfg.val_stride, cfg.val_crop, pool)
             for s in scenes]
    dets = [decode_scene(p, cfg.conf, cfg.d_nms, pool) for p in preds]
    tp, fp, fn = _pool_counts(dets, [s.targets for s in scenes], cfg.d_hit)
    losses = []
    for s, p in zip(scenes, preds):
        y = gaussian_heatmap(s.shape, s.targets, cfg.heatmap_sigma)
        losses.append(_numpy_detection_loss(p.heatmap(), y, s.valid_mask, lcfg))
    return (*prf(tp, fp, fn), float(np.mean(losses)) if losses else float("nan"))


def finetune(cfg: TrainConfig, train: Sequence[Scene], val: Sequence[Scene],
             init_state: dict | None = None, out_dir: str | None = None, resume: str | None = None,
             progress: Callable[[dict], None] | None = None, extra_meta: dict | None = None) -> FinetuneResult:
    """Detection fine-tuning with adaptive class sampling and early stopping.

    ``init_state`` is a pretrained state dict whose ``backbone.*`` entries seed
    the detector; ``resume`` points at a ``last.tsar`` written by an earlier,
    interrupted call with the same configuration.
    """
    if cfg.phase != "finetune":
        cfg = replace(cfg, phase="finetune")
    if not train or not val:
        raise ConfigError("fine-tuning needs non-empty train and validation scenes")
    fg_pool = _fg_pool(train)
    if not fg_pool:
        raise SamplingError("no training scene contains a valid target")
    norm = NormSpec.fit(list(train), cfg.normalization, cfg.s_norm, cfg.arctan_scale)
    model = DetectorModel(cfg.backbone_config(), keyed_rng(cfg.seed, _S_INIT))
    if init_state is not None:
        model.load_backbone(init_state)
    elif not cfg.from_scratch:
        raise ConfigError("finetune needs a pretrained state or from_scratch=True")
    opt = Adam(model.named_parameters())
    counts = chip_class_counts(list(train), cfg.chip_size)
    sched = SchedulerState.from_counts(counts, cfg.epochs, cfg.alpha,
                                       cfg.scheduler if cfg.scheduler != "none" else "cosine",
                                       cfg.d_eps, enabled=cfg.scheduler != "none")
    flags = AugmentFlags() if cfg.augment else None
    lcfg = LossConfig(cfg.loss_alpha, cfg.loss_beta)

    reports: list[dict] = []
    schedule: list[dict] = []
    best_f1, best_epoch, bad, start = -1.0, -1, 0, 0
    stopped = False
    if resume:
        meta = load_training_state(resume, model, opt)
        start = meta["epoch"] + 1
        reports, schedule = meta["reports"], meta["schedule"]
        sched.f1_history = list(meta["f1_history"])
        best_f1, best_epoch, bad = meta["best_f1"], meta["best_epoch"], meta["bad_epochs"]
        stopped = meta.get("stopped_early", False)
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    best_path = os.path.join(out_dir, "best.tsar") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    if resume and best_epoch >= 0:
        saved = os.path.join(os.path.dirname(resume), "best.tsar")
        if os.path.exists(saved):
            best_state = {k: v for k, v in ckpt.load_tensors(saved).items() if not k.startswith("adam.")}

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for t in range(start, cfg.epochs):
            if stopped:
                break
            d_target = sched.d_target(t)
            w = sched.loss_weights(t)
            order = keyed_rng(cfg.seed, _S_ORDER, t).permutation(len(train))
            losses, n_fg, n_slots, lr = [], 0, 0, 0.0
            for it in range(cfg.iters_per_epoch):
                classes = sched.compose_batch(t, cfg.batch_size, keyed_rng(cfg.seed, _S_BATCH, t, it))
                scene_idx = int(order[it % len(train)])
                make = lambda slot: _det_example(cfg, train, scene_idx, fg_pool, int(classes[slot]), norm,
                                                 keyed_rng(cfg.seed, _S_CHIP, t, it, slot), flags)
                slots = range(cfg.batch_size)
                ex = list(pool.map(make, slots)) if pool else [make(s) for s in slots]
                imgs, ys, valids = (np.stack(a) for a in zip(*ex))
                logits = model(Tensor(imgs[:, None]))
                loss = detection_loss(logits[:, 0], ys.astype(np.float32), valids,
                                      (float(w[FG]), float(w[BG])), lcfg)
                losses.append(_check_finite(loss, f"epoch {t} iter {it}"))
                model.zero_grad()
                loss.backward()
                lr = lr_schedule(t * cfg.iters_per_epoch + it + 1, cfg.total_steps, cfg.warmup_steps, cfg.lr)
                opt.step(lr)
                n_fg += int(np.sum(classes == FG))
                n_slots += len(classes)

            p, r, f1, vloss = evaluate_detector(model, val, norm, cfg, pool)
            e, gv, hv = sched.components(t)
            schedule.append({"epoch": t, "e(t)": e if sched.enabled else 0.0, "g": gv, "h": hv,
                             "d_target_fg": float(d_target[FG]), "d_target_bg": float(d_target[BG]),
                             "w_fg": float(w[FG]), "w_bg": float(w[BG])})
            sched.record_f1(f1)
            row = {"epoch": t, "train_loss": float(np.mean(losses)), "val_loss": vloss,
                   "precision": p, "recall": r, "f1": f1,
                   "d_target_fg": float(d_target[FG]), "d_target_bg": float(d_target[BG]),
                   "fg_fraction": n_fg / n_slots, "lr": lr}
            reports.append(row)
            if progress:
                progress(row)
            if f1 > best_f1:
                best_f1, best_epoch, bad = f1, t, 0
                best_state = {k: v.copy() for k, v in model.state_dict().items()}
            else:
                bad += 1
            stopped = bad >= cfg.patience
            meta = {"phase": "finetune", "epoch": t, "config": cfg.to_dict(), "norm": asdict(norm),
                    "reports": reports, "schedule": schedule, "f1_history": sched.f1_history,
                    "best_f1": best_f1, "best_epoch": best_epoch, "bad_epochs": bad,
                    "stopped_early": stopped, **(extra_meta or {})}
            if out_dir:
                if best_epoch == t:
                    save_training_state(best_path, model, opt, meta)
                save_training_state(os.path.join(out_dir, "last.tsar"), model, opt, meta)
    finally:
        if pool:
            pool.shutdown()
    return FinetuneResult(model, reports, schedule, norm, best_f1, best_epoch, stopped,
                          best_path if out_dir and best_epoch >= 0 else None, best_state)
