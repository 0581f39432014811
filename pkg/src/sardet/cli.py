"""Command-line entry point: ``sardet <command> [options]``.

Commands: synth, pretrain, finetune, eval, infer, sweep.  Runs write to
``<runs>/<name>/{checkpoints,reports,plots,manifest}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/corrupt scenes or checkpoints), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from .decoder import write_detections_csv
from .inference import decode_scene, predict_scene
from .metrics import SWEEP_AXES, ap_table, sensitivity_sweep, sweep_grid, write_rows_csv
from .models import DetectorModel
from .pipeline import NormSpec, SamplingError
from .plots import line_chart
from .scheduler import write_schedule_csv
from .synth import (BENCHMARK, TEXTURED, GenerationError, SceneIOError, SynthConfig, generate_dataset,
                    list_scenes, load_scene, save_scene)
from .tensor.core import ConfigError
from .trainer import (NumericalError, TrainConfig, finetune, keyed_rng, load_training_state, pretrain,
                      split_indices, write_report_csv)

log = logging.getLogger("sardet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_DIRS = ("checkpoints", "reports", "plots", "manifest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers -------------------------------------------------------------------
def run_dirs(args) -> dict[str, str]:
    root = os.path.join(args.runs, args.name)
    out = {"root": root}
    for d in RUN_DIRS:
        out[d] = os.path.join(root, d)
        os.makedirs(out[d], exist_ok=True)
    return out


def content_hash(paths: list[str]) -> str:
    """sha256 over (basename, bytes) of each file, in the given order."""
    h = hashlib.sha256()
    for p in paths:
        h.update(os.path.basename(p).encode())
        h.update(b"\0")
        with open(p, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def scene_files(stem: str) -> list[str]:
    return [f"{stem}.pgm", f"{stem}_mask.pgm", f"{stem}.csv"]


def write_manifest(dirs: dict, command: str, resolved: dict, seed: int, inputs: list[str]) -> str:
    manifest = {
        "command": command,
        "config": resolved,
        "seed": seed,
        "inputs_sha256": content_hash(inputs),
        "n_inputs": len(inputs),
        "layout": {d: os.path.relpath(dirs[d], dirs["root"]) for d in RUN_DIRS},
    }
    path = os.path.join(dirs["manifest"], f"{command}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_dataset(data_dir: str):
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    stems = list_scenes(data_dir)
    if not stems:
        raise FileNotFoundError(f"no scenes (*.pgm with annotations) in {data_dir}")
    return stems, [load_scene(s) for s in stems]


def _ini(args):
    return cfgmod.read_ini(args.config) if getattr(args, "config", None) else None


def train_config(args, phase: str, **fixed) -> TrainConfig:
    cli = {k: getattr(args, k, None) for k in
           ("epochs", "iters_per_epoch", "batch_size", "lr_peak", "warmup_epochs", "patience", "scheduler",
            "alpha", "normalization", "mask_size", "mask_ratio", "heatmap_sigma", "backbone", "chip_size",
            "conf", "d_nms", "d_hit")}
    cli["seed"] = args.seed
    cli["threads"] = args.threads
    file_vals = cfgmod.train_overrides(_ini(args))
    return cfgmod.resolve(TrainConfig, file_vals, cli, phase=phase, **fixed)


def load_detector(path: str) -> tuple[DetectorModel, NormSpec, TrainConfig, dict]:
    meta = ckpt.load_meta(path)
    if meta.get("phase") != "finetune":
        raise ckpt.CheckpointError(f"{path}: not a fine-tuned detector checkpoint (phase={meta.get('phase')!r})")
    cfg = TrainConfig.from_dict(meta["config"])
    model = DetectorModel(cfg.backbone_config(), keyed_rng(cfg.seed, 1))
    load_training_state(path, model)
    return model, NormSpec(**meta["norm"]), cfg, meta


def _pool(args):
    return ThreadPoolExecutor(args.threads) if args.threads > 1 else None


# -- commands ------------------------------------------------------------------------
def cmd_synth(args) -> int:
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    base = {"benchmark": BENCHMARK, "textured": TEXTURED, "speckle": SynthConfig()}[args.preset]
    over = cfgmod.synth_overrides(_ini(args))
    if args.size is not None:
        over["size"] = args.size
    cfg = replace(base, **over)
    os.makedirs(args.out, exist_ok=True)
    for i, scene in enumerate(generate_dataset(cfg, args.scenes, args.seed)):
        save_scene(scene, os.path.join(args.out, f"scene_{i:04d}"))
    with open(os.path.join(args.out, "synth.json"), "w") as fh:
        json.dump({"seed": args.seed, "scenes": args.scenes, "config": asdict(cfg)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.scenes} scenes to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = train_config(args, "pretrain")
    stems, scenes = load_dataset(args.data)
    dirs = run_dirs(args)
    inputs = [f for s in stems for f in scene_files(s)]
    write_manifest(dirs, "pretrain", cfg.to_dict(), cfg.seed, inputs)
    res = pretrain(cfg, scenes, dirs["checkpoints"], progress=_progress(args),
                   extra_meta={"scenes": [os.path.basename(s) for s in stems]})
    write_report_csv(os.path.join(dirs["reports"], "pretrain_epochs.csv"), res.reports)
    line_chart(os.path.join(dirs["plots"], "pretrain_loss.svg"),
               [("val masked L1", [r["epoch"] for r in res.reports], [r["val_loss"] for r in res.reports]),
                ("train masked L1", [r["epoch"] for r in res.reports], [r["train_loss"] for r in res.reports])],
               "Masked-image pretraining", "epoch", "L1")
    first, last = res.reports[0]["val_loss"], res.reports[-1]["val_loss"]
    print(f"pretraining done: val masked L1 {first:.4f} -> {last:.4f}; checkpoints in {dirs['checkpoints']}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    if not args.checkpoint and not args.from_scratch:
        raise UsageError("finetune needs --checkpoint PRETRAINED.tsar or --from-scratch")
    init_state = None
    inputs_extra = []
    if args.checkpoint:
        state = ckpt.load_tensors(args.checkpoint)
        init_state = {k: v for k, v in state.items() if k.startswith("backbone.")}
        if not init_state:
            raise ckpt.CheckpointError(f"{args.checkpoint}: no backbone tensors found")
        inputs_extra.append(args.checkpoint)
    cfg = train_config(args, "finetune", from_scratch=bool(args.from_scratch),
                       init_checkpoint=os.path.basename(args.checkpoint) if args.checkpoint else None)
    stems, scenes = load_dataset(args.data)
    if len(scenes) < 3:
        raise SamplingError("fine-tuning needs at least 3 scenes for train/val/test splits")
    tr, va, te = split_indices(len(scenes), (0.8, 0.1, 0.1), cfg.seed)
    if not va or not te:
        raise SamplingError(f"{len(scenes)} scenes are too few for an 80/10/10 split")
    names = [os.path.basename(s) for s in stems]
    splits = {"train": [names[i] for i in tr], "val": [names[i] for i in va], "test": [names[i] for i in te]}
    dirs = run_dirs(args)
    inputs = [f for s in stems for f in scene_files(s)] + inputs_extra
    write_manifest(dirs, "finetune", cfg.to_dict(), cfg.seed, inputs)
    res = finetune(cfg, [scenes[i] for i in tr], [scenes[i] for i in va], init_state, dirs["checkpoints"],
                   resume=args.resume, progress=_progress(args), extra_meta={"splits": splits})
    write_report_csv(os.path.join(dirs["reports"], "finetune_epochs.csv"), res.reports)
    write_schedule_csv(os.path.join(dirs["reports"], "schedule.csv"), res.schedule)
    ep = [r["epoch"] for r in res.reports]
    line_chart(os.path.join(dirs["plots"], "finetune_f1.svg"),
               [("val F1", ep, [r["f1"] for r in res.reports]),
                ("val precision", ep, [r["precision"] for r in res.reports]),
                ("val recall", ep, [r["recall"] for r in res.reports])],
               "Fine-tuning validation", "epoch", "score")
    line_chart(os.path.join(dirs["plots"], "sampling.svg"),
               [("foreground share", ep, [r["d_target_fg"] for r in res.reports]),
                ("background share", ep, [r["d_target_bg"] for r in res.reports])],
               "Target class distribution", "epoch", "fraction")
    print(f"fine-tuning done: best val F1 {res.best_f1:.4f} at epoch {res.best_epoch}"
          f"{' (early stop)' if res.stopped_early else ''}; checkpoints in {dirs['checkpoints']}")
    return EXIT_OK


def _eval_scenes(args, meta: dict):
    stems, scenes = load_dataset(args.data)
    names = [os.path.basename(s) for s in stems]
    if args.split == "all":
        return stems, scenes
    wanted = meta.get("splits", {}).get(args.split)
    if wanted is None:
        raise UsageError(f"checkpoint records no {args.split!r} split; use --split all")
    idx = [names.index(n) for n in wanted if n in names]
    if len(idx) != len(wanted):
        raise FileNotFoundError(f"{len(wanted) - len(idx)} {args.split} scenes missing from {args.data}")
    return [stems[i] for i in idx], [scenes[i] for i in idx]


def _predict_all(args, model, norm, cfg, scenes, pool):
    return [predict_scene(model.probabilities, s, norm, cfg.chip_size, cfg.val_stride, cfg.val_crop, pool)
            for s in scenes]


def cmd_eval(args) -> int:
    model, norm, cfg, meta = load_detector(args.checkpoint)
    stems, scenes = _eval_scenes(args, meta)
    dirs = run_dirs(args)
    resolved = {"d_hit": args.d_hit, "d_nms": args.d_nms, "conf": args.conf, "split": args.split,
                "checkpoint": os.path.basename(args.checkpoint)}
    write_manifest(dirs, "eval", resolved, args.seed, [f for s in stems for f in scene_files(s)] + [args.checkpoint])
    pool = _pool(args)
    try:
        preds = _predict_all(args, model, norm, cfg, scenes, pool)
        report = ap_table(preds, d_hit=args.d_hit, d_nms=args.d_nms, pool=pool)
        at_c = [decode_scene(p, args.conf, args.d_nms, pool) for p in preds]
    finally:
        if pool:
            pool.shutdown()
    report.write_csv(os.path.join(dirs["reports"], "eval_table.csv"))
    report.write_summary_csv(os.path.join(dirs["reports"], "eval_summary.csv"))
    from .metrics import _row
    row = _row(args.conf, at_c, [p.targets for p in preds], args.d_hit)
    line_chart(os.path.join(dirs["plots"], "eval_pr.svg"),
               [("precision", [r.tau for r in report.rows], [r.precision for r in report.rows]),
                ("recall", [r.tau for r in report.rows], [r.recall for r in report.rows]),
                ("F1", [r.tau for r in report.rows], [r.f1 for r in report.rows])],
               "Scores versus confidence threshold", "threshold", "score")
    s = report.summary()
    print(f"AP25 {s['AP25']:.4f}  AP50 {s['AP50']:.4f}  AP75 {s['AP75']:.4f}  mAP {s['mAP']:.4f}")
    print(f"best F1 {s['best_f1']:.4f} (P {s['best_precision']:.4f}, R {s['best_recall']:.4f}) at tau {s['best_tau']:.2f}")
    print(f"at c={args.conf:g}: P {row.precision:.4f}  R {row.recall:.4f}  F1 {row.f1:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model, norm, cfg, _ = load_detector(args.checkpoint)
    if args.scene:
        stems = [args.scene[:-4] if args.scene.endswith(".pgm") else args.scene]
    elif args.data:
        stems = list_scenes(args.data)
        if not stems:
            raise FileNotFoundError(f"no scenes in {args.data}")
    else:
        raise UsageError("infer needs --scene STEM or --data DIR")
    os.makedirs(args.out, exist_ok=True)
    pool = _pool(args)
    try:
        for stem in stems:
            scene = load_scene(stem)
            pred = predict_scene(model.probabilities, scene, norm, cfg.chip_size, cfg.val_stride, cfg.val_crop, pool)
            dets = decode_scene(pred, args.conf, args.d_nms, pool)
            out = os.path.join(args.out, os.path.basename(stem) + "_detections.csv")
            write_detections_csv(out, dets)
            print(f"{os.path.basename(stem)}: {len(dets)} detections -> {out}")
    finally:
        if pool:
            pool.shutdown()
    return EXIT_OK


def cmd_sweep(args) -> int:
    model, norm, cfg, meta = load_detector(args.checkpoint)
    stems, scenes = _eval_scenes(args, meta)
    dirs = run_dirs(args)
    axes = SWEEP_AXES if args.axis == "all" else (args.axis,)
    write_manifest(dirs, "sweep", {"axes": list(axes), "split": args.split, "d_hit": args.d_hit,
                                   "d_nms": args.d_nms, "conf": args.conf},
                   args.seed, [f for s in stems for f in scene_files(s)] + [args.checkpoint])
    pool = _pool(args)
    try:
        preds = _predict_all(args, model, norm, cfg, scenes, pool)
        for axis in axes:
            rows = sensitivity_sweep(preds, axis, sweep_grid(axis), c=args.conf, d_nms=args.d_nms,
                                     d_hit=args.d_hit, pool=pool)
            write_rows_csv(os.path.join(dirs["reports"], f"sweep_{axis}.csv"), rows, axis)
            line_chart(os.path.join(dirs["plots"], f"sweep_{axis}.svg"),
                       [("precision", [r.tau for r in rows], [r.precision for r in rows]),
                        ("recall", [r.tau for r in rows], [r.recall for r in rows])],
                       f"Sensitivity to {axis}", axis, "score", logx=(axis == "d_hit"))
            line_chart(os.path.join(dirs["plots"], f"sweep_{axis}_pr.svg"),
                       [(axis, [r.recall for r in rows], [r.precision for r in rows])],
                       f"Precision-recall over {axis}", "recall", "precision")
            print(f"{axis}: {len(rows)} points -> {os.path.join(dirs['reports'], f'sweep_{axis}.csv')}")
    finally:
        if pool:
            pool.shutdown()
    return EXIT_OK


def _progress(args):
    if args.quiet:
        return None

    def show(row):
        parts = [f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()]
        print("  " + " ".join(parts), flush=True)
    return show


# -- parser --------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for data preparation and decoding (default: logical cores)")
    common.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")

    runs = argparse.ArgumentParser(add_help=False)
    runs.add_argument("--runs", default="runs", help="root output directory (default runs)")
    runs.add_argument("--name", default="default", help="run name; outputs go to <runs>/<name>")
    runs.add_argument("--config", help="INI file with [backbone] [pipeline] [scheduler] [loss] [trainer] "
                                       "[decoder] [metrics] sections")

    train = argparse.ArgumentParser(add_help=False)
    train.add_argument("--data", required=True, help="directory of scenes written by 'synth'")
    train.add_argument("--epochs", type=int)
    train.add_argument("--iters-per-epoch", dest="iters_per_epoch", type=int)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--lr", dest="lr_peak", type=float, help="peak learning rate")
    train.add_argument("--warmup-epochs", dest="warmup_epochs", type=float)
    train.add_argument("--backbone", choices=("nano", "tiny", "medium", "large"))
    train.add_argument("--chip-size", dest="chip_size", type=int)
    train.add_argument("--normalization", choices=("log", "linear", "arctan"))

    evalp = argparse.ArgumentParser(add_help=False)
    evalp.add_argument("--d-hit", dest="d_hit", type=float, default=45.0, help="hit distance in px (default 45)")
    evalp.add_argument("--d-nms", dest="d_nms", type=float, default=23.0, help="NMS distance in px (default 23)")
    evalp.add_argument("--conf", type=float, default=0.5, help="decoding confidence (default 0.5)")

    p = _Parser(prog="sardet", description="Point-object detection in SAR scenes with a windowed transformer.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, required=True)
    s.add_argument("--size", type=int)
    s.add_argument("--preset", choices=("benchmark", "textured", "speckle"), default="benchmark",
                   help="'benchmark': 640px scenes, one target each; 'textured': the same over "
                        "reflectivity texture; 'speckle': the generic generator defaults")
    s.add_argument("--config", help="INI file with a [synth] section")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common, runs, train], help="masked-image pretraining")
    s.add_argument("--mask-size", dest="mask_size", type=int, help="mask block side in pixels (default 8)")
    s.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common, runs, train], help="detection fine-tuning")
    s.add_argument("--checkpoint", help="pretrained checkpoint whose backbone initialises the detector")
    s.add_argument("--from-scratch", action="store_true", help="train without pretraining")
    s.add_argument("--resume", help="continue from a last.tsar written by an interrupted run")
    s.add_argument("--scheduler", choices=("none", "linear", "cosine", "exponential"))
    s.add_argument("--alpha", type=float, help="weight of the curriculum term (default 0.8)")
    s.add_argument("--patience", type=int)
    s.add_argument("--heatmap-sigma", dest="heatmap_sigma", type=float)
    s.add_argument("--conf", type=float)
    s.add_argument("--d-nms", dest="d_nms", type=float)
    s.add_argument("--d-hit", dest="d_hit", type=float)
    s.set_defaults(func=cmd_finetune)

    for name, fn, hlp in (("eval", cmd_eval, "threshold table, AP and mAP"),
                          ("sweep", cmd_sweep, "sensitivity sweeps over d_nms, confidence or d_hit")):
        s = sub.add_parser(name, parents=[common, runs, evalp], help=hlp)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
        if name == "sweep":
            s.add_argument("--axis", choices=SWEEP_AXES + ("all",), default="all")
        s.set_defaults(func=fn)

    s = sub.add_parser("infer", parents=[common, evalp], help="write detections CSVs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scene", help="scene stem or .pgm path")
    s.add_argument("--data", help="directory of scenes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"sardet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, SceneIOError, ckpt.CheckpointError, GenerationError, SamplingError) as e:
        print(f"sardet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"sardet: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
