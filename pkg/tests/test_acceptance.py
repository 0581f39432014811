"""Acceptance criteria A1-A10.

Each test prints one ``A<n> PASS|FAIL: ...`` line (visible even under
output capture) before asserting.  A3 and A4 train real models and take
several minutes; everything else runs in seconds.
"""

import statistics
import time
import zlib
from dataclasses import replace

import numpy as np
import pytest

from sardet.backbone import Backbone, BackboneConfig
from sardet.decoder import DEFAULT_NMS, decode
from sardet.inference import CountingPredictor, predict_scene
from sardet.loss import LossConfig, detection_loss
from sardet.metrics import TAUS, EvalReport, ap_table, match, pr_at_threshold, sensitivity_sweep
from sardet.pipeline import Chip, NormSpec, encode_targets, normalize, scale_intensity
from sardet.scheduler import G_KINDS, SchedulerState, g
from sardet.synth import BENCHMARK, TEXTURED, Scene, generate_dataset
from sardet.tensor import Tensor
from sardet.tensor.gradcheck import check_gradients
from sardet.trainer import TrainConfig, finetune, pretrain

from test_metrics import optimal_tp, rand_instance
from test_tensor import GRAD_CASES


@pytest.fixture
def verdict(capsys):
    def report(name: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return report


def test_a1_gradient_integrity(verdict):
    t0 = time.time()
    worst = {}
    for name, (fn, shapes) in GRAD_CASES.items():
        rng = np.random.default_rng(zlib.crc32(b"A1" + name.encode()))
        worst[name] = max(check_gradients(fn, [rng.uniform(-2, 2, s) for s in shapes]) for _ in range(20))
    rng = np.random.default_rng(11)
    errs = []
    for _ in range(20):
        z = rng.normal(0, 1.5, (2, 1, 6, 6))
        y = np.clip(rng.random(z.shape) * 1.6 - 0.4, 0, 1)
        valid = rng.random(z.shape) > 0.2
        w = tuple(rng.uniform(1, 4, 2))
        errs.append(check_gradients(lambda t: detection_loss(t, y, valid, w, LossConfig()), [z]))
    worst["detection_loss"] = max(errs)
    top = max(worst, key=worst.get)
    dt = time.time() - t0
    verdict("A1", worst[top] < 1e-4 and dt < 60,
            f"{len(worst)} checks x 20 instances, max rel err {worst[top]:.2e} ({top}), {dt:.1f}s")


def test_a2_scheduler_algebra(verdict):
    T = 100
    problems = []
    for kind in G_KINDS:
        for f1 in (np.zeros(T), np.linspace(0, 1, T), np.random.default_rng(0).random(T)):
            s = SchedulerState.from_counts((1, 99), T=T, kind=kind)
            s.f1_history = list(f1)
            for t in range(T + 1):
                d = s.d_target(t)
                if abs(d.sum() - 1) > 1e-9:
                    problems.append(f"sum {kind} t={t}")
                if (s.loss_weights(t) < 1).any():
                    problems.append(f"w<1 {kind} t={t}")
                if s.exponent(t) > 0 and np.argmax(d) != np.argmax(s.d_train):
                    problems.append(f"argmax {kind} t={t}")
    zero = SchedulerState(np.array([0.01, 0.99]), T=T, alpha=0.0, f1_history=[1.0])
    if zero.exponent(1) != 0 or not np.array_equal(zero.d_target(1), [0.5, 0.5]):
        problems.append("e=0 not uniform")
    if (g(0, T), g(T // 2, T), g(T, T)) != (1.0, pytest.approx(0.5, abs=1e-15), pytest.approx(0.0, abs=1e-15)):
        problems.append("cosine endpoints")
    verdict("A2", not problems, "all algebra checks hold for t=0..100" if not problems else "; ".join(problems[:5]))


A3_CFG = TrainConfig(phase="pretrain", backbone="nano", epochs=5, iters_per_epoch=200, batch_size=8,
                     warmup_epochs=0.5, seed=0)


def test_a3_mim_learns(verdict):
    t0 = time.time()
    scenes = generate_dataset(TEXTURED, 50, master_seed=0)
    res = pretrain(A3_CFG, scenes)
    first, last = res.reports[0]["val_loss"], min(r["val_loss"] for r in res.reports[1:])
    drop = 1 - last / first
    dt = time.time() - t0
    verdict("A3", drop >= 0.5 and dt < 600,
            f"masked L1 {first:.4f} -> {last:.4f} ({drop:.1%} reduction), {dt:.0f}s")


def a4_config(scheduler: str, seed: int) -> TrainConfig:
    # desk-scale settings; see the decisions ledger for how they were chosen
    return TrainConfig(epochs=12, iters_per_epoch=150, warmup_epochs=0.5, from_scratch=True,
                       scheduler=scheduler, seed=seed, heatmap_sigma=3.0, lr_peak=4e-3, loss_alpha=1.0,
                       patience=12)


def test_a4_adaptive_sampling_helps(verdict):
    t0 = time.time()
    scenes = generate_dataset(BENCHMARK, 50, master_seed=0)
    train, val, test = scenes[:40], scenes[40:45], scenes[45:]
    f1 = {"cosine": [], "none": []}
    for seed in (0, 1, 2):
        for arm in f1:
            res = finetune(a4_config(arm, seed), train, val)
            res.model.load_state_dict(res.best_state)
            preds = [predict_scene(res.model.probabilities, s, res.norm) for s in test]
            f1[arm].append(ap_table(preds).best.f1)
    med = {k: statistics.median(v) for k, v in f1.items()}
    dt = time.time() - t0
    detail = (f"median test best-F1 cosine {med['cosine']:.3f} vs none {med['none']:.3f} "
              f"(per seed {[round(v, 3) for v in f1['cosine']]} vs {[round(v, 3) for v in f1['none']]}), {dt:.0f}s")
    verdict("A4", med["cosine"] - med["none"] >= 0 and dt < 1800, detail)


def test_a5_decoder_correctness(verdict):
    t0 = time.time()
    rng = np.random.default_rng(5)
    bad = 0
    configs = 0
    for sigma in (1.0, 2.0, 3.0, 5.0, 10.0):
        sep = max(6 * sigma, DEFAULT_NMS)
        for _ in range(40):
            pts = []
            for _ in range(200):
                p = tuple(int(v) for v in rng.integers(0, 160, 2))
                if all(np.hypot(p[0] - q[0], p[1] - q[1]) > sep for q in pts):
                    pts.append(p)
                if len(pts) == 6:
                    break
            chip = Chip(np.ones((160, 160), np.uint16), np.ones((160, 160), bool), pts)
            got = sorted((int(d.x), int(d.y)) for d in decode(encode_targets(chip, sigma).heatmap, 0.5, DEFAULT_NMS))
            bad += got != sorted(pts)
            configs += 1
    too_close = 0
    for _ in range(1000):
        d_nms = float(rng.uniform(0, 15))
        dets = decode(rng.random((40, 40)) ** 2, float(rng.uniform(0, 0.9)), d_nms)
        pts = np.array([(d.x, d.y) for d in dets]).reshape(-1, 2)
        if len(pts) > 1:
            dist = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))[np.triu_indices(len(pts), 1)]
            too_close += int((dist < d_nms).any())
    dt = time.time() - t0
    verdict("A5", bad == 0 and too_close == 0 and dt < 60,
            f"{configs} round trips ({bad} wrong), 1000 fuzzed heatmaps ({too_close} spacing violations), {dt:.1f}s")


def test_a6_metric_oracle(verdict):
    t0 = time.time()
    rng = np.random.default_rng(6)
    broken = 0
    for _ in range(10_000):
        nd, ng = (int(v) for v in rng.integers(0, 12, 2))
        dets, gts = rand_instance(rng, nd, ng)
        m = match(dets, gts, float(rng.uniform(1, 80)))
        ok = (m.tp + m.fn == ng and m.tp + m.fp == nd and len({i for i, _ in m.pairs}) == m.tp
              and len({j for _, j in m.pairs}) == m.tp)
        broken += not ok
    agree = 0
    trials = 2000
    for _ in range(trials):
        dets, gts = rand_instance(rng, int(rng.integers(0, 7)), int(rng.integers(0, 7)))
        d_hit = float(rng.uniform(5, 60))
        agree += match(dets, gts, d_hit).tp == optimal_tp(dets, gts, d_hit)
    det_lists = [rand_instance(rng, 8, 0)[0] for _ in range(4)]
    gt_lists = [rand_instance(rng, 0, 5)[1] for _ in range(4)]
    rep = EvalReport([pr_at_threshold(det_lists, gt_lists, t) for t in TAUS], 45.0, 23.0)
    exact = len(rep.rows) == 19 and rep.map == np.mean([r.precision for r in rep.rows])
    dt = time.time() - t0
    verdict("A6", broken == 0 and agree / trials >= 0.95 and exact and dt < 120,
            f"identities broken {broken}/10000, greedy=optimal {agree / trials:.1%}, mAP exact {exact}, {dt:.1f}s")


def test_a7_normalisation(verdict):
    top = float(scale_intensity(np.array([65535]))[0])
    raw = np.random.default_rng(7).integers(0, 65536, (64, 64)).astype(np.uint16)
    mean = abs(float(normalize(raw, "log", 16.0, 0.21).astype(np.float64).mean()))
    verdict("A7", abs(np.log2(65535) / 16 - 1) < 1e-3 and abs(top - 1) < 1e-3 and mean < 1e-5,
            f"log2(65535)/16 = {top:.6f}, centred chip mean {mean:.1e}")


def test_a8_config_fidelity(verdict):
    n = Backbone(BackboneConfig.preset("tiny", 512), np.random.default_rng(0)).num_parameters()
    shapes_ok = True
    for name in ("tiny", "medium", "large"):
        cfg = BackboneConfig.preset(name, 512)
        shapes_ok &= cfg.stage_sides() == [128, 64, 32, 16]
        shapes_ok &= cfg.stage_dims() == [cfg.embed_dim * 2 ** s for s in range(4)]
        small = replace(cfg, image_size=64, depths=(1, 1, 1, 1))
        pyr = Backbone(small, np.random.default_rng(0))(Tensor(np.zeros((1, 1, 64, 64))))
        shapes_ok &= [tuple(pyr.grid(s).shape) for s in range(4)] == \
            [(1, cfg.embed_dim * 2 ** s, 16 >> s, 16 >> s) for s in range(4)]
    rel = abs(n - 27e6) / 27e6
    verdict("A8", rel < 0.05 and shapes_ok, f"tiny@512 has {n / 1e6:.2f} M parameters ({rel:.1%} from 27 M), "
                                           f"stage halving contract {'holds' if shapes_ok else 'broken'}")


def test_a9_sensitivity_sweeps(verdict):
    rng = np.random.default_rng(9)
    scenes = [Scene(np.full((192, 192), 100, np.uint16),
                    [tuple(int(v) for v in rng.integers(10, 180, 2)) for _ in range(4)],
                    np.ones((192, 192), bool)) for _ in range(3)]
    cap = np.nextafter(np.float32(1), np.float32(0))
    counter = CountingPredictor(lambda imgs: np.minimum(np.random.default_rng(1).random(imgs.shape) ** 6, cap))
    preds = [predict_scene(counter, s, NormSpec(sigma_g=1.0)) for s in scenes]
    calls = counter.calls
    hit = sensitivity_sweep(preds, "d_hit")
    rec = [r.recall for r in hit]
    conf = sensitivity_sweep(preds, "confidence")
    last = conf[-1]
    ok = (counter.calls == calls and all(b >= a for a, b in zip(rec, rec[1:]))
          and (last.tau, last.precision, last.recall) == (1.0, 1.0, 0.0))
    verdict("A9", ok, f"model calls during sweeps {counter.calls - calls}, recall {rec[0]:.2f}->{rec[-1]:.2f} "
                      f"monotone, confidence=1 gives P={last.precision} R={last.recall}")


def test_a10_reproducibility(verdict, tmp_path):
    from sardet.cli import main

    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--scenes", "10", "--seed", "3", "--size", "192"]) == 0
    args = ["finetune", "--data", str(data), "--runs", str(tmp_path), "--from-scratch", "--epochs", "2",
            "--iters-per-epoch", "3", "--batch-size", "4", "--warmup-epochs", "0.5", "--quiet"]
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        assert main(args + ["--name", name, "--threads", threads]) == 0
    diffs = []
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for rel in files:
        for other in ("b", "c"):
            if (tmp_path / "a" / rel).read_bytes() != (tmp_path / other / rel).read_bytes():
                diffs.append(f"{other}/{rel}")
    verdict("A10", not diffs and len(files) > 5,
            f"{len(files)} output files identical across runs and --threads 1/4" if not diffs
            else f"differences: {diffs}")
