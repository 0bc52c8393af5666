"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criterion 9 trains the default desk model for 2000 steps and takes roughly
20 minutes on one CPU core.
"""

import csv
import hashlib
import itertools
import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from ps3 import cli
from ps3 import datagen as D
from ps3 import harness as H
from ps3 import pretrain as PT
from ps3 import tensor as T
from ps3.encoder import EncoderConfig, PS3Encoder, SelectionSet, allocate_k, build_pyramid
from ps3.tensor import Tensor, precision


@pytest.fixture
def report(capsys):
    def emit(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc")
    index = D.synth_dataset(root, 24, D.SceneSpec(seed=11))
    return index, D.read_dataset(index)


def _pyramids(index, samples, enc):
    return [build_pyramid(D.load_image(index, s.record), enc) for s in samples]


# ---------------------------------------------------------------------------


def test_c01_token_accounting(report):
    got = [H.count_tokens(EncoderConfig.full_profile(756)).hr_tokens,
           H.count_tokens(EncoderConfig.full_profile(1512)).hr_tokens]
    cfg = EncoderConfig.full_profile(3780)
    got.append(H.count_tokens(cfg, allocate_k(15360, cfg.cells)).hr_tokens)
    report(1, "token accounting", got == [729, 3645, 3840], f"HR tokens {got}, expected [729, 3645, 3840]")


def test_c02_constant_stage3_cost(report):
    base = EncoderConfig()
    flops = {}
    for ladder in ([2], [2, 4]):
        for k in (64, 200, 320):
            flops[(tuple(ladder), k)] = H.flop_estimate(base.with_scales(ladder), k)["stage3"]
    same = all(flops[((2,), k)] == flops[((2, 4), k)] for k in (64, 200, 320))
    report(2, "constant Stage-3 cost", same,
           ", ".join(f"k={k}: {flops[((2,), k)]} vs {flops[((2, 4), k)]}" for k in (64, 200, 320)))


def test_c03_total_loss_gradient(report, small_dataset):
    index, recs = small_dataset
    r0, r1 = recs[0], recs[1]
    samples = [PT.Sample(0, r0.global_region, "global", r0), PT.Sample(1, r1.local_regions[0], "local", r1)]
    enc = EncoderConfig()
    t0 = time.perf_counter()
    with precision(64):
        model = PS3Encoder(enc).astype(np.float64)
        pyrs = _pyramids(index, samples, enc)
        cfg = PT.TrainConfig()
        err = T.grad_check(lambda: PT.batch_loss(model, samples, pyrs, cfg).loss, model.parameters(),
                           epsilon=1e-4, max_coords=3, seed=1)
    dt = time.perf_counter() - t0
    report(3, "gradient integrity", err < 1e-4 and dt < 300,
           f"max relative error {err:.2e} over {len(model.parameters())} tensors in {dt:.0f} s")


def test_c04_teacher_forcing_recall(report):
    enc = EncoderConfig()
    rng = np.random.default_rng(4)
    recalls = []
    while len(recalls) < 200:
        spec = D.SceneSpec(seed=int(rng.integers(1 << 30)), layout=str(rng.choice(["natural", "document"])))
        _, rec = D.synth_scene(spec)
        for region in rec.local_regions:
            gt = PT.ground_truth_score_map(region, rec.width, rec.height, enc.grids)
            k = [int(m.sum()) for m in gt.maps]
            sel, _ = PT.local_selection(gt, None, k, True, True)
            r = H.recall_eval(sel, [region.box], enc.grids, rec.width, rec.height)
            if r is not None:
                recalls.append(r)
    recalls = recalls[:200]
    report(4, "teacher-forcing recall", all(r == 1.0 for r in recalls),
           f"min recall {min(recalls)} over {len(recalls)} regions")


def test_c05_inbox_pooling_locality(report, small_dataset):
    index, recs = small_dataset
    enc = EncoderConfig()
    model = PS3Encoder(enc)
    rng = np.random.default_rng(5)
    toks = rng.normal(size=(40, enc.embed_dim)).astype(np.float32)
    keep = rng.uniform(size=40) < 0.4
    a = model.attention_pool(Tensor(toks), keep).data
    toks[~keep] = rng.normal(scale=50, size=(int((~keep).sum()), enc.embed_dim))
    token_ok = a.tobytes() == model.attention_pool(Tensor(toks), keep).data.tobytes()

    rec = recs[0]
    region = D.Region((64, 64, 160, 128), rec.local_regions[0].caption)
    sample = PT.Sample(0, region, "local", rec)
    gt = PT.ground_truth_score_map(region, rec.width, rec.height, enc.grids)
    k = [int(m.sum()) for m in gt.maps]
    pyr = build_pyramid(D.load_image(index, rec), enc)
    cfg = PT.TrainConfig()
    before = PT.batch_loss(model, [sample], [pyr], cfg, k_per_sample=[k])
    fine = pyr.scales[-1].copy()
    outside = np.ones(fine.shape[:2], dtype=bool)
    outside[64:128, 64:160] = False
    fine[outside] = rng.uniform(size=(int(outside.sum()), 3))
    after = PT.batch_loss(model, [sample], [replace(pyr, scales=[pyr.scales[0], fine], _patch_cache={})], cfg,
                          k_per_sample=[k])
    delta = abs(float(before.contrastive.data) - float(after.contrastive.data))
    report(5, "in-box pooling locality", token_ok and delta <= 1e-6,
           f"masked-token pooling bit-identical={token_ok}, contrastive change {delta:.1e}")


def _contrastive_oracle(x, y, t_prime, b):
    n = len(x)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    y = y / np.linalg.norm(y, axis=1, keepdims=True)
    total = 0.0
    for i in range(n):
        for j in range(n):
            u = (1.0 if i == j else -1.0) * (math.exp(t_prime) * float(np.dot(x[i], y[j])) + b)
            total += math.log1p(math.exp(-u))
    return total / n


def _selection_oracle(scores, gts):
    bce_sum = dice_sum = 0.0
    for s, g in zip(scores, gts):
        n = s.size
        bce = inter = psum = gsum = 0.0
        for v, t in zip(s.ravel(), g.ravel()):
            p = (v + 1) / 2
            pc = min(max(p, 1e-7), 1 - 1e-7)
            bce -= t * math.log(pc) + (1 - t) * math.log(1 - pc)
            inter += p * t
            psum += p
            gsum += t
        bce_sum += bce / n
        dice_sum += 1 - (2 * inter + 1) / (psum + gsum + 1)
    return bce_sum / len(scores), dice_sum / len(scores)


def test_c06_loss_oracles(report):
    rng = np.random.default_rng(6)
    worst_c = worst_s = 0.0
    with precision(64):
        for _ in range(100):
            n, d = int(rng.integers(1, 17)), int(rng.integers(2, 12))
            x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
            tp, b = rng.uniform(-1, 3), rng.uniform(-12, 2)
            got = float(PT.sigmoid_contrastive_loss(Tensor(x), Tensor(y), Tensor(tp), Tensor(b)).data)
            worst_c = max(worst_c, abs(got - _contrastive_oracle(x, y, tp, b)))
        for _ in range(100):
            scores, gts = [], []
            for _ in range(int(rng.integers(1, 4))):
                g = int(rng.integers(1, 33))
                scores.append(rng.uniform(-1, 1, size=(g, g)))
                gts.append((rng.uniform(size=(g, g)) < rng.uniform(0.05, 0.6)).astype(float))
            bce, dice = PT.selection_loss([Tensor(s) for s in scores], gts)
            rb, rd = _selection_oracle(scores, gts)
            worst_s = max(worst_s, abs(float(bce.data) - rb), abs(float(dice.data) - rd))
        zero = Tensor([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
        other = Tensor([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        closed = float(PT.sigmoid_contrastive_loss(zero, other, Tensor(0.0), Tensor(0.0)).data)
    closed_err = abs(closed - 2 * math.log(2))
    report(6, "loss oracles", worst_c < 1e-6 and worst_s < 1e-6 and closed_err < 1e-12,
           f"contrastive max err {worst_c:.1e}, CE+DICE max err {worst_s:.1e}, 2 log 2 err {closed_err:.1e}")


def _pixel_saliency(box, bitmaps, w, h):
    total = 0.0
    for bm in bitmaps:
        area = int(bm.sum())
        inter = sum(1 for y in range(h) for x in range(w)
                    if bm[y, x] and box[0] <= x + 0.5 < box[2] and box[1] <= y + 0.5 < box[3])
        if inter:
            total += (w * h / max(area, 1600)) * (inter / area)
    return total


def _best_subset(cands, scores, k):
    rank = sorted(range(len(cands)), key=lambda i: (-scores[i], i))
    pos = {c: r for r, c in enumerate(rank)}
    usable = [i for i in range(len(cands)) if scores[i] > 0]
    best = []
    for size in range(1, min(k, len(usable)) + 1):
        for sub in itertools.combinations(usable, size):
            if any(D.boxes_overlap(cands[a], cands[b]) for a, b in itertools.combinations(sub, 2)):
                continue
            key = sorted(pos[i] for i in sub)
            if key[: len(best)] < best or (key[: len(best)] == best and len(key) > len(best)):
                best = key
    return [cands[rank[r]] for r in best]


def test_c07_curation_oracles(report):
    rng = np.random.default_rng(7)
    sal_bad = sel_bad = 0
    for _ in range(100):
        w, h = (int(v) for v in rng.integers(8, 65, size=2))
        bitmaps = []
        for _ in range(int(rng.integers(1, 5))):
            bm = np.zeros((h, w), dtype=bool)
            x, y = int(rng.integers(0, w - 2)), int(rng.integers(0, h - 2))
            bm[y:y + int(rng.integers(1, h // 2 + 2)), x:x + int(rng.integers(1, w // 2 + 2))] = True
            if rng.uniform() < 0.5:
                bm |= rng.uniform(size=(h, w)) < 0.05
            bitmaps.append(bm)
        masks = D.MaskSet.from_bitmaps(bitmaps)
        cands = []
        for _ in range(int(rng.integers(1, 10))):
            x0, x1 = sorted(rng.uniform(0, w, size=2))
            y0, y1 = sorted(rng.uniform(0, h, size=2))
            cands.append((float(x0), float(y0), float(x1) + 0.5, float(y1) + 0.5))
        scores = [D.box_saliency(c, masks) for c in cands]
        sal_bad += sum(s != _pixel_saliency(c, bitmaps, w, h) for s, c in zip(scores, cands))
        k = int(rng.integers(1, 5))
        sel_bad += D.select_salient_boxes(cands, masks, k) != _best_subset(cands, scores, k)
    report(7, "curation oracles", sal_bad == 0 and sel_bad == 0,
           f"saliency mismatches {sal_bad}, selection mismatches {sel_bad} over 100 mask sets")


def test_c08_batch_contracts(report):
    records = [rec for _, rec in D.synth_items(120, D.SceneSpec(seed=8))]
    cfg = PT.TrainConfig()
    want = math.floor(0.25 * cfg.batch_size + 0.5)
    repeats = wrong_global = 0
    for step in range(cfg.steps):
        batch = PT.build_batch(records, cfg, np.random.default_rng([cfg.seed, step]))
        repeats += len(set(batch.image_ids)) != len(batch.image_ids)
        wrong_global += sum(s.kind == "global" for s in batch.samples) != want
    report(8, "batch construction", repeats == 0 and wrong_global == 0,
           f"{cfg.steps} batches of {cfg.batch_size}: {repeats} with repeated ids, "
           f"{wrong_global} without exactly {want} globals")


def test_c09_learning_signal(report, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert cli.main(["synth", "--count", "2200", "--seed", "0", "--out", str(data)]) == 0
    run = tmp_path / "run"
    assert cli.main(["pretrain", "--dataset", str(data), "--out", str(run), "--seed", "0"]) == 0
    dt = time.perf_counter() - t0
    with open(run / "metrics.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["td_iou"] != ""]
    first, last = rows[0], rows[-1]
    gain = float(last["td_iou"]) - float(first["td_iou"])
    retrieval = float(last["retrieval"])
    steps = int(last["step"])
    trace = "; ".join(f"step {r['step']} iou {float(r['td_iou']):.3f} ret {float(r['retrieval']):.3f}" for r in rows)
    ok = steps >= 2000 and gain >= 0.25 and retrieval >= 3 * 0.125 and dt < 1800
    report(9, "desk-scale learning signal", ok,
           f"{steps} steps in {dt / 60:.1f} min; td IoU {float(first['td_iou']):.3f} -> {float(last['td_iou']):.3f} "
           f"(gain {gain:.3f}, need 0.25); retrieval {retrieval:.3f} (need 0.375) [{trace}]")


def test_c10_ablation_losses(report, small_dataset):
    index, recs = small_dataset
    r0, r1, r2 = recs[0], recs[1], recs[2]
    samples = [PT.Sample(0, r0.global_region, "global", r0), PT.Sample(0, r0.local_regions[0], "local", r0),
               PT.Sample(1, r1.local_regions[0], "local", r1), PT.Sample(2, r2.local_regions[-1], "local", r2)]
    enc = EncoderConfig()
    pyrs = _pyramids(index, samples, enc)
    model = PS3Encoder(enc)
    cfg = PT.TrainConfig()
    losses = {"default": float(PT.batch_loss(model, samples, pyrs, cfg).loss.data)}
    for name in PT.Ablation.CLI_NAMES:
        losses[name] = float(PT.batch_loss(model, samples, pyrs, replace(cfg, ablation=cfg.ablation.without(name))).loss.data)
    gap = min(abs(losses[a] - losses[b]) for a, b in itertools.combinations(losses, 2))
    report(10, "ablation switches", gap > 1e-8 and all(math.isfinite(v) for v in losses.values()),
           f"smallest pairwise |dloss| {gap:.2e}; " + ", ".join(f"{k}={v:.5f}" for k, v in losses.items()))


def test_c11_random_selection_recall(report):
    rng = np.random.default_rng(11)
    grids = EncoderConfig().grids
    results = {}
    for f in (0.1, 0.44, 0.8):
        recalls = []
        for _ in range(1000):
            sel = SelectionSet([rng.choice(g * g, int(round(f * g * g)), replace=False) for g in grids])
            w, h = (int(v) for v in rng.integers(24, 129, size=2))
            x0, y0 = int(rng.integers(0, 256 - w)), int(rng.integers(0, 256 - h))
            recalls.append(H.recall_eval(sel, [(x0, y0, x0 + w, y0 + h)], grids, 256, 256))
        results[f] = float(np.mean(recalls))
    ok = all(abs(m - f) <= 0.05 for f, m in results.items())
    report(11, "random-selection recall", ok, ", ".join(f"f={f}: {m:.4f}" for f, m in results.items()))


def _digest(paths):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(paths)}


def test_c12_determinism(report, tmp_path):
    conf = tmp_path / "conf.json"
    conf.write_text(json.dumps({"train": {"samples_per_epoch": 24 * 8, "eval_every": 12, "checkpoint_every": 12,
                                          "holdout_records": 16, "eval_regions": 16}}))
    sched = tmp_path / "sched.json"
    sched.write_text(json.dumps({"regime": "constant-cost", "profile": "desk",
                                 "points": [{"max_res": 256, "train_fraction": 1, "test_k": 64},
                                            {"max_res": 512, "train_fraction": 0.25, "test_k": 64}]}))
    digests = []
    for run in ("a", "b"):
        root = tmp_path / run
        data = root / "data"
        assert cli.main(["synth", "--count", "64", "--seed", "12", "--out", str(data)]) == 0
        assert cli.main(["pretrain", "--config", str(conf), "--dataset", str(data), "--out", str(root / "run")]) == 0
        image = data / D.read_dataset(data / "index.jsonl")[1].image
        assert cli.main(["select", "--checkpoint", str(root / "run" / "last.ckpt"), "--image", str(image),
                         "--prompt", "red plus center", "--k", "120", "--out", str(root / "sel")]) == 0
        ck = root / "ck"
        ck.mkdir()
        (ck / "res256_train1.ckpt").write_bytes((root / "run" / "last.ckpt").read_bytes())
        assert cli.main(["bench", "--schedule", str(sched), "--checkpoints", str(ck), "--dataset", str(data),
                         "--eval-regions", "16", "--out", str(root / "bench.csv")]) == 0
        files = list((root / "run").glob("*.ckpt")) + [root / "run" / "metrics.csv", root / "bench.csv"] \
            + list((root / "sel").iterdir())
        digests.append(_digest(files) | {"dataset": cli.dataset_hash(data / "index.jsonl")})
    a, b = digests
    differ = sorted(k for k in a if a[k] != b.get(k))
    kinds = sum(k.endswith(".ckpt") for k in a), sum(k.endswith(".csv") for k in a), sum(k.endswith(".ppm") for k in a)
    report(12, "determinism", not differ and a.keys() == b.keys(),
           f"{len(a)} artifacts ({kinds[0]} checkpoints, {kinds[1]} CSVs, {kinds[2]} PPMs, dataset hash) "
           f"byte-identical across two runs" + (f"; differing: {differ}" if differ else ""))
