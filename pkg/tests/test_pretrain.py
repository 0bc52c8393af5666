import csv
import itertools
import math
from dataclasses import replace

import numpy as np
import pytest

from ps3 import datagen as D
from ps3 import pretrain as PT
from ps3 import tensor as T
from ps3.checkpoint import load_model
from ps3.encoder import ConfigError, EncoderConfig, PS3Encoder, build_pyramid
from ps3.tensor import Tensor, precision

GRIDS = (16, 32)


def _region(box, kind="local", cap=(3, 11, 19)):
    return D.Region(box, list(cap), kind)


# ---------------------------------------------------------------------------
# ground truth maps


def test_gt_full_box_all_ones():
    gt = PT.ground_truth_score_map(_region((0, 0, 256, 256)), 256, 256, GRIDS)
    assert all(m.all() for m in gt.maps) and gt.degenerate == [False, False]
    assert gt.provenance == "ground-truth"


def test_gt_small_box_on_cell_centers():
    # fine centres sit at 4 + 8j, coarse ones at 8 + 16i; [3.5, 8.5) holds one of each
    gt = PT.ground_truth_score_map(_region((3.5, 3.5, 8.5, 8.5)), 256, 256, GRIDS)
    assert [int(m.sum()) for m in gt.maps] == [1, 1]
    for g in GRIDS:
        c = 256 / g * 2.5
        gt = PT.ground_truth_score_map(_region((c - 1, c - 1, c + 1, c + 1)), 256, 256, (g,))
        assert int(gt.maps[0].sum()) == 1 and gt.maps[0][2, 2] == 1


def test_gt_degenerate_coarse_scale():
    gt = PT.ground_truth_score_map(_region((10, 10, 22, 22)), 256, 256, GRIDS)
    assert gt.degenerate == [True, False]
    assert not gt.maps[0].any() and gt.maps[1].sum() == 4
    with pytest.raises(ValueError):
        PT.ground_truth_score_map(_region((0, 0, 300, 10)), 256, 256, GRIDS)


def test_bottom_up_gt():
    a, b = _region((0, 0, 64, 64)), _region((128, 128, 192, 256))
    one = PT.bottom_up_gt([a], 256, 256, GRIDS)
    for x, y in zip(one.maps, PT.ground_truth_score_map(a, 256, 256, GRIDS).maps):
        np.testing.assert_array_equal(x, y)
    both = PT.bottom_up_gt([a, b], 256, 256, GRIDS)
    ga, gb = (PT.ground_truth_score_map(r, 256, 256, GRIDS) for r in (a, b))
    for s in range(2):
        np.testing.assert_array_equal(both.maps[s], ga.maps[s] + gb.maps[s])
    over = PT.bottom_up_gt([a, _region((32, 32, 96, 96))], 256, 256, GRIDS)
    assert all(m.max() <= 1 for m in over.maps)


# ---------------------------------------------------------------------------
# losses


def _contrastive_reference(x, y, t_prime, b):
    n = len(x)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    y = y / np.linalg.norm(y, axis=1, keepdims=True)
    total = 0.0
    for i in range(n):
        for j in range(n):
            z = 1.0 if i == j else -1.0
            u = z * (math.exp(t_prime) * float(np.dot(x[i], y[j])) + b)
            total += -math.log(1.0 / (1.0 + math.exp(-u)))
    return total / n


def test_contrastive_closed_form():
    with precision(64):
        x = Tensor([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
        y = Tensor([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
        # <x_i, y_j> is zero for every pair
        np.testing.assert_allclose(x.data @ y.data.T, 0.0)
        loss = PT.sigmoid_contrastive_loss(x, y, Tensor(0.0), Tensor(0.0))
    assert abs(float(loss.data) - 2 * math.log(2)) < 1e-12


def test_contrastive_saturation_and_permutation():
    with precision(64):
        # matched pairs at similarity +1, mismatched at -1
        e = Tensor([[1.0, 0.0], [-1.0, 0.0]])
        assert float(PT.sigmoid_contrastive_loss(e, e, Tensor(math.log(1e4)), Tensor(0.0)).data) < 1e-6
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
        perm = rng.permutation(5)
        a = PT.sigmoid_contrastive_loss(Tensor(x), Tensor(y), Tensor(1.0), Tensor(-2.0))
        b = PT.sigmoid_contrastive_loss(Tensor(x[perm]), Tensor(y[perm]), Tensor(1.0), Tensor(-2.0))
    assert abs(float(a.data) - float(b.data)) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_contrastive_matches_reference(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(1, 17)), int(rng.integers(2, 9))
    x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    tp, b = rng.uniform(-1, 3), rng.uniform(-12, 2)
    with precision(64):
        got = PT.sigmoid_contrastive_loss(Tensor(x), Tensor(y), Tensor(tp), Tensor(b))
    assert abs(float(got.data) - _contrastive_reference(x, y, tp, b)) < 1e-6


def test_contrastive_gradients():
    rng = np.random.default_rng(1)
    with precision(64):
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        y = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        tp, b = Tensor(0.5, requires_grad=True), Tensor(-1.0, requires_grad=True)
        err = T.grad_check(lambda: PT.sigmoid_contrastive_loss(x, y, tp, b), [x, y, tp, b])
    assert err < 1e-6


def _selection_brute(scores, gts):
    bces, dices = [], []
    for s, g in zip(scores, gts):
        rows, cols = s.shape
        bce = inter = psum = gsum = 0.0
        for i in range(rows):
            for j in range(cols):
                p = (s[i, j] + 1) / 2
                pc = min(max(p, 1e-7), 1 - 1e-7)
                bce -= g[i, j] * math.log(pc) + (1 - g[i, j]) * math.log(1 - pc)
                inter += p * g[i, j]
                psum += p
                gsum += g[i, j]
        bces.append(bce / (rows * cols))
        dices.append(1 - (2 * inter + 1) / (psum + gsum + 1))
    return sum(bces) / len(bces), sum(dices) / len(dices)


def test_selection_loss_examples():
    with precision(64):
        g = np.array([[1.0, 1.0], [0.0, 0.0]])
        bce, dice = PT.selection_loss([Tensor(np.zeros((2, 2)))], [g])
        assert abs(float(dice.data) - 0.4) < 1e-12 and abs(float(bce.data) - math.log(2)) < 1e-12
        bce, dice = PT.selection_loss([Tensor(2 * g - 1)], [g])
        assert float(bce.data) < 1e-6 and abs(float(dice.data)) < 1e-12
        bce, dice = PT.selection_loss([Tensor(-np.ones((3, 3)))], [np.zeros((3, 3))])
        assert float(dice.data) == 0.0
        with pytest.raises(T.DimensionError):
            PT.selection_loss([Tensor(np.zeros((2, 2)))], [np.zeros((3, 3))])


@pytest.mark.parametrize("seed", range(20))
def test_selection_loss_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    scales = int(rng.integers(1, 4))
    scores, gts = [], []
    for _ in range(scales):
        g = int(rng.integers(1, 33))
        scores.append(rng.uniform(-1, 1, size=(g, g)))
        gts.append((rng.uniform(size=(g, g)) < 0.3).astype(float))
    with precision(64):
        bce, dice = PT.selection_loss([Tensor(s) for s in scores], gts)
    rb, rd = _selection_brute(scores, gts)
    assert abs(float(bce.data) - rb) < 1e-6 and abs(float(dice.data) - rd) < 1e-6


# ---------------------------------------------------------------------------
# batches


def _fake_records(n, sources=("natural", "document")):
    recs = []
    for i in range(n):
        regions = [D.Region((0, 0, 32, 32), [3, 11, 19]), D.Region((64, 64, 128, 128), [4, 12, 23]),
                   D.Region((0, 0, 256, 256), [1, 3, 11], "global")]
        recs.append(D.DatasetRecord(f"images/{i:06d}.ppm", 256, 256, regions, sources[i % len(sources)]))
    return recs


def test_batch_global_count_and_uniqueness():
    recs = _fake_records(40)
    cfg = PT.TrainConfig(batch_size=8, global_ratio=0.25)
    for seed in range(1000):
        b = PT.build_batch(recs, cfg, np.random.default_rng(seed))
        assert sum(s.kind == "global" for s in b.samples) == 2
        assert len(set(b.image_ids)) == 8
        assert all(s.region.kind == s.kind for s in b.samples)
    b = PT.build_batch(recs, replace(cfg, global_ratio=0.0), np.random.default_rng(0))
    assert all(s.kind == "local" for s in b.samples)


def test_batch_full_epoch_unique():
    recs = _fake_records(64)
    cfg = PT.TrainConfig(batch_size=16, samples_per_epoch=64 * 16)
    for step in range(cfg.steps):
        ids = PT.build_batch(recs, cfg, np.random.default_rng([0, step])).image_ids
        assert len(ids) == len(set(ids))


def test_batch_too_small_dataset():
    with pytest.raises(PT.BatchError):
        PT.build_batch(_fake_records(5), PT.TrainConfig(batch_size=8), np.random.default_rng(0))
    cfg = PT.TrainConfig(batch_size=8, ablation=PT.Ablation().without("intra-image"))
    assert len(PT.build_batch(_fake_records(5), cfg, np.random.default_rng(0)).samples) == 8
    with pytest.raises(PT.BatchError):
        PT.build_batch([], PT.TrainConfig(), np.random.default_rng(0))


def test_batch_sources_equally_likely():
    # 3:1 imbalance in the dataset must not leak into the draw
    recs = _fake_records(200, sources=("natural", "natural", "natural", "document"))
    cfg = PT.TrainConfig(batch_size=1, global_ratio=0.0)
    counts = {"natural": 0, "document": 0}
    for seed in range(10000):
        s = PT.build_batch(recs, cfg, np.random.default_rng([7, seed])).samples[0]
        counts[s.record.source] += 1
    chi2 = sum((c - 5000) ** 2 / 5000 for c in counts.values())
    assert math.erfc(math.sqrt(chi2 / 2)) > 0.01, counts


def test_ablation_names():
    ab = PT.Ablation().without(*PT.Ablation.CLI_NAMES)
    assert not any(getattr(ab, f) for f in PT.Ablation.CLI_NAMES.values())
    with pytest.raises(ConfigError):
        PT.Ablation().without("dropout")


def test_config_round_trip_and_errors(tmp_path):
    enc, tr = EncoderConfig(), PT.TrainConfig(learning_rate=2e-3, ablation=PT.Ablation(kv_cache=False))
    PT.save_config(tmp_path / "c.json", enc, tr)
    assert PT.load_config(tmp_path / "c.json") == (enc, tr)
    (tmp_path / "bad.json").write_text('{"train": {"learning_rat": 1}}')
    with pytest.raises(ConfigError, match="learning_rat"):
        PT.load_config(tmp_path / "bad.json")
    (tmp_path / "bad2.json").write_text('{"train": {"global_ratio": 2}}')
    with pytest.raises(ConfigError, match="global_ratio"):
        PT.load_config(tmp_path / "bad2.json")


# ---------------------------------------------------------------------------
# model-level tests on a small synthetic dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    index = D.synth_dataset(root, 24, D.SceneSpec(seed=5))
    return index, D.read_dataset(index)


def _pyramids(index, samples, enc):
    return [build_pyramid(D.load_image(index, s.record), enc) for s in samples]


def _fixed_batch(recs):
    """One image contributes both a global and a local sample so the intra-image switch matters."""
    r0, r1, r2 = recs[0], recs[1], recs[2]
    return [PT.Sample(0, r0.global_region, "global", r0), PT.Sample(0, r0.local_regions[0], "local", r0),
            PT.Sample(1, r1.local_regions[0], "local", r1), PT.Sample(2, r2.local_regions[1], "local", r2)]


def test_ablations_change_loss(dataset):
    index, recs = dataset
    samples = _fixed_batch(recs)
    enc = EncoderConfig()
    pyrs = _pyramids(index, samples, enc)
    model = PS3Encoder(enc)
    cfg = PT.TrainConfig()
    base = float(PT.batch_loss(model, samples, pyrs, cfg).loss.data)
    losses = {"default": base}
    for name in PT.Ablation.CLI_NAMES:
        out = PT.batch_loss(model, samples, pyrs, replace(cfg, ablation=cfg.ablation.without(name)))
        losses[name] = float(out.loss.data)
        assert math.isfinite(losses[name])
    for a, b in itertools.combinations(losses, 2):
        assert abs(losses[a] - losses[b]) > 1e-8, (a, b, losses)


def test_inbox_pooling_locality(dataset):
    index, recs = dataset
    enc = EncoderConfig()
    model = PS3Encoder(enc)
    rec = recs[0]
    region = D.Region((64, 64, 128, 128), rec.local_regions[0].caption)
    sample = PT.Sample(0, region, "local", rec)
    gt = PT.ground_truth_score_map(region, 256, 256, enc.grids)
    k = [int(m.sum()) for m in gt.maps]
    pyr = build_pyramid(D.load_image(index, rec), enc)
    cfg = PT.TrainConfig()
    a = PT.batch_loss(model, [sample], [pyr], cfg, k_per_sample=[k])
    rng = np.random.default_rng(0)
    fine = pyr.scales[-1].copy()
    outside = np.ones(fine.shape[:2], dtype=bool)
    outside[64:128, 64:128] = False
    fine[outside] = rng.uniform(size=(int(outside.sum()), 3))
    pyr2 = replace(pyr, scales=[pyr.scales[0], fine], _patch_cache={})
    b = PT.batch_loss(model, [sample], [pyr2], cfg, k_per_sample=[k])
    assert abs(float(a.contrastive.data) - float(b.contrastive.data)) <= 1e-6
    assert a.image_embs.data.tobytes() == b.image_embs.data.tobytes()


def test_step_descends_on_frozen_batch(dataset):
    index, recs = dataset
    samples = _fixed_batch(recs)[1:]
    enc = EncoderConfig()
    pyrs = _pyramids(index, samples, enc)
    model = PS3Encoder(enc)
    cfg = PT.TrainConfig(learning_rate=1e-3, warmup_steps=0, ablation=PT.Ablation(gt_selection=False))
    opt = PT.AdamW(model, cfg)
    batch = PT.TrainBatch(samples)
    losses = [PT.pretrain_step(batch, model, cfg, opt, pyrs)["loss"] for _ in range(3)]
    final = float(PT.batch_loss(model, samples, pyrs, cfg).loss.data)
    assert all(math.isfinite(v) for v in losses)
    assert final < losses[0]


def test_zero_learning_rate_keeps_parameters(dataset):
    index, recs = dataset
    samples = _fixed_batch(recs)[1:]
    enc = EncoderConfig()
    model = PS3Encoder(enc)
    before = {k: p.data.tobytes() for k, p in model.params.items()}
    cfg = PT.TrainConfig(learning_rate=0.0)
    PT.pretrain_step(PT.TrainBatch(samples), model, cfg, PT.AdamW(model, cfg), _pyramids(index, samples, enc))
    assert all(before[k] == p.data.tobytes() for k, p in model.params.items())


def test_non_finite_loss_aborts(dataset):
    index, recs = dataset
    samples = _fixed_batch(recs)[1:]
    enc = EncoderConfig()
    model = PS3Encoder(enc)
    model.params["loss.t"].data[...] = np.nan
    cfg = PT.TrainConfig()
    with pytest.raises(PT.NumericError, match="non-finite"):
        PT.pretrain_step(PT.TrainBatch(samples), model, cfg, PT.AdamW(model, cfg), _pyramids(index, samples, enc))


def test_total_loss_gradient(dataset):
    index, recs = dataset
    fixed = _fixed_batch(recs)
    samples = [fixed[0], fixed[2]]
    enc = EncoderConfig()
    with precision(64):
        model = PS3Encoder(enc).astype(np.float64)
        pyrs = _pyramids(index, samples, enc)
        cfg = PT.TrainConfig()
        err = T.grad_check(lambda: PT.batch_loss(model, samples, pyrs, cfg).loss, model.parameters(),
                           epsilon=1e-4, max_coords=2, seed=0)
    assert err < 1e-4


def test_train_loop_deterministic_and_resumable(dataset, tmp_path):
    index, _ = dataset
    enc = EncoderConfig(num_layers=1, embed_dim=32)
    cfg = PT.TrainConfig(samples_per_epoch=6 * 4, batch_size=4, eval_every=3, checkpoint_every=3,
                         holdout_records=8, eval_regions=8, warmup_steps=2)
    a = PT.train_loop(index, enc, cfg, tmp_path / "a")
    b = PT.train_loop(index, enc, cfg, tmp_path / "b")
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    with open(tmp_path / "a" / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["step"]) for r in rows] == list(range(0, 7))
    assert rows[0]["td_iou"] != "" and rows[3]["retrieval"] != "" and rows[1]["td_iou"] == ""

    # interrupted after three steps, then resumed
    short = replace(cfg, samples_per_epoch=3 * 4)
    PT.train_loop(index, enc, short, tmp_path / "c")
    c = PT.train_loop(index, enc, cfg, tmp_path / "c", resume=True)
    assert c.read_bytes() == a.read_bytes()
    model, meta, extra = load_model(c)
    assert meta["step"] == 6 and any(k.startswith("opt.m.") for k in extra)
