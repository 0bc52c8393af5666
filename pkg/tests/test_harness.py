import csv

import numpy as np
import pytest

from ps3 import harness as H
from ps3.encoder import EncoderConfig, ScoreMap, SelectionSet, build_pyramid


def test_table_one_anchors():
    assert H.count_tokens(EncoderConfig.full_profile(756)).hr_tokens == 729
    assert H.count_tokens(EncoderConfig.full_profile(1512)).hr_tokens == 3645
    cfg = EncoderConfig.full_profile(3780)
    assert sum(cfg.cells) == 87480
    ks = H.allocate_k(15360, cfg.cells)
    rep = H.count_tokens(cfg, ks)
    assert rep.hr_tokens == 3840 and sum(rep.selected) == 15360


def test_hr_tokens_floor():
    cfg = EncoderConfig()
    assert H.count_tokens(cfg, [3, 4]).hr_tokens == 1
    with pytest.raises(ValueError):
        H.count_tokens(cfg, [300, 0])


def test_stage3_flops_constant_across_ladders():
    a = EncoderConfig().with_scales([2])
    b = EncoderConfig().with_scales([2, 4])
    assert H.flop_estimate(a, 200)["stage3"] == H.flop_estimate(b, 200)["stage3"]
    assert H.flop_estimate(b, 0)["stage3"] == 0
    one, two = H.flop_estimate(b, 100)["stage3"], H.flop_estimate(b, 200)["stage3"]
    assert two > 2 * one
    # attention part alone is quadratic in the selected count
    d, L = b.embed_dim, b.num_layers
    attn = lambda n: L * 4 * n * (n + b.low_tokens) * d
    assert attn(200) > 2 * attn(100)


def test_dynamic_resolution_schedule():
    full = EncoderConfig.full_profile(3780)
    plan = H.dynamic_resolution_schedule(2000, full, 4000)
    assert plan[-1] == 0 and sum(plan) == 4000 and all(k > 0 for k in plan[:-1])
    # budget beyond the active cells is capped
    assert H.dynamic_resolution_schedule(2000, full, 15360) == [2916, 11664, 0]
    assert all(k > 0 for k in H.dynamic_resolution_schedule(2646, full, 15360))
    desk = EncoderConfig()
    assert all(k > 0 for k in H.dynamic_resolution_schedule(int(np.ceil(0.7 * 256)), desk, 80))
    assert H.dynamic_resolution_schedule(64, desk, 80) == [0, 0]
    assert H.dynamic_resolution_schedule(150, desk, 80) == [80, 0]


def test_recall_eval_examples():
    grids = [4, 8]
    sel = SelectionSet([[0, 1, 4, 5], [0, 1, 2, 3, 8, 9, 10, 11, 16, 17, 18, 19, 24, 25, 26, 27]])
    assert H.recall_eval(sel, [(0, 0, 32, 32)], grids, 64, 64) == 1.0
    far = SelectionSet([[15], [63]])
    assert H.recall_eval(far, [(0, 0, 32, 32)], grids, 64, 64) == 0.0
    assert H.recall_eval(far, [(1, 1, 2, 2)], grids, 64, 64) is None


def test_random_selection_recall_matches_fraction():
    rng = np.random.default_rng(0)
    grids = [16, 32]
    f = 0.44
    recalls = []
    for _ in range(1000):
        sel = SelectionSet([rng.choice(g * g, int(round(f * g * g)), replace=False) for g in grids])
        x0, y0 = rng.integers(0, 192, size=2)
        recalls.append(H.recall_eval(sel, [(x0, y0, x0 + 64, y0 + 64)], grids, 256, 256))
    assert abs(np.mean(recalls) - f) <= 0.05


def test_recall_monotone_in_k():
    rng = np.random.default_rng(1)
    scores = [rng.normal(size=64), rng.normal(size=256)]
    prev = -1
    for k in range(0, 320, 16):
        ks = H.allocate_k(k, [64, 256])
        sel = SelectionSet([H.T.top_k(s, kk) for s, kk in zip(scores, ks)])
        r = H.recall_eval(sel, [(40, 40, 140, 120)], [8, 16], 128, 128)
        assert r >= prev
        prev = r


def test_heatmap_and_overlay():
    const = ScoreMap([np.full((4, 4), 0.3)])
    img = H.render_score_heatmap(const, 0)
    assert img.shape == (32, 32, 3) and len(np.unique(img.reshape(-1, 3), axis=0)) == 1
    rng = np.random.default_rng(2)
    m = ScoreMap([rng.uniform(-1, 1, size=(8, 8))])
    assert H.render_score_heatmap(m, 0).tobytes() == H.render_score_heatmap(m, 0).tobytes()
    np.testing.assert_array_equal(H.colormap(np.array([0.0, 1.0])), [[0, 0, 128], [255, 255, 0]])

    cfg = EncoderConfig()
    pyr = build_pyramid(rng.uniform(0.2, 1.0, size=(256, 256, 3)), cfg)
    sel = SelectionSet([[], sorted(rng.choice(1024, 37, replace=False))])
    over = H.render_selection_overlay(pyr, sel)
    base = np.rint(np.clip(pyr.scales[-1], 0, 1) * 255).astype(np.uint8)
    cells = (over == base).reshape(32, 8, 32, 8, 3).all(axis=(1, 3, 4))
    assert int(cells.sum()) == 37
    full = SelectionSet([[], list(range(1024))])
    np.testing.assert_array_equal(H.render_selection_overlay(pyr, full), base)


def test_pca_rank_one_and_sign():
    rng = np.random.default_rng(3)
    t = rng.normal(size=(20, 1))
    x = t * rng.normal(size=(1, 6))
    rgb = H.pca_features(x)
    np.testing.assert_array_equal(rgb[:, 1:], 0.5)
    assert rgb[:, 0].min() == 0.0 and rgb[:, 0].max() == 1.0
    y = rng.normal(size=(30, 8))
    np.testing.assert_allclose(H.pca_features(y), H.pca_features(-y), atol=1e-12)
    with pytest.raises(ValueError):
        H.pca_features(y[:2])


@pytest.mark.parametrize("seed", range(10))
def test_pca_projection_optimal(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(5, 51)), int(rng.integers(4, 12))
    x = rng.normal(size=(n, d)) * rng.uniform(0.2, 3.0, size=d)
    xc = x - x.mean(axis=0)

    def err(v):
        return float(((xc - xc @ v @ v.T) ** 2).sum())

    v, _ = H.pca_basis(x)
    w = np.linalg.eigh(xc.T @ xc)[1][:, ::-1][:, :3]
    assert err(v) <= err(w) * (1 + 1e-9) + 1e-9
    for _ in range(20):
        q = np.linalg.qr(rng.normal(size=(d, 3)))[0]
        assert err(v) <= err(q) + 1e-9


def test_schedule_validation(tmp_path):
    with pytest.raises(ValueError):
        H.ScalingSchedule("whole-image", [H.SchedulePoint(256, 0.5, 0.5)])
    with pytest.raises(ValueError):
        H.ScalingSchedule("constant-cost", [H.SchedulePoint(256, 1.5, 0.5)])
    with pytest.raises(ValueError):
        H.ScalingSchedule("test-time", [H.SchedulePoint(256, 0.5, 0.5), H.SchedulePoint(512, 0.5, 0.5)])
    p = tmp_path / "s.json"
    p.write_text('{"regime": "constant-cost", "points": [{"max_res": 128, "train_fraction": 1, "test_k": 64},'
                 ' {"max_res": 256, "train_fraction": 0.25, "test_k": 64}, {"max_res": 512, "train_fraction": 0.1, "test_k": 64}]}')
    sched = H.load_schedule(p)
    rows = H.run_scaling(sched)
    assert len({r["hr_tokens"] for r in rows}) == 1
    assert len({r["flops_stage3"] for r in rows}) == 1
    assert [r["scale_sides"] for r in rows] == ["128", "128x256", "128x256x512"]


def test_run_scaling_missing_checkpoint_and_csv(tmp_path):
    sched = H.ScalingSchedule("whole-image", [H.SchedulePoint(128, 1.0, 1.0), H.SchedulePoint(256, 1.0, 1.0)])
    rows = H.run_scaling(sched, checkpoints_dir=tmp_path)
    assert all(r["status"].startswith("skipped: missing checkpoint") for r in rows)
    H.write_bench_csv(tmp_path / "b.csv", rows)
    with open(tmp_path / "b.csv") as fh:
        got = list(csv.DictReader(fh))
    assert len(got) == 2 and list(got[0]) == H.BENCH_COLUMNS
    assert got[1]["hr_tokens"] == str((256 + 1024) // 4)


def test_full_profile_bench_rows():
    sched = H.ScalingSchedule("whole-image", [H.SchedulePoint(756, 1.0, 1.0), H.SchedulePoint(1512, 1.0, 1.0)],
                              profile="full")
    assert [r["hr_tokens"] for r in H.run_scaling(sched)] == [729, 3645]
