"""Token and FLOP accounting, scaling-regime runs, dynamic-resolution plans,
selection recall, and deterministic PPM/PCA visualizations.

Scaling CSV columns (``BENCH_COLUMNS``)::

    regime, max_res, train_fraction, test_fraction, scale_sides, selected,
    hr_tokens, low_res_tokens, flops_stage1, flops_aux, flops_stage3,
    recall, retrieval, checkpoint, checkpoint_hash, status

Schedule files are JSON::

    {"regime": "constant-cost", "profile": "desk",
     "points": [{"max_res": 256, "train_fraction": 0.25, "test_fraction": 0.25}, ...]}

A point may give ``test_k`` (absolute patch count) instead of ``test_fraction``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, file_hash, load_model
from .encoder import (EncoderConfig, ImagePyramid, PS3Encoder, ScoreMap, SelectionSet, allocate_k,
                      build_pyramid, cell_centers_in_box, largest_remainder)

__all__ = [
    "CostReport", "SchedulePoint", "ScalingSchedule", "count_tokens", "flop_estimate",
    "dynamic_resolution_schedule", "recall_eval", "render_score_heatmap", "render_selection_overlay",
    "pca_features", "pca_basis", "load_schedule", "run_scaling", "write_bench_csv", "desk_config_for_res",
    "BENCH_COLUMNS", "REGIMES", "colormap",
]

REGIMES = ("whole-image", "constant-cost", "constant-res", "test-time")
DESK_LADDER = (2, 4, 8)


# ---------------------------------------------------------------------------
# accounting


@dataclass
class CostReport:
    selected: list[int]
    hr_tokens: int
    low_res_tokens: int
    flops_stage1: int
    flops_aux: int
    flops_stage3: int

    @property
    def flops_total(self) -> int:
        return self.flops_stage1 + self.flops_aux + self.flops_stage3


def _k_list(cfg: EncoderConfig, selection) -> list[int]:
    if selection is None:
        return list(cfg.cells)
    if isinstance(selection, SelectionSet):
        return selection.k
    return [int(k) for k in selection]


def count_tokens(cfg: EncoderConfig, selection=None, kv_cache: bool = True) -> CostReport:
    """``selection`` is a SelectionSet, per-scale counts, or None for every cell.

    High-res tokens delivered downstream are ``floor(sum k / 4)`` (2x2 merge).
    """
    ks = _k_list(cfg, selection)
    if len(ks) != len(cfg.cells) or any(not 0 <= k <= c for k, c in zip(ks, cfg.cells)):
        raise ValueError(f"selection {ks} does not fit grids {cfg.grids}")
    f = flop_estimate(cfg, sum(ks), kv_cache=kv_cache)
    return CostReport(ks, sum(ks) // 4, cfg.low_tokens, f["stage1"], f["aux"], f["stage3"])


def _transformer_flops(cfg: EncoderConfig, n: int, m: int) -> int:
    """Multiply-adds x2 for ``n`` query tokens attending over ``m`` keys, all layers plus patch embed."""
    if n == 0:
        return 0
    d = cfg.embed_dim
    per_layer = 2 * n * 4 * d * d + 2 * 2 * n * m * d + 2 * 2 * n * d * d * cfg.mlp_ratio
    return 2 * n * cfg.patch_dim * d + cfg.num_layers * per_layer


def flop_estimate(cfg: EncoderConfig, total_k: int, kv_cache: bool = True) -> dict[str, int]:
    """Closed-form per-stage FLOPs. Stage 3 depends only on ``total_k``, the cache size and dims."""
    d = cfg.embed_dim
    n_lr = cfg.low_tokens
    stage1 = _transformer_flops(cfg, n_lr, n_lr)
    side, c_in, aux = cfg.aux_side, 3, 0
    for c_out in cfg.aux_channels:
        aux += 2 * side * side * 9 * c_in + 2 * side * side * c_in * c_out
        side //= 2
        aux += 2 * side * side * 4 * c_out * c_out
        c_in = c_out
    aux += 2 * side * side * c_in * d
    # cosine scores on both maps
    aux += 2 * (n_lr + side * side) * d
    cache = n_lr if kv_cache else 0
    stage3 = _transformer_flops(cfg, total_k, total_k + cache)
    return {"stage1": stage1, "aux": aux, "stage3": stage3}


def dynamic_resolution_schedule(image_res: int, cfg: EncoderConfig, total_k: int,
                                threshold_ratio: float = 0.7) -> list[int]:
    """Per-scale k for an image of side ``image_res``.

    Below ``threshold_ratio * largest scale side`` the finest scale is skipped;
    the active scales share ``total_k`` in proportion to their cell counts.
    """
    if image_res < cfg.low_res_side:
        raise ValueError(f"image_res {image_res} below low_res_side {cfg.low_res_side}")
    cells = list(cfg.cells)
    if image_res == cfg.low_res_side:
        return [0] * len(cells)
    if image_res < threshold_ratio * cfg.scale_sides[-1]:
        cells[-1] = 0
    return largest_remainder(min(total_k, sum(cells)), cells)


def recall_eval(selection: SelectionSet, gt_boxes: Sequence, grids: Sequence[int], width: int, height: int) -> float | None:
    """Selected in-box cells over all in-box cells, pooled over scales; None if no cell is in a box."""
    hit = total = 0
    for idx, g in zip(selection.indices, grids):
        inside = np.zeros((g, g), dtype=bool)
        for box in gt_boxes:
            inside |= cell_centers_in_box(box, width, height, g)
        flat = inside.reshape(-1)
        total += int(flat.sum())
        hit += int(flat[np.asarray(idx, dtype=np.int64)].sum()) if idx else 0
    return hit / total if total else None


# ---------------------------------------------------------------------------
# visualization

_C0 = np.array([0.0, 0.0, 128.0])
_C1 = np.array([255.0, 255.0, 0.0])


def colormap(t: np.ndarray) -> np.ndarray:
    """Linear ramp from navy (0, 0, 128) at 0 to yellow (255, 255, 0) at 1, rounded to uint8."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)[..., None]
    return np.rint((1.0 - t) * _C0 + t * _C1).astype(np.uint8)


def render_score_heatmap(score: ScoreMap, scale: int, cell_px: int = 8) -> np.ndarray:
    """One colored square per cell; predicted scores map from [-1, 1], ground truth from [0, 1]."""
    m = np.asarray(score.array(scale), dtype=np.float64)
    t = m if score.provenance == "ground-truth" else (m + 1.0) / 2.0
    img = colormap(t)
    return np.repeat(np.repeat(img, cell_px, axis=0), cell_px, axis=1)


def render_selection_overlay(pyramid: ImagePyramid, selection: SelectionSet, scale: int = -1,
                             dim: float = 0.35) -> np.ndarray:
    """The scale's raster as uint8 with every unselected patch multiplied by ``dim``."""
    s = scale % len(pyramid.scales)
    img = np.rint(np.clip(pyramid.scales[s], 0, 1) * 255).astype(np.uint8)
    g = pyramid.grids[s]
    p = pyramid.patch_side
    keep = np.zeros(g * g, dtype=bool)
    keep[np.asarray(selection.indices[s], dtype=np.int64)] = True
    mask = np.repeat(np.repeat(keep.reshape(g, g), p, axis=0), p, axis=1)
    out = img.copy()
    out[~mask] = np.floor(img[~mask] * dim).astype(np.uint8)
    return out


def pca_basis(x: np.ndarray, components: int = 3, iters: int = 300) -> tuple[np.ndarray, np.ndarray]:
    """Top eigenvectors ``[d, c]`` and eigenvalues of the covariance by fixed-count subspace iteration."""
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x) - 1, 1)
    d = cov.shape[0]
    c = min(components, d)
    # a few guard vectors beyond c speed convergence when eigenvalues cluster
    block = min(d, c + 8)
    q = np.linalg.qr(np.random.default_rng(0).normal(size=(d, block)))[0]
    for _ in range(iters):
        q = np.linalg.qr(cov @ q)[0]
    evals, rot = np.linalg.eigh(q.T @ cov @ q)
    order = np.argsort(-evals, kind="stable")[:c]
    return q @ rot[:, order], evals[order]


def pca_features(tokens, components: int = 3, iters: int = 300) -> np.ndarray:
    """Per-token RGB in [0, 1] from the top three principal components.

    Each channel's sign is fixed so the token with the largest absolute score
    is positive; channels beyond the data's rank are 0.5.
    """
    x = tokens.data if isinstance(tokens, T.Tensor) else np.asarray(tokens)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError("pca_features needs a [n >= 3, d] token matrix")
    vecs, evals = pca_basis(x, components, iters)
    scores = (x - x.mean(axis=0)) @ vecs
    out = np.full((len(x), components), 0.5)
    tol = 1e-9 * max(float(evals[0]) if len(evals) else 0.0, 1e-300)
    for j in range(min(components, scores.shape[1])):
        if evals[j] <= tol:
            continue
        col = scores[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            col = -col
        lo, hi = col.min(), col.max()
        out[:, j] = (col - lo) / (hi - lo) if hi > lo else 0.5
    return out


# ---------------------------------------------------------------------------
# scaling experiments

BENCH_COLUMNS = ["regime", "max_res", "train_fraction", "test_fraction", "scale_sides", "selected",
                 "hr_tokens", "low_res_tokens", "flops_stage1", "flops_aux", "flops_stage3",
                 "recall", "retrieval", "checkpoint", "checkpoint_hash", "status"]


@dataclass(frozen=True)
class SchedulePoint:
    max_res: int
    train_fraction: float
    test_fraction: float | None = None
    test_k: int | None = None


@dataclass
class ScalingSchedule:
    regime: str
    points: list[SchedulePoint]
    profile: str = "desk"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.profile not in ("desk", "full"):
            raise ValueError("profile must be 'desk' or 'full'")
        for p in self.points:
            fracs = [p.train_fraction] + ([p.test_fraction] if p.test_fraction is not None else [])
            if any(not 0 < f <= 1 for f in fracs):
                raise ValueError(f"fractions must be in (0, 1]: {p}")
            if (p.test_fraction is None) == (p.test_k is None):
                raise ValueError(f"give exactly one of test_fraction and test_k: {p}")
        if self.regime == "whole-image" and any(p.train_fraction != 1 or p.test_fraction != 1 for p in self.points):
            raise ValueError("whole-image points must use fraction 1.0")
        if self.regime == "test-time" and len({(p.max_res, p.train_fraction) for p in self.points}) > 1:
            raise ValueError("test-time points must share one (max_res, train_fraction) checkpoint")
        if self.regime == "constant-res" and len({p.max_res for p in self.points}) > 1:
            raise ValueError("constant-res points must share max_res")

    def config_for(self, point: SchedulePoint) -> EncoderConfig:
        if self.profile == "full":
            return EncoderConfig.full_profile(point.max_res)
        return desk_config_for_res(point.max_res)

    def test_k(self, point: SchedulePoint) -> int:
        cells = sum(self.config_for(point).cells)
        if point.test_k is not None:
            return min(point.test_k, cells)
        return int(math.floor(point.test_fraction * cells + 0.5))


def desk_config_for_res(max_res: int, base: EncoderConfig | None = None) -> EncoderConfig:
    base = base or EncoderConfig()
    ladder = [m for m in DESK_LADDER if base.low_res_side * m <= max_res]
    if not ladder:
        raise ValueError(f"max_res {max_res} below the first scale {base.low_res_side * DESK_LADDER[0]}")
    return base.with_scales(ladder)


def load_schedule(path) -> ScalingSchedule:
    raw = json.loads(Path(path).read_text())
    unknown = sorted(set(raw) - {"regime", "points", "profile"})
    if unknown:
        raise ValueError(f"unknown schedule field {unknown[0]!r}")
    pts = []
    for p in raw["points"]:
        bad = sorted(set(p) - {"max_res", "train_fraction", "test_fraction", "test_k"})
        if bad:
            raise ValueError(f"unknown schedule point field {bad[0]!r}")
        pts.append(SchedulePoint(int(p["max_res"]), float(p.get("train_fraction", 1.0)),
                                 None if p.get("test_fraction") is None else float(p["test_fraction"]),
                                 None if p.get("test_k") is None else int(p["test_k"])))
    return ScalingSchedule(raw["regime"], pts, raw.get("profile", "desk"))


def checkpoint_name(point: SchedulePoint) -> str:
    return f"res{point.max_res}_train{point.train_fraction:g}.ckpt"


def _eval_point(model: PS3Encoder, eval_set, total_k: int, group: int = 8) -> tuple[float | None, float | None]:
    """Top-down recall at a fixed budget and caption retrieval with all selected tokens pooled."""
    cfg = model.cfg
    recalls, correct, count = [], 0, 0
    items = list(eval_set)
    for start in range(0, len(items), group):
        chunk = items[start:start + group]
        embs, txts = [], []
        for img, region, (w, h) in chunk:
            pyr = build_pyramid(img, cfg)
            tokens, cache = model.encode_low_res(pyr)
            aux = model.aux_highres_encode(pyr)
            txt = model.text_encode(region.caption)
            score = model.score_maps(tokens, aux, txt, pyr.grids)
            sel = SelectionSet([T.top_k(score.array(s).reshape(-1), k)
                                for s, k in enumerate(allocate_k(total_k, cfg.cells))])
            r = recall_eval(sel, [region.box], pyr.grids, w, h)
            if r is not None:
                recalls.append(r)
            if len(chunk) == group and sel.total:
                feats = model.encode_high_res(pyr, sel, cache)
                embs.append(model.attention_pool(feats, np.ones(sel.total, dtype=bool)).data)
                txts.append(txt.data)
        if len(embs) == group:
            e = np.stack(embs)
            e /= np.linalg.norm(e, axis=1, keepdims=True) + 1e-12
            sims = e @ np.stack(txts).T
            correct += int((np.argmax(sims, axis=1) == np.arange(group)).sum())
            count += group
    return (float(np.mean(recalls)) if recalls else None), (correct / count if count else None)


def run_scaling(schedule: ScalingSchedule, checkpoints_dir=None, eval_set=None) -> list[dict]:
    """One row per point. Without ``checkpoints_dir`` only accounting columns are filled."""
    rows = []
    for p in schedule.points:
        cfg = schedule.config_for(p)
        k = schedule.test_k(p)
        ks = allocate_k(k, cfg.cells)
        rep = count_tokens(cfg, ks)
        row = {"regime": schedule.regime, "max_res": p.max_res, "train_fraction": p.train_fraction,
               "test_fraction": p.test_fraction if p.test_fraction is not None else k / sum(cfg.cells),
               "scale_sides": "x".join(map(str, cfg.scale_sides)), "selected": k,
               "hr_tokens": rep.hr_tokens, "low_res_tokens": rep.low_res_tokens,
               "flops_stage1": rep.flops_stage1, "flops_aux": rep.flops_aux, "flops_stage3": rep.flops_stage3,
               "recall": None, "retrieval": None, "checkpoint": "", "checkpoint_hash": "", "status": "accounting-only"}
        if checkpoints_dir is not None:
            path = Path(checkpoints_dir) / checkpoint_name(p)
            row["checkpoint"] = path.name
            if not path.exists():
                row["status"] = f"skipped: missing checkpoint {path.name}"
            else:
                try:
                    model, _, _ = load_model(path)
                except CheckpointError as exc:
                    row["status"] = f"skipped: {exc}"
                else:
                    row["checkpoint_hash"] = file_hash(path)
                    k_model = min(k, sum(model.cfg.cells))
                    row["recall"], row["retrieval"] = _eval_point(model, eval_set or [], k_model)
                    row["status"] = "ok"
        rows.append(row)
    return rows


def write_bench_csv(path, rows: Sequence[dict]) -> None:
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in BENCH_COLUMNS])
