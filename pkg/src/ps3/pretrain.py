"""Localized contrastive pre-training with selection supervision.

Each batch mixes global samples (low-res tokens pooled against the whole-image
caption) and local samples (high-res tokens at the box's cells pooled against
the region caption). Selection heads are supervised with BCE + DICE against
box-derived maps for both the caption prompt and the bottom-up prompt.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_model, save_model
from .datagen import DatasetRecord, Region, load_image, read_dataset
from .encoder import (ConfigError, EncoderConfig, ImagePyramid, KVCache, PS3Encoder, ScoreMap,
                      SelectionSet, allocate_k, build_pyramid, cell_centers_in_box, selection_score)
from .tensor import DimensionError, Tape, Tensor

log = logging.getLogger(__name__)

__all__ = [
    "Ablation", "TrainConfig", "Sample", "TrainBatch", "BatchError", "NumericError",
    "ground_truth_score_map", "bottom_up_gt", "sigmoid_contrastive_loss", "selection_loss",
    "build_batch", "ImageStore", "batch_loss", "AdamW", "pretrain_step", "evaluate",
    "train_loop", "load_config", "save_config", "METRIC_COLUMNS",
]


class BatchError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Ablation:
    """Design switches; ``True`` is the full method and each ``False`` is one ablation row."""

    gt_selection: bool = True
    inbox_pool: bool = True
    mix_global: bool = True
    avoid_intra_image: bool = True
    multi_scale: bool = True
    scale_pe: bool = True
    kv_cache: bool = True

    CLI_NAMES = {
        "gt-selection": "gt_selection",
        "inbox-pool": "inbox_pool",
        "mix-global": "mix_global",
        "intra-image": "avoid_intra_image",
        "multi-scale": "multi_scale",
        "scale-pe": "scale_pe",
        "kv-cache": "kv_cache",
    }

    def without(self, *names: str) -> "Ablation":
        off = {}
        for n in names:
            key = self.CLI_NAMES.get(n, n)
            if key not in {f.name for f in fields(self)}:
                raise ConfigError(f"unknown ablation {n!r}; choose from {sorted(self.CLI_NAMES)}")
            off[key] = False
        return replace(self, **off)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    samples_per_epoch: int = 16000
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 3e-4
    global_ratio: float = 0.25
    w_contrastive: float = 1.0
    w_ce: float = 1.0
    w_dice: float = 1.0
    temperature_init: float = math.log(10.0)
    bias_init: float = -10.0
    # patches selected per local sample, split over scales by cell count
    train_select_k: int = 80
    holdout_records: int = 128
    eval_every: int = 250
    eval_regions: int = 96
    checkpoint_every: int = 500
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)

    def __post_init__(self):
        for name in ("epochs", "samples_per_epoch", "batch_size", "eval_every", "checkpoint_every", "eval_regions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("learning_rate", "weight_decay", "warmup_steps", "w_contrastive", "w_ce", "w_dice",
                     "holdout_records", "train_select_k"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 <= self.global_ratio <= 1.0:
            raise ConfigError("global_ratio must be in [0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must be in [0, 1)")

    @property
    def steps(self) -> int:
        return self.epochs * (self.samples_per_epoch // self.batch_size)

    @property
    def num_global(self) -> int:
        return int(math.floor(self.global_ratio * self.batch_size + 0.5))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = asdict(self.ablation)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown train config field {unknown[0]!r}")
        if "ablation" in d:
            ab = d["ablation"]
            bad = sorted(set(ab) - {f.name for f in fields(Ablation)})
            if bad:
                raise ConfigError(f"unknown ablation field {bad[0]!r}")
            d["ablation"] = Ablation(**ab)
        for name, v in d.items():
            if name != "ablation" and (isinstance(v, bool) or not isinstance(v, (int, float))):
                raise ConfigError(f"train config field {name!r} must be a number")
        return cls(**d)


def load_config(path) -> tuple[EncoderConfig, TrainConfig]:
    """JSON file ``{"encoder": {...}, "train": {...}}``; both sections optional."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    unknown = sorted(set(raw) - {"encoder", "train"})
    if unknown:
        raise ConfigError(f"unknown config section {unknown[0]!r}")
    enc = raw.get("encoder", {})
    bad = sorted(set(enc) - {f.name for f in fields(EncoderConfig)})
    if bad:
        raise ConfigError(f"unknown encoder config field {bad[0]!r}")
    try:
        enc_cfg = EncoderConfig.from_dict({k: tuple(v) if isinstance(v, list) else v for k, v in enc.items()})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return enc_cfg, TrainConfig.from_dict(raw.get("train", {}))


def save_config(path, enc: EncoderConfig, train: TrainConfig) -> None:
    Path(path).write_text(json.dumps({"encoder": enc.to_dict(), "train": train.to_dict()}, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# ground truth and losses


def ground_truth_score_map(region: Region, width: int, height: int, grids: Sequence[int]) -> ScoreMap:
    """{0,1} cell maps by centre containment; scales with no centre in the box are flagged."""
    x0, y0, x1, y1 = region.box
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"box {region.box} outside {width}x{height} image")
    maps = [cell_centers_in_box(region.box, width, height, g).astype(np.float64) for g in grids]
    return ScoreMap(maps, "ground-truth", [not m.any() for m in maps])


def bottom_up_gt(regions: Sequence[Region], width: int, height: int, grids: Sequence[int]) -> ScoreMap:
    maps = [np.zeros((g, g)) for g in grids]
    for r in regions:
        gt = ground_truth_score_map(r, width, height, grids)
        maps = [np.maximum(a, b) for a, b in zip(maps, gt.maps)]
    return ScoreMap(maps, "ground-truth", [not m.any() for m in maps])


def sigmoid_contrastive_loss(img_embs: Tensor, txt_embs: Tensor, t_prime: Tensor, b: Tensor,
                             pair_weights: np.ndarray | None = None) -> Tensor:
    """``-(1/N) sum_ij w_ij log sigmoid(z_ij (exp(t') <x_i, y_j> + b))`` with unit-normalized rows."""
    if img_embs.shape != txt_embs.shape or img_embs.ndim != 2:
        raise DimensionError(f"embedding shapes {img_embs.shape} and {txt_embs.shape} differ")
    n = img_embs.shape[0]
    sims = T.matmul(T.normalize(img_embs), T.transpose(T.normalize(txt_embs), (1, 0)))
    logits = sims * T.exp(t_prime) + b
    z = 2.0 * np.eye(n) - 1.0
    terms = T.log_sigmoid(logits * z)
    if pair_weights is not None:
        terms = terms * np.asarray(pair_weights)
    return T.tsum(terms) * (-1.0 / n)


def selection_loss(pred: Sequence[Tensor], gt: Sequence[np.ndarray]) -> tuple[Tensor, Tensor]:
    """Mean BCE and mean soft DICE over scales; maps are ``[..., g, g]`` with optional batch dims.

    Predicted cosine scores map to probabilities by ``(s + 1) / 2``; BCE clamps
    them to ``[1e-7, 1 - 1e-7]`` and DICE uses smoothing 1 per map.
    """
    if len(pred) != len(gt):
        raise DimensionError("prediction and ground truth have different scale counts")
    bces, dices = [], []
    for s, g in zip(pred, gt):
        g = np.asarray(g, dtype=s.dtype)
        if s.shape != g.shape:
            raise DimensionError(f"score map {s.shape} vs ground truth {g.shape}")
        p = (s + 1.0) * 0.5
        pc = T.clip(p, 1e-7, 1.0 - 1e-7)
        bce = T.mean(T.log(pc) * g + T.log(1.0 - pc) * (1.0 - g)) * -1.0
        axes = (-2, -1)
        inter = T.tsum(p * g, axis=axes)
        denom = T.tsum(p, axis=axes) + g.sum(axis=axes)
        dice = 1.0 - (inter * 2.0 + 1.0) / (denom + 1.0)
        bces.append(bce)
        dices.append(T.mean(dice))
    k = 1.0 / len(pred)
    return T.tsum(T.concat([T.reshape(b, (1,)) for b in bces])) * k, \
        T.tsum(T.concat([T.reshape(d, (1,)) for d in dices])) * k


# ---------------------------------------------------------------------------
# batches


@dataclass
class Sample:
    image_id: int
    region: Region
    kind: str  # "global" | "local"
    record: DatasetRecord


@dataclass
class TrainBatch:
    samples: list[Sample]
    use_gt_selection: bool = True
    inbox_pool_only: bool = True
    allow_intra_image: bool = False
    global_ratio: float = 0.25

    @property
    def image_ids(self) -> list[int]:
        return [s.image_id for s in self.samples]


def _usable(r: Region) -> bool:
    return len(r.caption) > 0


def build_batch(dataset: Sequence[DatasetRecord], cfg: TrainConfig, rng: np.random.Generator,
                ids: Sequence[int] | None = None) -> TrainBatch:
    """Draw ``cfg.batch_size`` samples; each draw picks a source with equal probability.

    ``ids`` restricts sampling to a subset of dataset indices (the training split).
    """
    ab = cfg.ablation
    ids = list(range(len(dataset))) if ids is None else list(ids)
    if not ids:
        raise BatchError("dataset is empty")
    allow_intra = not ab.avoid_intra_image
    n_global = cfg.num_global if ab.mix_global else 0
    kinds = ["global"] * n_global + ["local"] * (cfg.batch_size - n_global)
    by_source: dict[str, dict[str, list[int]]] = {}
    for i in ids:
        rec = dataset[i]
        src = by_source.setdefault(rec.source, {"global": [], "local": []})
        if rec.global_region is not None and _usable(rec.global_region):
            src["global"].append(i)
        if any(_usable(r) for r in rec.local_regions):
            src["local"].append(i)
    sources = sorted(by_source)
    used: set[int] = set()
    samples = []
    for kind in kinds:
        order = [sources[int(rng.integers(len(sources)))]]
        order += [s for s in sources if s != order[0]]
        pick = None
        for src in order:
            pool = [i for i in by_source[src][kind] if allow_intra or i not in used]
            if pool:
                pick = pool[int(rng.integers(len(pool)))]
                break
        if pick is None:
            raise BatchError(f"not enough distinct images with {kind} captions for a batch of {cfg.batch_size}")
        rec = dataset[pick]
        if kind == "global":
            region = rec.global_region
        else:
            regs = [r for r in rec.local_regions if _usable(r)]
            region = regs[int(rng.integers(len(regs)))]
        used.add(pick)
        samples.append(Sample(pick, region, kind, rec))
    return TrainBatch(samples, ab.gt_selection, ab.inbox_pool, allow_intra, cfg.global_ratio)


class ImageStore:
    """Loads dataset rasters on demand and keeps them as uint8."""

    def __init__(self, index_path, records: Sequence[DatasetRecord], max_cached: int = 4096):
        self.index_path = Path(index_path)
        self.records = records
        self.max_cached = max_cached
        self._cache: dict[int, np.ndarray] = {}

    def image(self, i: int) -> np.ndarray:
        img = self._cache.get(i)
        if img is None:
            img = np.rint(load_image(self.index_path, self.records[i]) * 255).astype(np.uint8)
            if len(self._cache) < self.max_cached:
                self._cache[i] = img
        return img.astype(np.float32) / 255.0

    def pyramid(self, i: int, cfg: EncoderConfig) -> ImagePyramid:
        return build_pyramid(self.image(i), cfg)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class BatchOutput:
    loss: Tensor
    contrastive: Tensor
    bce: Tensor
    dice: Tensor
    image_embs: Tensor
    text_embs: Tensor
    selections: dict[int, SelectionSet]

    def metrics(self) -> dict[str, float]:
        return {"loss": float(self.loss.data), "contrastive": float(self.contrastive.data),
                "bce": float(self.bce.data), "dice": float(self.dice.data)}


def default_k(enc: EncoderConfig, cfg: TrainConfig) -> list[int]:
    if not cfg.ablation.multi_scale:
        cells = enc.cells
        return [0] * (len(cells) - 1) + [min(cfg.train_select_k, cells[-1])]
    return allocate_k(cfg.train_select_k, enc.cells)


def local_selection(gt: ScoreMap, pred: ScoreMap | None, k: Sequence[int], use_gt: bool,
                    inbox_only: bool) -> tuple[SelectionSet, np.ndarray]:
    """Selected cells per scale and the pooling mask over them (in-box cells, or all if none)."""
    source = gt if use_gt else pred
    sel = SelectionSet([T.top_k(source.array(s).reshape(-1), int(ks)) for s, ks in enumerate(k)])
    keep = np.concatenate([gt.array(s).reshape(-1)[idx] > 0 for s, idx in enumerate(sel.indices)]) \
        if sel.total else np.zeros(0, dtype=bool)
    if not inbox_only or not keep.any():
        keep = np.ones(sel.total, dtype=bool)
    return sel, keep


def batch_loss(model: PS3Encoder, samples: Sequence[Sample], pyramids: Sequence[ImagePyramid],
               cfg: TrainConfig, k_per_sample: Sequence[Sequence[int]] | None = None) -> BatchOutput:
    """Total training loss for one batch; ``pyramids[i]`` belongs to ``samples[i]``."""
    enc, P, ab = model.cfg, model.params, cfg.ablation
    B = len(samples)
    grids = enc.grids
    low_patches = np.stack([p.low_res_patches() for p in pyramids])
    tokens, cache = model.encode_low_res_batch(low_patches)
    aux = model.aux_encode_batch(np.stack([p.scales[enc.aux_scale] for p in pyramids]))
    txt = model.text_encode_batch([s.region.caption for s in samples])

    local_idx = [i for i, s in enumerate(samples) if s.kind == "local"]
    global_idx = [i for i, s in enumerate(samples) if s.kind == "global"]
    gts = {i: ground_truth_score_map(samples[i].region, samples[i].record.width, samples[i].record.height, grids)
           for i in local_idx}

    # selection supervision: caption prompts on local samples, bottom-up prompt on every image
    bce_terms, dice_terms = [], []
    td_maps = None
    if local_idx:
        li = np.asarray(local_idx)
        td_maps = model_score_maps(model, T.take(tokens, li, 0), T.take(aux, li, 0), T.take(txt, li, 0))
        bce, dice = selection_loss(td_maps, [np.stack([gts[i].array(s) for i in local_idx]) for s in range(len(grids))])
        bce_terms.append(bce)
        dice_terms.append(dice)
    bu_maps = model_score_maps(model, tokens, aux, P["bottom_up"])
    bu_gt = [bottom_up_gt(s.record.local_regions, s.record.width, s.record.height, grids) for s in samples]
    bce, dice = selection_loss(bu_maps, [np.stack([g.array(s) for g in bu_gt]) for s in range(len(grids))])
    bce_terms.append(bce)
    dice_terms.append(dice)

    # pooled image embeddings
    embs: dict[int, Tensor] = {}
    if global_idx:
        gi = np.asarray(global_idx)
        pooled = model.attention_pool_batch(T.take(tokens, gi, 0), np.ones((len(gi), enc.low_tokens), dtype=bool))
        for j, i in enumerate(global_idx):
            embs[i] = pooled[j]
    selections: dict[int, SelectionSet] = {}
    groups: dict[int, list[tuple[int, SelectionSet, np.ndarray]]] = {}
    for j, i in enumerate(local_idx):
        k = k_per_sample[i] if k_per_sample is not None else default_k(enc, cfg)
        pred = None
        if not ab.gt_selection:
            pred = ScoreMap([td_maps[s].data[j] for s in range(len(grids))])
        sel, keep = local_selection(gts[i], pred, k, ab.gt_selection, ab.inbox_pool)
        selections[i] = sel
        if sel.total == 0:
            raise BatchError(f"sample {i} selects no patches")
        groups.setdefault(sel.total, []).append((i, sel, keep))
    for _, members in sorted(groups.items()):
        idx = np.asarray([m[0] for m in members])
        patches = np.stack([model.gather_patches(pyramids[i], sel) for i, sel, _ in members])
        pos = T.concat([T.reshape(model.scale_positional_embedding(sel, grids, ab.scale_pe), (1, sel.total, enc.embed_dim))
                        for _, sel, _ in members], axis=0)
        sub_cache = KVCache([T.take(k, idx, 0) for k in cache.keys], [T.take(v, idx, 0) for v in cache.values]) \
            if ab.kv_cache else None
        feats = model.encode_high_res_batch(patches, pos, sub_cache)
        pooled = model.attention_pool_batch(feats, np.stack([m[2] for m in members]))
        for j, (i, _, _) in enumerate(members):
            embs[i] = pooled[j]

    # contrastive term
    order = [i for i in range(B) if ab.mix_global or samples[i].kind == "local"]
    if not order:
        order = list(range(B))
    img = T.concat([T.reshape(embs[i], (1, enc.embed_dim)) for i in order], axis=0)
    txt_sel = T.take(txt, np.asarray(order), 0)
    weights = None
    if ab.avoid_intra_image:
        ids = np.asarray([samples[i].image_id for i in order])
        weights = ((ids[:, None] != ids[None, :]) | np.eye(len(order), dtype=bool)).astype(np.float64)
    con = sigmoid_contrastive_loss(img, txt_sel, P["loss.t"], P["loss.b"], weights)
    bce_total = bce_terms[0] if len(bce_terms) == 1 else bce_terms[0] + bce_terms[1]
    dice_total = dice_terms[0] if len(dice_terms) == 1 else dice_terms[0] + dice_terms[1]
    loss = con * cfg.w_contrastive + bce_total * cfg.w_ce + dice_total * cfg.w_dice
    return BatchOutput(loss, con, bce_total, dice_total, img, txt_sel, selections)


def model_score_maps(model: PS3Encoder, tokens: Tensor, aux: Tensor, prompt: Tensor) -> list[Tensor]:
    return selection_score(tokens, aux, prompt, model.cfg.grids, model.cfg.smooth_sigma)


# ---------------------------------------------------------------------------
# optimisation


class AdamW:
    """Adaptive moments with decoupled weight decay on matrices; linear warmup then constant rate."""

    def __init__(self, model: PS3Encoder, cfg: TrainConfig):
        self.cfg = cfg
        self.model = model
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in model.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in model.params.items()}

    def lr(self, step: int | None = None) -> float:
        s = self.step_count if step is None else step
        if self.cfg.warmup_steps == 0:
            return self.cfg.learning_rate
        return self.cfg.learning_rate * min(1.0, (s + 1) / self.cfg.warmup_steps)

    def step(self) -> float:
        cfg = self.cfg
        lr = self.lr()
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - cfg.beta1 ** t
        c2 = 1.0 - cfg.beta2 ** t
        for k, p in self.model.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            if lr == 0:
                continue
            if p.data.ndim >= 2 and cfg.weight_decay:
                p.data -= (lr * cfg.weight_decay) * p.data
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + 1e-8)).astype(p.data.dtype)
        return lr

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, extra: dict[str, np.ndarray], step: int) -> None:
        for k in self.m:
            if f"opt.m.{k}" in extra:
                self.m[k] = extra[f"opt.m.{k}"].astype(self.m[k].dtype)
                self.v[k] = extra[f"opt.v.{k}"].astype(self.v[k].dtype)
        self.step_count = step


def pretrain_step(batch: TrainBatch, model: PS3Encoder, cfg: TrainConfig, opt: AdamW,
                  pyramids: Sequence[ImagePyramid]) -> dict[str, float]:
    """One forward/backward/update; raises ``NumericError`` on a non-finite loss."""
    model.zero_grad()
    with Tape() as tape:
        out = batch_loss(model, batch.samples, pyramids, cfg)
    metrics = out.metrics()
    if not all(math.isfinite(v) for v in metrics.values()):
        raise NumericError(f"non-finite loss at step {opt.step_count}: {metrics}")
    tape.backward(out.loss)
    sq = sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in model.parameters() if p.grad is not None)
    if not math.isfinite(sq):
        raise NumericError(f"non-finite gradient at step {opt.step_count}")
    metrics["grad_norm"] = math.sqrt(sq)
    metrics["lr"] = opt.step()
    return metrics


# ---------------------------------------------------------------------------
# evaluation


def eval_samples(records: Sequence[DatasetRecord], ids: Sequence[int], limit: int) -> list[Sample]:
    """First captioned local region of each held-out record, in id order."""
    out = []
    for i in ids:
        regs = [r for r in records[i].local_regions if _usable(r)]
        if regs:
            out.append(Sample(i, regs[0], "local", records[i]))
        if len(out) == limit:
            break
    return out


def evaluate(model: PS3Encoder, samples: Sequence[Sample], store: ImageStore, cfg: TrainConfig,
             group: int = 8) -> dict[str, float]:
    """Top-down selection recall and IoU at k = in-box cells, and top-1 caption retrieval among ``group``."""
    enc = model.cfg
    grids = enc.grids
    inter = union = boxed = 0
    correct = total = 0
    for start in range(0, len(samples), group):
        chunk = list(samples[start:start + group])
        pyrs = [store.pyramid(s.image_id, enc) for s in chunk]
        tokens, _ = model.encode_low_res_batch(np.stack([p.low_res_patches() for p in pyrs]))
        aux = model.aux_encode_batch(np.stack([p.scales[enc.aux_scale] for p in pyrs]))
        txt = model.text_encode_batch([s.region.caption for s in chunk])
        maps = model_score_maps(model, tokens, aux, txt)
        for j, s in enumerate(chunk):
            gt = ground_truth_score_map(s.region, s.record.width, s.record.height, grids)
            for si in range(len(grids)):
                box = gt.array(si).reshape(-1) > 0
                sel = np.zeros_like(box)
                sel[T.top_k(maps[si].data[j].reshape(-1), int(box.sum()))] = True
                inter += int((sel & box).sum())
                union += int((sel | box).sum())
                boxed += int(box.sum())
        if len(chunk) == group:
            out = batch_loss(model, chunk, pyrs, replace(cfg, ablation=replace(cfg.ablation, gt_selection=True)))
            sims = T.normalize(out.image_embs).data @ out.text_embs.data.T
            correct += int((np.argmax(sims, axis=1) == np.arange(group)).sum())
            total += group
    return {
        "td_recall": inter / boxed if boxed else float("nan"),
        "td_iou": inter / union if union else float("nan"),
        "retrieval": correct / total if total else float("nan"),
    }


# ---------------------------------------------------------------------------
# loop

METRIC_COLUMNS = ["step", "loss", "contrastive", "bce", "dice", "lr", "grad_norm", "td_recall", "td_iou", "retrieval"]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return str(v) if isinstance(v, int) else f"{v:.6g}"


def split_ids(records: Sequence[DatasetRecord], holdout: int) -> tuple[list[int], list[int]]:
    n = len(records)
    h = min(holdout, n // 2)
    return list(range(n - h)), list(range(n - h, n))


def train_loop(index_path, enc: EncoderConfig, cfg: TrainConfig, out_dir, resume: bool = False,
               progress: Callable[[dict], None] | None = None) -> Path:
    """Train and write ``metrics.csv`` plus checkpoints into ``out_dir``; returns the final checkpoint.

    Each step draws its batch from ``default_rng([seed, step])``, so a resumed run
    continues exactly where the interrupted one stopped.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = read_dataset(index_path)
    store = ImageStore(index_path, records)
    train_ids, held_ids = split_ids(records, cfg.holdout_records)
    held = eval_samples(records, held_ids, cfg.eval_regions)
    last = out / "last.ckpt"
    metrics_path = out / "metrics.csv"

    start = 0
    if resume and last.exists():
        model, meta, extra = load_model(last)
        start = int(meta["step"])
        opt = AdamW(model, cfg)
        opt.load_state(extra, start)
        rows = []
        if metrics_path.exists():
            with open(metrics_path) as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= start]
        _write_rows(metrics_path, rows, mode="w")
    else:
        model = PS3Encoder(enc)
        model.params["loss.t"].data[...] = cfg.temperature_init
        model.params["loss.b"].data[...] = cfg.bias_init
        opt = AdamW(model, cfg)
        _write_rows(metrics_path, [], mode="w")
        if held:
            row = {"step": 0, **evaluate(model, held, store, cfg)}
            _write_rows(metrics_path, [row])
            if progress:
                progress(row)

    for step in range(start, cfg.steps):
        rng = np.random.default_rng([cfg.seed, step])
        batch = build_batch(records, cfg, rng, train_ids)
        pyrs = [store.pyramid(s.image_id, enc) for s in batch.samples]
        m = pretrain_step(batch, model, cfg, opt, pyrs)
        row = {"step": step + 1, **m}
        done = step + 1
        if held and (done % cfg.eval_every == 0 or done == cfg.steps):
            row.update(evaluate(model, held, store, cfg))
        _write_rows(metrics_path, [row])
        if progress:
            progress(row)
        if done % cfg.checkpoint_every == 0 or done == cfg.steps:
            meta = {"step": done, "train": cfg.to_dict()}
            save_model(last, model, meta, opt.state())
            if done % cfg.checkpoint_every == 0:
                save_model(out / f"step{done:06d}.ckpt", model, meta, opt.state())
    if not last.exists():
        save_model(last, model, {"step": cfg.steps, "train": cfg.to_dict()}, opt.state())
    return last


def _write_rows(path: Path, rows: Sequence[dict], mode: str = "a") -> None:
    new = mode == "w" or not path.exists()
    with open(path, mode, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(_num(r.get(c))) for c in METRIC_COLUMNS])


def _num(v):
    if isinstance(v, str):
        if v == "":
            return None
        return int(v) if v.lstrip("-").isdigit() else float(v)
    return v
