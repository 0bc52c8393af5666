"""``ps3`` command line: curate, synth, pretrain, select, bench.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import datagen as D
from . import harness as H
from . import pretrain as PT
from .checkpoint import CheckpointError, load_model
from .encoder import ConfigError, EncoderConfig, SelectionSet, build_pyramid

log = logging.getLogger("ps3")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=100, max_help_position=34)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ps3", description="Scale-selective vision pre-training at desk scale.",
                formatter_class=_formatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    c = sub.add_parser("curate", help="pick salient boxes from mask files", formatter_class=_formatter,
                       description="Score preset boxes against each mask file and keep the top-k disjoint ones.")
    c.add_argument("--masks", required=True, metavar="GLOB", help="mask files (PS3MASK text format)")
    c.add_argument("--images", metavar="GLOB", help="images matched to masks by file stem")
    c.add_argument("--k", type=int, default=4, help="boxes kept per image (default 4)")
    c.add_argument("--fraction", type=float, default=0.2, help="box side over shortest image side (default 0.2)")
    c.add_argument("--out", required=True, metavar="DIR", help="output directory for index.jsonl")

    s = sub.add_parser("synth", help="generate a synthetic dataset", formatter_class=_formatter,
                       description="Render scenes and documents with exact region captions.")
    s.add_argument("--spec", metavar="FILE", help="JSON scene spec (SceneSpec fields, paste_side, paste_fraction)")
    s.add_argument("--count", type=int, required=True, help="number of records")
    s.add_argument("--seed", type=int, help="override the spec seed")
    s.add_argument("--out", required=True, metavar="DIR", help="output dataset directory")

    t = sub.add_parser("pretrain", help="train an encoder", formatter_class=_formatter,
                       description="Run the training loop; writes metrics.csv and checkpoints.")
    t.add_argument("--config", metavar="FILE", help='JSON {"encoder": {...}, "train": {...}}')
    t.add_argument("--dataset", required=True, metavar="INDEX", help="dataset index.jsonl or its directory")
    t.add_argument("--out", required=True, metavar="DIR", help="run directory")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--steps", type=int, help="override the number of optimizer steps")
    t.add_argument("--ablate", action="append", default=[], metavar="NAME",
                   choices=sorted(PT.Ablation.CLI_NAMES),
                   help="disable one design; repeatable: " + ", ".join(sorted(PT.Ablation.CLI_NAMES)))
    t.add_argument("--resume", action="store_true", help="continue from DIR/last.ckpt")

    e = sub.add_parser("select", help="score and select patches for one image", formatter_class=_formatter,
                       description="Write per-scale heatmaps, selection overlays, the selection and a pooled embedding.")
    e.add_argument("--checkpoint", required=True, metavar="FILE", help="trained checkpoint")
    e.add_argument("--image", required=True, metavar="PPM", help="input image")
    mode = e.add_mutually_exclusive_group(required=True)
    mode.add_argument("--prompt", metavar="TEXT", help='caption tokens, e.g. "red triangle upper-left"')
    mode.add_argument("--bottom-up", action="store_true", help="use the learned saliency prompt")
    budget = e.add_mutually_exclusive_group()
    budget.add_argument("--k", type=int, help="patches to select over all scales")
    budget.add_argument("--fraction", type=float, help="share of all cells to select (default 0.1)")
    e.add_argument("--out", required=True, metavar="DIR", help="output directory")

    b = sub.add_parser("bench", help="token, FLOP and scaling table", formatter_class=_formatter,
                       description="One CSV row per schedule point; accounting-only without --checkpoints.")
    b.add_argument("--schedule", required=True, metavar="FILE", help="JSON schedule (regime, profile, points)")
    b.add_argument("--checkpoints", metavar="DIR", help="directory of res<R>_train<F>.ckpt files")
    b.add_argument("--dataset", metavar="INDEX", help="evaluation dataset for recall and retrieval")
    b.add_argument("--eval-regions", type=int, default=64, help="held-out regions to evaluate (default 64)")
    b.add_argument("--out", required=True, metavar="CSV", help="output CSV path")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_curate(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    mask_files = sorted(glob.glob(args.masks))
    if not mask_files:
        raise D.DatasetFormatError(f"no mask files match {args.masks!r}")
    images = {Path(p).stem: p for p in sorted(glob.glob(args.images))} if args.images else {}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, skipped = [], 0
    for mf in mask_files:
        try:
            masks = D.read_masks(mf)
        except (D.MaskFormatError, OSError, UnicodeDecodeError) as exc:
            log.warning("skipping %s: %s", mf, exc)
            skipped += 1
            continue
        stem = Path(mf).stem
        img = images.get(stem, str(Path(mf).with_name(stem + ".ppm")))
        cands = D.preset_boxes((masks.width, masks.height), args.fraction)
        boxes = D.select_salient_boxes(cands, masks, args.k)
        regions = [D.Region(tuple(float(v) for v in bx), [], "local") for bx in boxes]
        records.append(D.DatasetRecord(os.path.relpath(img, out), masks.width, masks.height, regions, "curated"))
    D.write_index(out / "index.jsonl", records)
    print(f"curated {len(records)} images, skipped {skipped}")
    if skipped == len(mask_files):
        return EXIT_DATA
    return EXIT_OK


def _load_spec(path, seed):
    raw = json.loads(Path(path).read_text()) if path else {}
    extra = {k: raw.pop(k) for k in ("paste_side", "paste_fraction") if k in raw}
    names = {f.name for f in dataclasses.fields(D.SceneSpec)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown spec field {key!r}")
    if "palette" in raw:
        raw["palette"] = tuple(raw["palette"])
    if seed is not None:
        raw["seed"] = seed
    try:
        spec = D.SceneSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid spec: {exc}") from exc
    return spec, extra


def dataset_hash(index: Path) -> str:
    h = hashlib.sha256(index.read_bytes())
    for rec in D.read_dataset(index):
        h.update((index.parent / rec.image).read_bytes())
    return h.hexdigest()[:16]


def cmd_synth(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    spec, extra = _load_spec(args.spec, args.seed)
    if extra.get("paste_side") is not None and extra["paste_side"] < spec.resolution:
        raise ConfigError("paste_side must be at least the scene resolution")
    index = D.synth_dataset(args.out, args.count, spec, **extra)
    print(f"wrote {args.count} records to {index} (hash {dataset_hash(index)})")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    if args.config:
        enc, cfg = PT.load_config(args.config)
    else:
        enc, cfg = EncoderConfig(), PT.TrainConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.steps is not None:
        if args.steps < 1:
            raise UsageError("--steps must be >= 1")
        cfg = dataclasses.replace(cfg, epochs=1, samples_per_epoch=args.steps * cfg.batch_size)
    if args.ablate:
        cfg = dataclasses.replace(cfg, ablation=cfg.ablation.without(*args.ablate))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    PT.save_config(out / "config.json", enc, cfg)

    def progress(row):
        if "td_iou" in row:
            log.info("step %d: %s", row["step"], {k: round(v, 4) for k, v in row.items() if k != "step"})

    last = PT.train_loop(args.dataset, enc, cfg, out, resume=args.resume, progress=progress)
    print(f"finished {cfg.steps} steps; checkpoint {last}; metrics {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_select(args) -> int:
    model, _, _ = load_model(args.checkpoint)
    cfg = model.cfg
    if args.prompt is not None:
        try:
            ids = D.parse_prompt(args.prompt)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        prompt = model.text_encode(ids)
    else:
        prompt = model.bottom_up_prompt()
    img = D.read_ppm(args.image).astype(np.float32) / 255.0
    pyr = build_pyramid(img, cfg)
    cells = sum(cfg.cells)
    if args.k is not None:
        if not 0 <= args.k <= cells:
            raise UsageError(f"--k must be in [0, {cells}]")
        total = args.k
    else:
        frac = 0.1 if args.fraction is None else args.fraction
        if not 0 < frac <= 1:
            raise UsageError("--fraction must be in (0, 1]")
        total = int(np.floor(frac * cells + 0.5))
    feats, rounds = model.encode_multi_round(pyr, prompt, total)
    sel = SelectionSet([sum((r.indices[s] for r in rounds), []) for s in range(len(cfg.grids))])
    tokens, _ = model.encode_low_res(pyr)
    score = model.score_maps(tokens, model.aux_highres_encode(pyr), prompt, pyr.grids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, side in enumerate(cfg.scale_sides):
        D.write_ppm(out / f"heatmap_{side}.ppm", H.render_score_heatmap(score, s))
        D.write_ppm(out / f"overlay_{side}.ppm", H.render_selection_overlay(pyr, sel, s))
    text = sel.to_text(cfg.scale_sides)
    (out / "selection.txt").write_text(text + "\n")
    if sel.total:
        emb = model.attention_pool(feats, np.ones(sel.total, dtype=bool)).data
        (out / "embedding.txt").write_text(" ".join(f"{v:.6g}" for v in emb) + "\n")
    print(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        sched = H.load_schedule(args.schedule)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{args.schedule}: {exc}") from exc
    eval_set = []
    if args.dataset:
        recs = D.read_dataset(args.dataset)
        for s in PT.eval_samples(recs, range(len(recs)), args.eval_regions):
            eval_set.append((D.load_image(args.dataset, s.record), s.region, (s.record.width, s.record.height)))
    rows = H.run_scaling(sched, args.checkpoints, eval_set)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    H.write_bench_csv(args.out, rows)
    for r in rows:
        if r["status"].startswith("skipped"):
            log.warning("point res=%s train=%s %s", r["max_res"], r["train_fraction"], r["status"])
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


COMMANDS = {"curate": cmd_curate, "synth": cmd_synth, "pretrain": cmd_pretrain, "select": cmd_select,
            "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"ps3 {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PT.NumericError as exc:
        print(f"ps3 {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (D.DatasetFormatError, D.MaskFormatError, CheckpointError, PT.BatchError, OSError, ValueError) as exc:
        print(f"ps3 {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
