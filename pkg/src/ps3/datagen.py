"""Synthetic scenes and documents with exact region captions, saliency-box curation
over ingested masks, and the on-disk dataset format.

Images are 8-bit binary PPM (P6). The dataset index is JSON lines, one record
per line::

    {"image": "images/000001.ppm", "width": 256, "height": 256, "source": "natural",
     "regions": [{"box": [x0, y0, x1, y1], "caption": [3, 11, 19], "kind": "local"}, ...]}

Image paths are relative to the index file's directory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "VOCAB",
    "COLORS",
    "SHAPES",
    "POSITIONS",
    "token_id",
    "token_names",
    "parse_prompt",
    "Region",
    "DatasetRecord",
    "DatasetFormatError",
    "MaskSet",
    "MaskFormatError",
    "SceneSpec",
    "read_ppm",
    "write_ppm",
    "read_masks",
    "write_masks",
    "preset_boxes",
    "box_saliency",
    "select_salient_boxes",
    "boxes_overlap",
    "synth_scene",
    "paste_on_background",
    "write_dataset",
    "write_index",
    "read_dataset",
    "load_image",
    "synth_items",
    "synth_dataset",
]

# ---------------------------------------------------------------------------
# vocabulary

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (40, 90, 240),
    "yellow": (235, 215, 40),
    "magenta": (220, 50, 200),
    "cyan": (40, 210, 220),
    "orange": (245, 140, 30),
    "purple": (140, 60, 220),
}

_GLYPH_ART = {
    "plus": ["..#..", "..#..", "#####", "..#..", "..#.."],
    "cross": ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    "triangle": [".....", "..#..", ".###.", "#####", "....."],
    "tee": ["#####", "..#..", "..#..", "..#..", "..#.."],
    "ell": ["#....", "#....", "#....", "#....", "#####"],
    "diamond": ["..#..", ".#.#.", "#.#.#", ".#.#.", "..#.."],
    "square": [".....", ".###.", ".###.", ".###.", "....."],
    "vee": ["#...#", "#...#", ".#.#.", ".#.#.", "..#.."],
}
SHAPES = {name: np.array([[c == "#" for c in row] for row in art]) for name, art in _GLYPH_ART.items()}

POSITIONS = ["upper-left", "upper", "upper-right", "left", "center", "right",
             "lower-left", "lower", "lower-right"]

VOCAB: list[str] = ["<pad>", "<scene>", "<doc>"] + list(COLORS) + list(SHAPES) + POSITIONS
VOCAB += [f"<r{i:03d}>" for i in range(len(VOCAB), 256)]
_TOKEN_IDS = {name: i for i, name in enumerate(VOCAB)}


def token_id(name: str) -> int:
    return _TOKEN_IDS[name]


def token_names(ids: Iterable[int]) -> list[str]:
    return [VOCAB[i] for i in ids]


def parse_prompt(text: str) -> list[int]:
    """Map whitespace-separated token names (``"red triangle upper-left"``) to ids."""
    words = text.split()
    unknown = [w for w in words if w not in _TOKEN_IDS or w.startswith("<")]
    if unknown or not words:
        valid = ", ".join(list(COLORS) + list(SHAPES) + POSITIONS)
        raise ValueError(f"unknown prompt tokens {unknown}; valid tokens: {valid}")
    return [_TOKEN_IDS[w] for w in words]


def position_word(cx: float, cy: float, width: int, height: int) -> str:
    col = min(int(3 * cx / width), 2)
    row = min(int(3 * cy / height), 2)
    return POSITIONS[3 * row + col]


# ---------------------------------------------------------------------------
# records


class DatasetFormatError(ValueError):
    pass


@dataclass
class Region:
    box: tuple[float, float, float, float]
    caption: list[int]
    kind: str = "local"

    def validate(self, width: int, height: int) -> None:
        x0, y0, x1, y1 = self.box
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ValueError(f"box {self.box} outside {width}x{height} image")
        if self.kind not in ("local", "global"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.kind == "global" and tuple(self.box) != (0, 0, width, height):
            raise ValueError("global region must cover the whole image")
        if any(not 0 <= t < len(VOCAB) for t in self.caption):
            raise ValueError("caption token out of vocabulary")

    def to_json(self) -> dict:
        return {"box": list(self.box), "caption": list(self.caption), "kind": self.kind}


@dataclass
class DatasetRecord:
    image: str
    width: int
    height: int
    regions: list[Region]
    source: str = "natural"
    # glyph placements (x, y, shape, color); kept in memory only
    glyphs: list[tuple[int, int, str, str]] = field(default_factory=list, compare=False, repr=False)

    @property
    def local_regions(self) -> list[Region]:
        return [r for r in self.regions if r.kind == "local"]

    @property
    def global_region(self) -> Region | None:
        return next((r for r in self.regions if r.kind == "global"), None)

    def validate(self) -> None:
        if self.source not in ("natural", "document", "curated"):
            raise ValueError(f"unknown source {self.source!r}")
        for r in self.regions:
            r.validate(self.width, self.height)

    def to_json(self) -> dict:
        return {"image": self.image, "width": self.width, "height": self.height,
                "source": self.source, "regions": [r.to_json() for r in self.regions]}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetRecord":
        regions = [Region(tuple(r["box"]), [int(t) for t in r["caption"]], r.get("kind", "local"))
                   for r in d["regions"]]
        rec = cls(str(d["image"]), int(d["width"]), int(d["height"]), regions, d.get("source", "natural"))
        rec.validate()
        return rec


# ---------------------------------------------------------------------------
# PPM


def write_ppm(path, image: np.ndarray) -> None:
    """Write ``image[H, W, 3]``; floats in [0, 1] are quantized, uint8 is written as-is."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file into ``uint8[H, W, 3]``."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DatasetFormatError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = data[pos + 1: pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise DatasetFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# masks

MASK_HEADER = "PS3MASK 1"


class MaskFormatError(ValueError):
    pass


@dataclass
class MaskSet:
    """Binary masks as row runs: ``runs[i]`` is an int array of ``(y, x, length)`` rows."""

    width: int
    height: int
    runs: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.runs = [np.asarray(r, dtype=np.int64).reshape(-1, 3) for r in self.runs]
        for i, r in enumerate(self.runs):
            if len(r) == 0:
                raise MaskFormatError(f"mask {i} is empty")
            y, x, n = r[:, 0], r[:, 1], r[:, 2]
            if (n < 1).any() or (y < 0).any() or (y >= self.height).any() or (x < 0).any() \
                    or (x + n > self.width).any():
                raise MaskFormatError(f"mask {i} has a run outside the {self.width}x{self.height} image")

    @property
    def areas(self) -> list[int]:
        return [int(r[:, 2].sum()) for r in self.runs]

    def bitmap(self, i: int) -> np.ndarray:
        out = np.zeros((self.height, self.width), dtype=bool)
        for y, x, n in self.runs[i]:
            out[y, x:x + n] = True
        return out

    @classmethod
    def from_bitmaps(cls, bitmaps: Sequence[np.ndarray]) -> "MaskSet":
        if not bitmaps:
            raise ValueError("use MaskSet(width, height) for an empty set")
        h, w = bitmaps[0].shape
        runs = []
        for bm in bitmaps:
            rows = []
            for y in range(h):
                padded = np.concatenate([[False], bm[y].astype(bool), [False]])
                edges = np.flatnonzero(padded[1:] != padded[:-1])
                for a, b in zip(edges[::2], edges[1::2]):
                    rows.append((y, a, b - a))
            runs.append(np.array(rows, dtype=np.int64).reshape(-1, 3))
        return cls(w, h, runs)


def write_masks(path, masks: MaskSet) -> None:
    """Text format::

        PS3MASK 1
        size <width> <height>
        mask <run count>
        <y> <x> <length>        (one line per run, sorted by y then x, non-overlapping)
        ...
        end
    """
    lines = [MASK_HEADER, f"size {masks.width} {masks.height}"]
    for r in masks.runs:
        lines.append(f"mask {len(r)}")
        lines.extend(f"{y} {x} {n}" for y, x, n in r)
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def read_masks(path) -> MaskSet:
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def fail(lineno, msg):
        raise MaskFormatError(f"{path}:{lineno}: {msg}")

    if not lines or lines[0] != MASK_HEADER:
        fail(1, f"expected header {MASK_HEADER!r}")
    if len(lines) < 2:
        fail(2, "missing size line")
    parts = lines[1].split(" ")
    if len(parts) != 3 or parts[0] != "size" or not all(p.isdigit() for p in parts[1:]):
        fail(2, "expected 'size <width> <height>'")
    width, height = int(parts[1]), int(parts[2])
    runs: list[np.ndarray] = []
    i = 2
    while i < len(lines) and lines[i] != "end":
        parts = lines[i].split(" ")
        if len(parts) != 2 or parts[0] != "mask" or not parts[1].isdigit():
            fail(i + 1, "expected 'mask <run count>'")
        count = int(parts[1])
        rows = []
        for j in range(i + 1, i + 1 + count):
            if j >= len(lines):
                fail(j + 1, "unexpected end of file inside mask")
            vals = lines[j].split(" ")
            if len(vals) != 3 or not all(v.isdigit() for v in vals):
                fail(j + 1, "expected '<y> <x> <length>'")
            rows.append([int(v) for v in vals])
        arr = np.array(rows, dtype=np.int64).reshape(-1, 3)
        if len(arr) > 1:
            prev, cur = arr[:-1], arr[1:]
            ordered = (cur[:, 0] > prev[:, 0]) | ((cur[:, 0] == prev[:, 0]) & (cur[:, 1] >= prev[:, 1] + prev[:, 2]))
            if not ordered.all():
                fail(i + 3 + int(np.argmin(ordered)), "runs must be sorted and non-overlapping")
        runs.append(arr)
        i += 1 + count
    if i >= len(lines):
        fail(len(lines) + 1, "missing 'end'")
    if i != len(lines) - 1:
        fail(i + 2, "content after 'end'")
    try:
        return MaskSet(width, height, runs)
    except MaskFormatError as exc:
        raise MaskFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# saliency curation


def preset_boxes(dims: tuple[int, int], fraction: float = 0.2, side: float | None = None) -> list[tuple]:
    """Squares of side ``fraction * shortest side`` tiled with spacing equal to the side,
    each followed by its 1.5:1 and 1:1.5 equal-area variants sharing the same centre.
    """
    width, height = dims
    s = side if side is not None else fraction * min(width, height)
    if s > width or s > height or s <= 0:
        return [(0.0, 0.0, float(width), float(height))]
    r = math.sqrt(1.5)
    out = []
    for gy in range(int(height // s)):
        for gx in range(int(width // s)):
            cx, cy = (gx + 0.5) * s, (gy + 0.5) * s
            for w, h in ((s, s), (s * r, s / r), (s / r, s * r)):
                box = (max(cx - w / 2, 0.0), max(cy - h / 2, 0.0),
                       min(cx + w / 2, float(width)), min(cy + h / 2, float(height)))
                out.append(box)
    return out


def _pixel_span(lo: float, hi: float) -> tuple[int, int]:
    """Integer pixel range whose centres ``p + 0.5`` lie in ``[lo, hi)``."""
    return int(math.ceil(lo - 0.5)), int(math.ceil(hi - 0.5))


def box_saliency(box, masks: MaskSet) -> float:
    """Sum over masks of ``Area(image) / max(Area(mask), 40*40) * Area(mask ∩ box) / Area(mask)``.

    A pixel belongs to the box when its centre does.
    """
    x0, x1 = _pixel_span(box[0], box[2])
    y0, y1 = _pixel_span(box[1], box[3])
    img_area = masks.width * masks.height
    total = 0.0
    for r, area in zip(masks.runs, masks.areas):
        rows = (r[:, 0] >= y0) & (r[:, 0] < y1)
        if not rows.any():
            continue
        s, n = r[rows, 1], r[rows, 2]
        inter = int(np.clip(np.minimum(s + n, x1) - np.maximum(s, x0), 0, None).sum())
        if inter == 0:
            continue
        total += (img_area / max(area, 1600)) * (inter / area)
    return total


def boxes_overlap(a, b) -> bool:
    """Positive-area intersection; shared edges do not count."""
    return min(a[2], b[2]) > max(a[0], b[0]) and min(a[3], b[3]) > max(a[1], b[1])


def select_salient_boxes(candidates: Sequence, masks: MaskSet, k: int) -> list:
    """Greedy top-k by saliency without overlaps; ties by candidate order; zero-score boxes dropped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = [box_saliency(b, masks) for b in candidates]
    order = sorted(range(len(candidates)), key=lambda i: (-scores[i], i))
    picked: list = []
    for i in order:
        if len(picked) == k or scores[i] <= 0:
            break
        if all(not boxes_overlap(candidates[i], p) for p in picked):
            picked.append(candidates[i])
    return picked


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    resolution: int = 256
    # upper bound on glyphs per natural region
    glyph_count: int = 40
    glyph_side: int = 5
    palette: tuple[str, ...] = tuple(COLORS)
    layout: str = "natural"
    low_res_side: int = 64
    # opacity of the region colour laid under each region's glyphs
    tint: float = 0.35

    def __post_init__(self):
        if self.layout not in ("natural", "document"):
            raise ValueError(f"layout must be 'natural' or 'document', got {self.layout!r}")
        if not 0.0 <= self.tint < 1.0:
            raise ValueError(f"tint must be in [0, 1), got {self.tint}")
        if self.glyph_side != 5:
            raise ValueError("glyph bitmaps are 5x5; glyph_side must be 5")
        if not self.glyph_side < 2 * self.resolution / self.low_res_side:
            raise ValueError("glyph_side must be below 2 * resolution / low_res_side so glyphs are "
                             "unresolvable in the low-res view")
        unknown = [c for c in self.palette if c not in COLORS]
        if unknown or len(self.palette) < 4:
            raise ValueError(f"palette needs >= 4 known colors, bad entries: {unknown}")
        if self.resolution < 96:
            raise ValueError("resolution must be at least 96")


def _stamp(img: np.ndarray, shape: str, x: int, y: int, color) -> None:
    bm = SHAPES[shape]
    img[y:y + 5, x:x + 5][bm] = color


def _tint(img: np.ndarray, box, rgb, alpha: float) -> None:
    x0, y0, x1, y1 = box
    if alpha > 0:
        area = img[y0:y1, x0:x1].astype(np.float64)
        img[y0:y1, x0:x1] = np.rint((1 - alpha) * area + alpha * rgb).astype(np.uint8)


def synth_scene(spec: SceneSpec) -> tuple[np.ndarray, DatasetRecord]:
    """Render one image (uint8) and its record with exact boxes and captions."""
    rng = np.random.default_rng([spec.seed, 0 if spec.layout == "natural" else 1])
    if spec.layout == "natural":
        return _natural(spec, rng)
    return _document(spec, rng)


def _natural(spec: SceneSpec, rng) -> tuple[np.ndarray, DatasetRecord]:
    n = spec.resolution
    base = rng.uniform(0.12, 0.32, size=3)
    ramp = np.linspace(-0.05, 0.05, n)
    bg = base[None, None, :] + ramp[:, None, None] * rng.choice([-1, 1]) \
        + rng.normal(0, 0.02, size=(n, n, 3))
    img = (np.clip(bg, 0, 1) * 255).astype(np.uint8)
    n_regions = int(rng.integers(3, 5))
    colors = rng.choice(list(spec.palette), size=n_regions, replace=False)
    boxes: list[tuple[int, int, int, int]] = []
    for _ in range(200):
        if len(boxes) == n_regions:
            break
        w, h = (int(v) for v in rng.integers(32, 65, size=2))
        x0 = int(rng.integers(4, n - w - 4))
        y0 = int(rng.integers(4, n - h - 4))
        box = (x0, y0, x0 + w, y0 + h)
        grown = (x0 - 4, y0 - 4, x0 + w + 4, y0 + h + 4)
        if all(not boxes_overlap(grown, b) for b in boxes):
            boxes.append(box)
    regions, glyphs = [], []
    for box, color in zip(boxes, colors):
        shape = str(rng.choice(list(SHAPES)))
        rgb = np.array(COLORS[color], dtype=np.uint8)
        x0, y0, x1, y1 = box
        _tint(img, box, rgb, spec.tint)
        spots = [(x, y) for y in range(y0 + 1, y1 - 6, 8) for x in range(x0 + 1, x1 - 6, 8)]
        rng.shuffle(spots)
        for x, y in spots[: spec.glyph_count]:
            jx, jy = (int(v) for v in rng.integers(0, 2, size=2))
            _stamp(img, shape, x + jx, y + jy, rgb)
            glyphs.append((x + jx, y + jy, shape, str(color)))
        pos = position_word((x0 + x1) / 2, (y0 + y1) / 2, n, n)
        regions.append(Region(box, [token_id(str(color)), token_id(shape), token_id(pos)], "local"))
    order = sorted(range(len(regions)), key=lambda i: (regions[i].box[1] // 32, regions[i].box[0]))
    glob = [token_id("<scene>")]
    for i in order:
        glob += regions[i].caption[:2]
    regions.append(Region((0, 0, n, n), glob, "global"))
    rec = DatasetRecord("", n, n, regions, "natural", glyphs)
    return img, rec


def _document(spec: SceneSpec, rng) -> tuple[np.ndarray, DatasetRecord]:
    n = spec.resolution
    paper = rng.uniform(0.9, 1.0)
    img = (np.clip(paper + rng.normal(0, 0.015, size=(n, n, 3)), 0, 1) * 255).astype(np.uint8)
    ink = np.array([30, 30, 35], dtype=np.uint8)
    shapes = list(SHAPES)
    words = []  # (x0, y0, glyph shapes)
    margin, pitch = 8, 10
    for y in range(margin, n - margin - 5, pitch):
        if rng.uniform() < 0.15:
            continue
        x = margin + int(rng.integers(0, 12))
        while True:
            length = int(rng.integers(2, 6))
            width = 6 * length - 1
            if x + width > n - margin:
                break
            words.append((x, y, [str(s) for s in rng.choice(shapes, size=length)]))
            x += width + int(rng.integers(5, 9))
    glyphs = []
    for x, y, ws in words:
        for j, s in enumerate(ws):
            _stamp(img, s, x + 6 * j, y, ink)
    n_regions = int(rng.integers(3, 5))
    colors = rng.choice(list(spec.palette), size=n_regions, replace=False)
    chosen: list[int] = []
    for i in rng.permutation(len(words)):
        if len(chosen) == n_regions:
            break
        x, y, ws = words[i]
        if all(abs(y - words[j][1]) >= 3 * pitch or abs(x - words[j][0]) > 80 for j in chosen):
            chosen.append(int(i))
    regions = []
    for i, color in zip(chosen, colors):
        x, y, ws = words[i]
        rgb = np.array(COLORS[color], dtype=np.uint8)
        box = (x - 2, y - 2, x + 6 * len(ws) + 1, y + 7)
        _tint(img, box, rgb, spec.tint)
        for j, s in enumerate(ws):
            _stamp(img, s, x + 6 * j, y, rgb)
        pos = position_word((box[0] + box[2]) / 2, (box[1] + box[3]) / 2, n, n)
        cap = [token_id(str(color))] + [token_id(s) for s in ws] + [token_id(pos)]
        regions.append(Region(box, cap, "local"))
    chosen_set = set(chosen)
    for i, (x, y, ws) in enumerate(words):
        color = str(colors[chosen.index(i)]) if i in chosen_set else "ink"
        glyphs.extend((x + 6 * j, y, s, color) for j, s in enumerate(ws))
    order = sorted(range(len(regions)), key=lambda i: (regions[i].box[1], regions[i].box[0]))
    glob = [token_id("<doc>")] + [regions[i].caption[0] for i in order]
    regions.append(Region((0, 0, n, n), glob, "global"))
    return img, DatasetRecord("", n, n, regions, "document", glyphs)


def paste_on_background(image: np.ndarray, record: DatasetRecord, bg_side: int, rng=None,
                        offset: tuple[int, int] | None = None, color=None) -> tuple[np.ndarray, DatasetRecord]:
    """Place ``image`` on a solid ``bg_side`` square canvas and translate every local box."""
    h, w = image.shape[:2]
    if h > bg_side or w > bg_side:
        raise ValueError(f"{w}x{h} sample does not fit a {bg_side}px canvas")
    rng = rng if rng is not None else np.random.default_rng(0)
    if offset is None:
        offset = (int(rng.integers(0, bg_side - w + 1)), int(rng.integers(0, bg_side - h + 1)))
    if color is None:
        color = rng.integers(0, 256, size=3)
    ox, oy = offset
    canvas = np.empty((bg_side, bg_side, 3), dtype=np.uint8)
    canvas[:] = np.asarray(color, dtype=np.uint8)
    canvas[oy:oy + h, ox:ox + w] = image
    regions = []
    for r in record.regions:
        if r.kind == "global":
            regions.append(Region((0, 0, bg_side, bg_side), list(r.caption), "global"))
        else:
            x0, y0, x1, y1 = r.box
            regions.append(Region((x0 + ox, y0 + oy, x1 + ox, y1 + oy), list(r.caption), r.kind))
    glyphs = [(x + ox, y + oy, s, c) for x, y, s, c in record.glyphs]
    return canvas, DatasetRecord(record.image, bg_side, bg_side, regions, record.source, glyphs)


# ---------------------------------------------------------------------------
# dataset files


def write_index(path, records: Sequence[DatasetRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def write_dataset(out_dir, items: Iterable[tuple[np.ndarray, DatasetRecord]], index_name: str = "index.jsonl") -> Path:
    """Write each image as ``images/NNNNNN.ppm`` plus the JSON-lines index; returns the index path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, rec) in enumerate(items):
        rel = f"images/{i:06d}.ppm"
        write_ppm(out / rel, img)
        records.append(DatasetRecord(rel, rec.width, rec.height, rec.regions, rec.source))
    index = out / index_name
    write_index(index, records)
    return index


def read_dataset(path) -> list[DatasetRecord]:
    """Parse and validate an index file (or a directory containing ``index.jsonl``)."""
    p = Path(path)
    if p.is_dir():
        p = p / "index.jsonl"
    records = []
    with open(p) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise DatasetFormatError(f"{p}:{lineno}: truncated line (no newline)")
            try:
                records.append(DatasetRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{p}:{lineno}: {exc}") from exc
    return records


def load_image(index_path, record: DatasetRecord) -> np.ndarray:
    """The record's raster as float32 in [0, 1]."""
    base = Path(index_path)
    base = base if base.is_dir() else base.parent
    return read_ppm(base / record.image).astype(np.float32) / 255.0


def record_seed(seed: int, i: int) -> int:
    return int(np.random.SeedSequence([seed, i]).generate_state(1)[0])


def synth_items(count: int, base: SceneSpec, paste_side: int | None = None, paste_fraction: float = 0.0):
    """Yield ``count`` (image, record) pairs alternating natural and document layouts.

    A ``paste_fraction`` share of them is placed on a solid ``paste_side`` canvas.
    """
    for i in range(count):
        layout = "natural" if i % 2 == 0 else "document"
        spec = replace(base, seed=record_seed(base.seed, i), layout=layout)
        img, rec = synth_scene(spec)
        if paste_side and paste_fraction > 0:
            rng = np.random.default_rng([base.seed, i, 1])
            if rng.uniform() < paste_fraction:
                img, rec = paste_on_background(img, rec, paste_side, rng)
        yield img, rec


def synth_dataset(out_dir, count: int, base: SceneSpec | None = None, **kw) -> Path:
    return write_dataset(out_dir, synth_items(count, base or SceneSpec(), **kw))
