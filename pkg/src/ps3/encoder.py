"""Three-stage scale-selective encoder.

Stage 1 runs a small ViT over the low-res view and keeps every layer's keys
and values. Stage 2 scores grid cells by cosine similarity between a prompt
embedding and both the low-res tokens and a light convolutional high-res
feature map. Stage 3 embeds the top-scoring patches of every scale with the
same ViT, attending over ``[cached low-res K/V ; high-res K/V]``.

Everything batched takes a leading batch axis; the single-image methods are
thin wrappers used by tests, the CLI and the harness.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

__all__ = [
    "ConfigError",
    "EncoderConfig",
    "ImagePyramid",
    "ScoreMap",
    "SelectionSet",
    "KVCache",
    "PromptEmbedding",
    "PS3Encoder",
    "build_pyramid",
    "resize_area",
    "cell_centers_in_box",
    "allocate_k",
    "largest_remainder",
    "select_patches",
    "selection_score",
]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    low_res_side: int = 64
    patch_side: int = 8
    scale_multipliers: tuple[int, ...] = (2, 4)
    embed_dim: int = 64
    num_heads: int = 2
    num_layers: int = 3
    mlp_ratio: int = 4
    aux_blocks: int = 3
    aux_channels: tuple[int, ...] = (16, 32, 64)
    # index into scale_multipliers of the image fed to the aux encoder
    aux_scale: int = 0
    vocab_size: int = 256
    text_layers: int = 1
    max_caption_len: int = 16
    per_round_cap: int = 320
    # gaussian smoothing of score maps, sigma in grid cells; 0 disables
    smooth_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_multipliers", tuple(int(m) for m in self.scale_multipliers))
        object.__setattr__(self, "aux_channels", tuple(int(c) for c in self.aux_channels))
        if self.low_res_side % self.patch_side:
            raise ConfigError("low_res_side must be divisible by patch_side")
        if list(self.scale_multipliers) != sorted(set(self.scale_multipliers)) or not self.scale_multipliers:
            raise ConfigError("scale_multipliers must be strictly increasing and non-empty")
        for side in self.scale_sides:
            if side % self.patch_side:
                raise ConfigError(f"scale side {side} not divisible by patch_side")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if len(self.aux_channels) != self.aux_blocks:
            raise ConfigError("aux_channels needs one entry per aux block")
        if not 0 <= self.aux_scale < len(self.scale_multipliers):
            raise ConfigError("aux_scale out of range")
        if self.per_round_cap < 1:
            raise ConfigError("per_round_cap must be positive")

    @property
    def scale_sides(self) -> tuple[int, ...]:
        return tuple(self.low_res_side * m for m in self.scale_multipliers)

    @property
    def low_grid(self) -> int:
        return self.low_res_side // self.patch_side

    @property
    def low_tokens(self) -> int:
        return self.low_grid ** 2

    @property
    def grids(self) -> tuple[int, ...]:
        return tuple(s // self.patch_side for s in self.scale_sides)

    @property
    def cells(self) -> tuple[int, ...]:
        return tuple(g * g for g in self.grids)

    @property
    def aux_side(self) -> int:
        return self.scale_sides[self.aux_scale]

    @property
    def aux_grid(self) -> int:
        return self.aux_side // 2 ** self.aux_blocks

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * 3

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config fields: {sorted(unknown)}")
        return cls(**d)

    def with_scales(self, multipliers: Sequence[int]) -> "EncoderConfig":
        aux = min(self.aux_scale, len(multipliers) - 1)
        return dataclasses.replace(self, scale_multipliers=tuple(multipliers), aux_scale=aux)

    @classmethod
    def full_profile(cls, max_res: int = 3780) -> "EncoderConfig":
        """Token-accounting profile: 378-px low-res view with 14-px patches."""
        ladder = [m for m in (2, 4, 10) if 378 * m <= max_res]
        return cls(low_res_side=378, patch_side=14, scale_multipliers=tuple(ladder),
                   embed_dim=1152, num_heads=16, num_layers=27, mlp_ratio=4,
                   aux_blocks=3, aux_channels=(96, 192, 384), aux_scale=min(1, len(ladder) - 1),
                   per_round_cap=2560)


# ---------------------------------------------------------------------------
# images


def resize_area(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Area-average resize of ``img[H, W, C]``; exact block means for integer factors."""
    h, w = img.shape[:2]
    rows = _area_matrix(h, out_h)
    cols = _area_matrix(w, out_w)
    out = np.einsum("Hh,hwc,Ww->HWc", rows, img.astype(np.float64), cols, optimize=True)
    return out.astype(np.float32)


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / scale


@dataclass
class ImagePyramid:
    base: np.ndarray
    low_res: np.ndarray
    scales: list[np.ndarray]
    patch_side: int
    _patch_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def width(self) -> int:
        return self.base.shape[1]

    @property
    def height(self) -> int:
        return self.base.shape[0]

    @property
    def grids(self) -> list[int]:
        return [s.shape[0] // self.patch_side for s in self.scales]

    @property
    def scale_sides(self) -> list[int]:
        return [s.shape[0] for s in self.scales]

    def low_res_patches(self) -> np.ndarray:
        return _patchify(self.low_res, self.patch_side)

    def patches(self, scale: int, indices: Sequence[int] | None = None) -> np.ndarray:
        """Flattened ``(py, px, c)`` patch vectors of one scale, optionally a subset."""
        if scale not in self._patch_cache:
            self._patch_cache[scale] = _patchify(self.scales[scale], self.patch_side)
        all_p = self._patch_cache[scale]
        return all_p if indices is None else all_p[np.asarray(indices, dtype=np.int64)]


def _patchify(img: np.ndarray, p: int) -> np.ndarray:
    h, w, c = img.shape
    g_h, g_w = h // p, w // p
    x = img[: g_h * p, : g_w * p].reshape(g_h, p, g_w, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x.reshape(g_h * g_w, p * p * c))


def build_pyramid(image: np.ndarray, cfg: EncoderConfig) -> ImagePyramid:
    """Resize ``image[H, W, 3]`` (values in [0, 1]) to the low-res side and every scale side."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an H×W×3 image, got {img.shape}")
    low = resize_area(img, cfg.low_res_side, cfg.low_res_side)
    scales = []
    for side in cfg.scale_sides:
        if img.shape[0] == side and img.shape[1] == side:
            scales.append(img)
        else:
            scales.append(resize_area(img, side, side))
    return ImagePyramid(base=img, low_res=low, scales=scales, patch_side=cfg.patch_side)


def cell_centers_in_box(box, width: int, height: int, grid: int) -> np.ndarray:
    """Boolean ``[grid, grid]``: cell centers (mapped to base pixels) inside ``[x0,x1)×[y0,y1)``."""
    x0, y0, x1, y1 = box
    centers = (np.arange(grid) + 0.5) / grid
    cx = centers * width
    cy = centers * height
    in_x = (cx >= x0) & (cx < x1)
    in_y = (cy >= y0) & (cy < y1)
    return in_y[:, None] & in_x[None, :]


# ---------------------------------------------------------------------------
# selection bookkeeping


@dataclass
class ScoreMap:
    """Per-scale square score grids, either predicted (cosine range) or ground truth."""

    maps: list
    provenance: str = "predicted"
    degenerate: list[bool] = field(default_factory=list)

    def array(self, scale: int) -> np.ndarray:
        m = self.maps[scale]
        return m.data if isinstance(m, Tensor) else np.asarray(m)

    @property
    def grids(self) -> list[int]:
        return [self.array(i).shape[-1] for i in range(len(self.maps))]


@dataclass
class SelectionSet:
    indices: list[list[int]]

    def __post_init__(self):
        self.indices = [sorted(int(i) for i in idx) for idx in self.indices]

    @property
    def k(self) -> list[int]:
        return [len(i) for i in self.indices]

    @property
    def total(self) -> int:
        return sum(self.k)

    def validate(self, grids: Sequence[int], cap: int | None = None) -> None:
        for idx, g in zip(self.indices, grids):
            if len(set(idx)) != len(idx) or any(not 0 <= i < g * g for i in idx):
                raise ValueError("selection indices must be unique and inside the grid")
        if cap is not None and self.total > cap:
            raise ValueError(f"selection of {self.total} exceeds per-round cap {cap}")

    def to_text(self, scale_sides: Sequence[int] | None = None) -> str:
        lines = []
        for s, idx in enumerate(self.indices):
            label = f"scale {scale_sides[s]}" if scale_sides else f"scale {s}"
            lines.append(f"{label}: k={len(idx)} indices={' '.join(map(str, idx))}".rstrip())
        return "\n".join(lines)


@dataclass
class KVCache:
    keys: list[Tensor]
    values: list[Tensor]

    @property
    def num_layers(self) -> int:
        return len(self.keys)

    @property
    def num_tokens(self) -> int:
        return self.keys[0].shape[-2] if self.keys else 0

    def zeros_like(self) -> "KVCache":
        return KVCache([Tensor(np.zeros_like(k.data)) for k in self.keys],
                       [Tensor(np.zeros_like(v.data)) for v in self.values])


@dataclass
class PromptEmbedding:
    vector: Tensor
    mode: str = "top-down"

    def __post_init__(self):
        if self.mode not in ("top-down", "bottom-up"):
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if not np.all(np.isfinite(self.vector.data)):
            raise ValueError("prompt embedding must be finite")


def largest_remainder(total: int, weights: Sequence[int]) -> list[int]:
    """Split integer ``total`` proportionally to integer ``weights``; sums exactly to ``total``."""
    weights = [int(w) for w in weights]
    wsum = sum(weights)
    if total < 0:
        raise ValueError("total must be non-negative")
    if wsum == 0:
        return [0] * len(weights)
    base = [total * w // wsum for w in weights]
    rem = [total * w % wsum for w in weights]
    short = total - sum(base)
    for i in sorted(range(len(weights)), key=lambda i: (-rem[i], i))[:short]:
        base[i] += 1
    return base


def allocate_k(total_k: int, cells: Sequence[int]) -> list[int]:
    """Per-scale k proportional to each scale's cell count."""
    if total_k < 0:
        raise ValueError("total_k must be non-negative")
    if total_k > sum(cells):
        raise ValueError(f"total_k={total_k} exceeds {sum(cells)} cells")
    return largest_remainder(total_k, cells)


def select_patches(score: ScoreMap, k_per_scale: Sequence[int], cap: int | None) -> SelectionSet:
    """Per-scale top-k, ties to the lowest index."""
    if cap is not None and sum(k_per_scale) > cap:
        raise ValueError(f"sum of k ({sum(k_per_scale)}) exceeds per-round cap {cap}; use multi-round")
    return SelectionSet([T.top_k(score.array(s).reshape(-1), int(k)) for s, k in enumerate(k_per_scale)])


def _gaussian_matrix(n: int, sigma: float) -> np.ndarray:
    d = np.arange(n)[:, None] - np.arange(n)[None, :]
    m = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return m / m.sum(axis=1, keepdims=True)


def selection_score(lowres_tokens: Tensor, aux_features: Tensor, prompt: Tensor,
                    target_grids: Sequence[int], smooth_sigma: float = 0.0) -> list[Tensor]:
    """Averaged cosine score maps, one ``[B, g, g]`` tensor per target grid.

    ``lowres_tokens`` is ``[B, n, d]`` on a square grid, ``aux_features`` is
    ``[B, h, w, d]`` and ``prompt`` is ``[d]`` (shared) or ``[B, d]``.
    """
    B, n, d = lowres_tokens.shape
    if aux_features.shape[-1] != d or prompt.shape[-1] != d:
        raise DimensionError("tokens, aux features and prompt must share embed_dim")
    side = int(round(math.sqrt(n)))
    p = T.normalize(prompt)
    p_col = T.reshape(p, (d, 1)) if p.ndim == 1 else T.reshape(p, (B, d, 1))
    low = T.matmul(T.normalize(lowres_tokens), p_col)
    low = T.reshape(low, (B, side, side, 1))
    ah, aw = aux_features.shape[1], aux_features.shape[2]
    aux = T.matmul(T.reshape(T.normalize(aux_features), (B, ah * aw, d)), p_col)
    aux = T.reshape(aux, (B, ah, aw, 1))
    out = []
    for g in target_grids:
        avg = (T.interpolate_bilinear(low, g, g) + T.interpolate_bilinear(aux, g, g)) * 0.5
        if smooth_sigma > 0:
            gm = _gaussian_matrix(g, smooth_sigma)
            avg = T.resample(avg, gm, gm)
        out.append(T.reshape(avg, (B, g, g)))
    return out


# ---------------------------------------------------------------------------
# model


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(x, w) + b


class PS3Encoder:
    """Parameters and forward passes of all three stages plus the text tower."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self._init_params()

    # -- parameters ---------------------------------------------------------

    def _init_params(self) -> dict[str, Tensor]:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        d, hdim = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
        p: dict[str, np.ndarray] = {}

        def lin(name, fan_in, fan_out):
            p[name + ".w"] = rng.normal(0, 1 / math.sqrt(fan_in), size=(fan_in, fan_out))
            p[name + ".b"] = np.zeros(fan_out)

        def ln(name, dim):
            p[name + ".g"] = np.ones(dim)
            p[name + ".b"] = np.zeros(dim)

        def block(prefix):
            ln(prefix + ".ln1", d)
            for proj in ("q", "k", "v", "o"):
                lin(f"{prefix}.attn.{proj}", d, d)
            # a key bias shifts every logit of a query equally; softmax ignores it
            del p[f"{prefix}.attn.k.b"]
            ln(prefix + ".ln2", d)
            lin(prefix + ".mlp1", d, hdim)
            lin(prefix + ".mlp2", hdim, d)

        lin("patch", cfg.patch_dim, d)
        p["pos"] = rng.normal(0, 0.02, size=(cfg.low_tokens, d))
        p["scale_pe"] = rng.normal(0, 0.02, size=(len(cfg.scale_multipliers), d))
        for layer in range(cfg.num_layers):
            block(f"vit.{layer}")
        ln("vit.ln_post", d)

        c_in = 3
        for i, c_out in enumerate(cfg.aux_channels):
            p[f"aux.{i}.dw"] = rng.normal(0, 1 / 3, size=(3, 3, c_in))
            lin(f"aux.{i}.pw", c_in, c_out)
            p[f"aux.{i}.down.w"] = rng.normal(0, 1 / math.sqrt(4 * c_out), size=(2, 2, c_out, c_out))
            p[f"aux.{i}.down.b"] = np.zeros(c_out)
            ln(f"aux.{i}.ln", c_out)
            c_in = c_out
        lin("aux.proj", c_in, d)

        p["text.tok"] = rng.normal(0, 0.02, size=(cfg.vocab_size, d))
        p["text.pos"] = rng.normal(0, 0.02, size=(cfg.max_caption_len, d))
        for layer in range(cfg.text_layers):
            block(f"text.{layer}")
        ln("text.ln", d)
        lin("text.proj", d, d)

        p["pool.query"] = rng.normal(0, 1.0, size=(d,))
        p["pool.k.w"] = rng.normal(0, 1 / math.sqrt(d), size=(d, d))
        lin("pool.v", d, d)
        p["bottom_up"] = rng.normal(0, 0.02, size=(d,))
        p["loss.t"] = np.asarray(math.log(10.0))
        p["loss.b"] = np.asarray(-10.0)
        return {k: Tensor(v.astype(np.float32), requires_grad=True, name=k) for k, v in p.items()}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def astype(self, dtype) -> "PS3Encoder":
        params = {k: Tensor.__new__(Tensor) for k in self.params}
        for k, t in self.params.items():
            n = params[k]
            n.data = t.data.astype(dtype)
            n.grad = None
            n.requires_grad = True
            n.tracked = True
            n.name = k
        return PS3Encoder(self.cfg, params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- transformer pieces ---------------------------------------------------

    def _split_heads(self, x: Tensor) -> Tensor:
        B, n, d = x.shape
        h = self.cfg.num_heads
        return T.transpose(T.reshape(x, (B, n, h, d // h)), (0, 2, 1, 3))

    def _block(self, x: Tensor, prefix: str, cache: tuple[Tensor, Tensor] | None = None,
               key_bias: np.ndarray | None = None) -> tuple[Tensor, Tensor, Tensor]:
        P = self.params
        B, n, d = x.shape
        h = T.layer_norm(x, P[prefix + ".ln1.g"], P[prefix + ".ln1.b"])
        q = _linear(h, P[prefix + ".attn.q.w"], P[prefix + ".attn.q.b"])
        k = T.matmul(h, P[prefix + ".attn.k.w"])
        v = _linear(h, P[prefix + ".attn.v.w"], P[prefix + ".attn.v.b"])
        k_all, v_all = k, v
        if cache is not None:
            k_all = T.concat([cache[0], k], axis=1)
            v_all = T.concat([cache[1], v], axis=1)
        qh, kh, vh = self._split_heads(q), self._split_heads(k_all), self._split_heads(v_all)
        scores = T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // self.cfg.num_heads))
        if key_bias is not None:
            scores = scores + key_bias
        att = T.matmul(T.softmax(scores, axis=-1), vh)
        att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (B, n, d))
        x = x + _linear(att, P[prefix + ".attn.o.w"], P[prefix + ".attn.o.b"])
        h = T.layer_norm(x, P[prefix + ".ln2.g"], P[prefix + ".ln2.b"])
        h = _linear(T.gelu(_linear(h, P[prefix + ".mlp1.w"], P[prefix + ".mlp1.b"])),
                    P[prefix + ".mlp2.w"], P[prefix + ".mlp2.b"])
        return x + h, k, v

    # -- stage 1 ----------------------------------------------------------------

    def encode_low_res_batch(self, patches: np.ndarray) -> tuple[Tensor, KVCache]:
        """``patches[B, n, patch_dim]`` -> tokens ``[B, n, d]`` and the per-layer K/V cache."""
        cfg, P = self.cfg, self.params
        if patches.shape[-2:] != (cfg.low_tokens, cfg.patch_dim):
            raise DimensionError(f"low-res patches {patches.shape} do not match config")
        x = _linear(Tensor(patches), P["patch.w"], P["patch.b"]) + P["pos"]
        keys, values = [], []
        for layer in range(cfg.num_layers):
            x, k, v = self._block(x, f"vit.{layer}")
            keys.append(k)
            values.append(v)
        x = T.layer_norm(x, P["vit.ln_post.g"], P["vit.ln_post.b"])
        return x, KVCache(keys, values)

    def encode_low_res(self, pyramid: ImagePyramid) -> tuple[Tensor, KVCache]:
        tokens, cache = self.encode_low_res_batch(pyramid.low_res_patches()[None])
        return tokens[0], KVCache([k[0] for k in cache.keys], [v[0] for v in cache.values])

    # -- stage 2 ----------------------------------------------------------------

    def aux_encode_batch(self, images: np.ndarray | Tensor) -> Tensor:
        """Light conv encoder: ``images[B, S, S, 3]`` -> ``[B, S/8, S/8, d]``."""
        P = self.params
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.shape[-3] != self.cfg.aux_side:
            raise DimensionError(f"aux input side {x.shape[-3]} != {self.cfg.aux_side}")
        for i in range(self.cfg.aux_blocks):
            x = T.depthwise_conv2d(x, P[f"aux.{i}.dw"], pad_mode="edge")
            x = T.gelu(_linear(x, P[f"aux.{i}.pw.w"], P[f"aux.{i}.pw.b"]))
            x = T.conv2d(x, P[f"aux.{i}.down.w"], stride=2) + P[f"aux.{i}.down.b"]
            x = T.layer_norm(x, P[f"aux.{i}.ln.g"], P[f"aux.{i}.ln.b"])
        return _linear(x, P["aux.proj.w"], P["aux.proj.b"])

    def aux_highres_encode(self, pyramid: ImagePyramid) -> Tensor:
        return self.aux_encode_batch(pyramid.scales[self.cfg.aux_scale][None])[0]

    def bottom_up_prompt(self) -> PromptEmbedding:
        return PromptEmbedding(self.params["bottom_up"], mode="bottom-up")

    def score_maps(self, lowres_tokens: Tensor, aux_features: Tensor, prompt: PromptEmbedding | Tensor,
                   grids: Sequence[int] | None = None) -> ScoreMap:
        """Single-image Stage-2 scores (``lowres_tokens[n, d]``, ``aux_features[h, w, d]``)."""
        vec = prompt.vector if isinstance(prompt, PromptEmbedding) else prompt
        maps = selection_score(T.reshape(lowres_tokens, (1,) + lowres_tokens.shape),
                               T.reshape(aux_features, (1,) + aux_features.shape), vec,
                               grids or self.cfg.grids, self.cfg.smooth_sigma)
        return ScoreMap([T.reshape(m, m.shape[1:]) for m in maps], "predicted")

    # -- stage 3 ----------------------------------------------------------------

    def positional_weights(self, scale_grids: Sequence[int], selection: SelectionSet) -> tuple[np.ndarray, np.ndarray]:
        """Interpolation weights ``[K, n_low]`` and scale ids ``[K]`` for the selected patches."""
        G = self.cfg.low_grid
        rows, ids = [], []
        for s, idx in enumerate(selection.indices):
            if not idx:
                continue
            g = scale_grids[s]
            m = interpolation_weights(G, g)
            r, c = np.divmod(np.asarray(idx), g)
            w = m[r][:, :, None] * m[c][:, None, :]
            rows.append(w.reshape(len(idx), G * G))
            ids.extend([s] * len(idx))
        if not rows:
            return np.zeros((0, G * G)), np.zeros(0, dtype=np.int64)
        return np.concatenate(rows), np.asarray(ids, dtype=np.int64)

    def scale_positional_embedding(self, selection: SelectionSet, grids: Sequence[int] | None = None,
                                   scale_pe: bool = True) -> Tensor:
        w, ids = self.positional_weights(grids or self.cfg.grids, selection)
        pos = T.matmul(Tensor(w), self.params["pos"])
        if scale_pe:
            pos = pos + T.embedding_lookup(self.params["scale_pe"], ids)
        return pos

    def encode_high_res_batch(self, patches: np.ndarray, pos: Tensor, cache: KVCache | None) -> Tensor:
        """``patches[B, K, patch_dim]`` with positional embeddings ``pos[B, K, d]``.

        With ``cache`` set, every layer attends over the cached low-res keys and
        values followed by the high-res ones.
        """
        cfg, P = self.cfg, self.params
        if cache is not None and cache.num_layers != cfg.num_layers:
            raise ConfigError(f"cache has {cache.num_layers} layers, model {cfg.num_layers}")
        x = _linear(Tensor(patches), P["patch.w"], P["patch.b"]) + pos
        for layer in range(cfg.num_layers):
            kv = (cache.keys[layer], cache.values[layer]) if cache is not None else None
            x, _, _ = self._block(x, f"vit.{layer}", cache=kv)
        return T.layer_norm(x, P["vit.ln_post.g"], P["vit.ln_post.b"])

    def gather_patches(self, pyramid: ImagePyramid, selection: SelectionSet) -> np.ndarray:
        parts = [pyramid.patches(s, idx) for s, idx in enumerate(selection.indices) if idx]
        if not parts:
            return np.zeros((0, self.cfg.patch_dim), dtype=np.float32)
        return np.concatenate(parts)

    def encode_high_res(self, pyramid: ImagePyramid, selection: SelectionSet, cache: KVCache,
                        kv_cache: bool = True, scale_pe: bool = True) -> Tensor:
        """Features ``[sum k, d]`` of the selected patches, ordered by (scale, index)."""
        selection.validate(pyramid.grids)
        if selection.total == 0:
            return Tensor(np.zeros((0, self.cfg.embed_dim)))
        if cache.num_layers != self.cfg.num_layers:
            raise ConfigError(f"cache has {cache.num_layers} layers, model {self.cfg.num_layers}")
        patches = self.gather_patches(pyramid, selection)[None]
        pos = self.scale_positional_embedding(selection, pyramid.grids, scale_pe)
        pos = T.reshape(pos, (1,) + pos.shape)
        batched = None
        if kv_cache:
            batched = KVCache([T.reshape(k, (1,) + k.shape) for k in cache.keys],
                              [T.reshape(v, (1,) + v.shape) for v in cache.values])
        out = self.encode_high_res_batch(patches, pos, batched)
        return T.reshape(out, out.shape[1:])

    def encode_multi_round(self, pyramid: ImagePyramid, prompt: PromptEmbedding | Tensor, total_k: int,
                           kv_cache: bool = True, scale_pe: bool = True) -> tuple[Tensor, list[SelectionSet]]:
        """Select ``total_k`` patches in rounds of at most ``per_round_cap``.

        Each round picks the best not-yet-selected cells of every scale and runs
        an independent Stage-3 pass that shares only the low-res cache.
        """
        tokens, cache = self.encode_low_res(pyramid)
        aux = self.aux_highres_encode(pyramid)
        score = self.score_maps(tokens, aux, prompt, pyramid.grids)
        cells = [g * g for g in pyramid.grids]
        quota = allocate_k(total_k, cells)
        maps = [score.array(s).reshape(-1).astype(np.float64).copy() for s in range(len(cells))]
        rounds: list[SelectionSet] = []
        outputs = []
        remaining = list(quota)
        while sum(remaining) > 0:
            budget = min(self.cfg.per_round_cap, sum(remaining))
            ks = largest_remainder(budget, remaining)
            sel = SelectionSet([T.top_k(m, k) for m, k in zip(maps, ks)])
            for m, idx in zip(maps, sel.indices):
                m[idx] = -np.inf
            remaining = [r - k for r, k in zip(remaining, ks)]
            rounds.append(sel)
            outputs.append(self.encode_high_res(pyramid, sel, cache, kv_cache=kv_cache, scale_pe=scale_pe))
        if not outputs:
            return Tensor(np.zeros((0, self.cfg.embed_dim))), rounds
        return T.concat(outputs, axis=0), rounds

    # -- pooling and text -------------------------------------------------------

    def attention_pool_batch(self, tokens: Tensor, keep: np.ndarray) -> Tensor:
        """Single learned query over ``tokens[B, n, d]``; ``keep[B, n]`` masks with -inf logits."""
        P = self.params
        keep = np.asarray(keep, dtype=bool)
        if not keep.any(axis=-1).all():
            raise ValueError("attention pooling needs at least one kept token per row")
        B, n, d = tokens.shape
        keys = T.matmul(tokens, P["pool.k.w"])
        vals = _linear(tokens, P["pool.v.w"], P["pool.v.b"])
        logits = T.matmul(keys, T.reshape(P["pool.query"], (d, 1))) * (1.0 / math.sqrt(d))
        bias = np.where(keep, 0.0, -np.inf)[..., None]
        w = T.softmax(T.reshape(logits + bias, (B, 1, n)), axis=-1)
        return T.reshape(T.matmul(w, vals), (B, d))

    def attention_pool(self, tokens: Tensor, keep_mask: Sequence[bool]) -> Tensor:
        keep = np.asarray(keep_mask, dtype=bool)
        if not keep.any():
            raise ValueError("attention pooling needs at least one kept token")
        out = self.attention_pool_batch(T.reshape(tokens, (1,) + tokens.shape), keep[None])
        return T.reshape(out, (tokens.shape[-1],))

    def text_encode_batch(self, captions: Sequence[Sequence[int]]) -> Tensor:
        """Unit-norm caption embeddings ``[B, d]``; captions are padded and masked."""
        cfg, P = self.cfg, self.params
        if any(len(c) == 0 for c in captions):
            raise ValueError("captions must be non-empty")
        L = max(len(c) for c in captions)
        if L > cfg.max_caption_len:
            raise ValueError(f"caption longer than max_caption_len={cfg.max_caption_len}")
        ids = np.zeros((len(captions), L), dtype=np.int64)
        valid = np.zeros((len(captions), L), dtype=bool)
        for i, c in enumerate(captions):
            c = np.asarray(c, dtype=np.int64)
            if c.min() < 0 or c.max() >= cfg.vocab_size:
                raise ValueError(f"caption token ids must be in [0, {cfg.vocab_size})")
            ids[i, : len(c)] = c
            valid[i, : len(c)] = True
        x = T.embedding_lookup(P["text.tok"], ids) + T.take(P["text.pos"], np.arange(L), axis=0)
        key_bias = np.where(valid, 0.0, -np.inf)[:, None, None, :]
        for layer in range(cfg.text_layers):
            x, _, _ = self._block(x, f"text.{layer}", key_bias=key_bias)
        x = T.layer_norm(x, P["text.ln.g"], P["text.ln.b"])
        pool = (valid / valid.sum(axis=1, keepdims=True))[:, None, :]
        x = T.reshape(T.matmul(Tensor(pool), x), (len(captions), cfg.embed_dim))
        return T.normalize(_linear(x, P["text.proj.w"], P["text.proj.b"]))

    def text_encode(self, caption: Sequence[int]) -> Tensor:
        out = self.text_encode_batch([caption])
        return T.reshape(out, (self.cfg.embed_dim,))


def interpolation_weights(n_in: int, n_out: int) -> np.ndarray:
    return T.interpolation_matrix(n_in, n_out, np.float64)
