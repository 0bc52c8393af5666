"""Dense tensors with a reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` whenever one
of their inputs is tracked (a parameter with ``requires_grad`` or the output of
another recorded op). Outside a tape nothing is recorded, which is how
inference runs.

Broadcasting is limited on purpose: two tensor operands must have the same
shape, or the second one's shape must be a trailing suffix of the first's
(bias addition, scalar scaling). Plain numpy constants may broadcast freely
since they never need a gradient.
"""

from __future__ import annotations

import contextlib
import math
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "GradCheckError",
    "Tensor",
    "Tape",
    "precision",
    "default_dtype",
    "matmul",
    "add",
    "mul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "tsum",
    "mean",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "log_sigmoid",
    "clip",
    "normalize",
    "conv2d",
    "depthwise_conv2d",
    "embedding_lookup",
    "interpolate_bilinear",
    "interpolation_matrix",
    "resample",
    "top_k",
    "grad_check",
]


class DimensionError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


_DTYPE = [np.dtype(np.float32)]
_TAPES: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(bits: int):
    """Switch the default float type (32 or 64) for tensors created inside."""
    if bits not in (32, 64):
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _DTYPE.append(np.dtype(np.float32 if bits == 32 else np.float64))
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tracked", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f" or arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)


class Tape:
    """Ordered record of primitive ops; ``backward`` replays it in reverse.

    Records are appended in creation order, which is a valid topological order
    because an op can only consume tensors that already exist.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every recorded leaf."""
        if loss.data.size != 1:
            raise DimensionError("backward needs a scalar loss")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, ig in zip(inputs, fn(g)):
                if ig is None or t is None or not t.tracked:
                    continue
                key = id(t)
                grads[key] = grads[key] + ig if key in grads else ig
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            if g is not None:
                leaf.grad = g if leaf.grad is None else leaf.grad + g


def _record(out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = False
    out.name = None
    tracked = bool(_TAPES) and any(isinstance(t, Tensor) and t.tracked for t in inputs)
    out.tracked = tracked
    if tracked:
        tape = _TAPES[-1]
        for t in inputs:
            if t is not None and t.requires_grad:
                tape._leaves[id(t)] = t
        tape.records.append((out, inputs, backward))
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else default_dtype()
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=dtype)
    t.grad = None
    t.requires_grad = False
    t.tracked = False
    t.name = None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    return g.reshape(shape)


def _check_operands(a: Tensor, b: Tensor) -> None:
    if not isinstance(b, Tensor) or not b.tracked:
        return
    if a.shape == b.shape:
        return
    if len(b.shape) <= len(a.shape) and a.shape[len(a.shape) - len(b.shape):] == b.shape:
        return
    raise DimensionError(f"operand shapes {a.shape} and {b.shape} only broadcast along trailing dims")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor) or (isinstance(b, Tensor) and b.ndim > a.ndim):
        a, b = b, a
    _check_operands(a, b)
    bt = b if isinstance(b, Tensor) else None
    bd = b.data if bt is not None else np.asarray(b, dtype=a.data.dtype)
    out = a.data + bd
    if out.shape != a.shape:
        raise DimensionError(f"cannot add shapes {a.shape} and {bd.shape}")
    b_shape = bd.shape

    def backward(g):
        return g, (_unbroadcast(g, b_shape) if bt is not None else None)

    return _record(out, (a, bt), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) or (isinstance(b, Tensor) and b.ndim > a.ndim):
        a, b = b, a
    _check_operands(a, b)
    bt = b if isinstance(b, Tensor) else None
    bd = b.data if bt is not None else np.asarray(b, dtype=a.data.dtype)
    ad = a.data
    out = ad * bd
    if out.shape != a.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {bd.shape}")

    def backward(g):
        ga = g * bd
        gb = _unbroadcast(g * ad, bd.shape) if bt is not None else None
        return ga, gb

    return _record(out, (a, bt), backward)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _record(out, (a,), lambda g: (-g * out * out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """``-softplus(-x)``, finite for any finite input."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        s = np.where(x >= 0, np.exp(-x) / (1.0 + np.exp(-x)), 1.0 / (1.0 + np.exp(np.minimum(x, 0.0))))
        return (g * s,)

    return _record(out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner),)

    return _record(out, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi)
    inside = (x >= lo) & (x <= hi)
    return _record(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# shape


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def slice_(a: Tensor, key) -> Tensor:
    orig = a.shape
    dtype = a.data.dtype

    def backward(g):
        full = np.zeros(orig, dtype=dtype)
        np.add.at(full, key, g) if _has_array_index(key) else full.__setitem__(key, g)
        return (full,)

    return _record(np.array(a.data[key]), (a,), backward)


def _has_array_index(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(tensors), backward)


def take(a: Tensor, idx, axis: int = 0) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    orig = a.shape

    def backward(g):
        full = np.zeros(orig, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(np.take(a.data, idx, axis=axis), (a,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` at integer ``ids`` (any shape); output ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"ids out of range for table with {table.shape[0]} rows")
    orig = table.shape

    def backward(g):
        full = np.zeros(orig, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, orig[1]))
        return (full,)

    return _record(table.data[ids], (table,), backward)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    orig = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, orig).copy(),)

    return _record(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record(out, (a, b), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} invalid for shape {x.shape}")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    x = a.data
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm params must have shape ({d},)")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return gx, ggain, gbias

    return _record(out, (a, gain, bias), backward)


def normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalize along the last axis; zero vectors map to zero."""
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + eps)
    out = x / norm

    def backward(g):
        return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norm,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# convolution


def _pad_hw(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 3) + [(ph, ph), (pw, pw), (0, 0)]
    return np.pad(x, widths, mode="edge" if mode == "edge" else "constant")


def _unpad_grad(gp: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    """Fold the gradient of a padded array back onto the unpadded one."""
    if ph == 0 and pw == 0:
        return gp
    if mode == "edge":
        gp = gp.copy()
        gp[..., ph, :, :] += gp[..., :ph, :, :].sum(axis=-3)
        gp[..., -ph - 1, :, :] += gp[..., gp.shape[-3] - ph:, :, :].sum(axis=-3)
        gp[..., :, pw, :] += gp[..., :, :pw, :].sum(axis=-2)
        gp[..., :, -pw - 1, :] += gp[..., :, gp.shape[-2] - pw:, :].sum(axis=-2)
    return gp[..., ph:gp.shape[-3] - ph, pw:gp.shape[-2] - pw, :]


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """Channels-last convolution: ``x[..., H, W, Cin]`` with ``kernel[kh, kw, Cin, Cout]``."""
    xd, kd = x.data, kernel.data
    if kd.ndim != 4 or xd.ndim < 3 or xd.shape[-1] != kd.shape[2]:
        raise DimensionError(f"conv2d shapes incompatible: x {xd.shape}, kernel {kd.shape}")
    kh, kw, cin, cout = kd.shape
    xp = _pad_hw(xd, padding, padding, pad_mode)
    H, W = xp.shape[-3], xp.shape[-2]
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError("conv2d kernel larger than padded input")
    lead = xp.shape[:-3]
    out = np.zeros(lead + (oh, ow, cout), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[..., i:i + stride * oh:stride, j:j + stride * ow:stride, :]
            out += win @ kd[i, j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        g2 = g.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                win = xp[..., i:i + stride * oh:stride, j:j + stride * ow:stride, :]
                gk[i, j] = win.reshape(-1, cin).T @ g2
                gxp[..., i:i + stride * oh:stride, j:j + stride * ow:stride, :] += g @ kd[i, j].T
        return _unpad_grad(gxp, padding, padding, pad_mode), gk

    return _record(out, (x, kernel), backward)


def depthwise_conv2d(x: Tensor, kernel: Tensor, pad_mode: str = "edge") -> Tensor:
    """Per-channel ``kh×kw`` convolution, stride 1, 'same' output size."""
    xd, kd = x.data, kernel.data
    kh, kw, c = kd.shape
    if xd.shape[-1] != c:
        raise DimensionError(f"depthwise kernel has {c} channels, input {xd.shape[-1]}")
    ph, pw = kh // 2, kw // 2
    xp = _pad_hw(xd, ph, pw, pad_mode)
    H, W = xd.shape[-3], xd.shape[-2]
    out = np.zeros_like(xd)
    for i in range(kh):
        for j in range(kw):
            out += xp[..., i:i + H, j:j + W, :] * kd[i, j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        for i in range(kh):
            for j in range(kw):
                win = xp[..., i:i + H, j:j + W, :]
                gk[i, j] = (win * g).reshape(-1, c).sum(axis=0)
                gxp[..., i:i + H, j:j + W, :] += g * kd[i, j]
        return _unpad_grad(gxp, ph, pw, pad_mode), gk

    return _record(out, (x, kernel), backward)


# ---------------------------------------------------------------------------
# resampling


def interpolation_matrix(n_in: int, n_out: int, dtype=None) -> np.ndarray:
    """Bilinear weights ``[n_out, n_in]`` with half-pixel centers and edge clamping.

    Output cell ``i`` samples input coordinate ``(i + 0.5) * n_in / n_out - 0.5``
    clamped to ``[0, n_in - 1]``.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("interpolation sizes must be >= 1")
    m = np.zeros((n_out, n_in), dtype=dtype or default_dtype())
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        frac = src - lo
        hi = min(lo + 1, n_in - 1)
        m[i, lo] += 1.0 - frac
        if frac > 0:
            m[i, hi] += frac
    return m


def resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply ``rows[H, h]`` and ``cols[W, w]`` to the spatial axes of ``x[..., h, w, c]``."""
    xd = x.data
    rows = rows.astype(xd.dtype, copy=False)
    cols = cols.astype(xd.dtype, copy=False)
    if xd.shape[-3] != rows.shape[1] or xd.shape[-2] != cols.shape[1]:
        raise DimensionError(f"resample matrices do not match map shape {xd.shape}")
    out = np.einsum("Hh,...hwc,Ww->...HWc", rows, xd, cols, optimize=True)

    def backward(g):
        return (np.einsum("Hh,...HWc,Ww->...hwc", rows, g, cols, optimize=True),)

    return _record(out, (x,), backward)


def interpolate_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of ``x[..., h, w, c]`` to ``out_h × out_w``."""
    h, w = x.shape[-3], x.shape[-2]
    if min(h, w, out_h, out_w) < 1:
        raise ValueError("interpolation sizes must be >= 1")
    return resample(x, interpolation_matrix(h, out_h, x.dtype), interpolation_matrix(w, out_w, x.dtype))


# ---------------------------------------------------------------------------
# selection


def top_k(scores, k: int) -> list[int]:
    """Indices of the ``k`` largest scores, ties to the lowest index, sorted ascending.

    ``k`` larger than the list is capped with a ``RuntimeWarning``.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > s.size:
        warnings.warn(f"top_k: k={k} capped to {s.size}", RuntimeWarning, stacklevel=2)
        k = s.size
    if k == 0:
        return []
    # stable sort on -score keeps lower indices first among equal scores
    order = np.argsort(-s, kind="stable")
    return sorted(order[:k].tolist())


# ---------------------------------------------------------------------------
# verification


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` must rebuild the loss from ``params`` on every call. With
    ``max_coords`` set, each parameter is checked on that many randomly chosen
    coordinates instead of all of them.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise GradCheckError("grad_check requires 64-bit parameters")
        p.grad = None
    with Tape() as tape:
        loss = fn()
    if not np.all(np.isfinite(loss.data)):
        raise GradCheckError("loss is not finite")
    tape.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            fp = fn().item()
            flat[c] = orig - epsilon
            fm = fn().item()
            flat[c] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"non-finite loss while perturbing {p.name}[{c}]")
            numeric = (fp - fm) / (2 * epsilon)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
