"""Flat binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"PS3CKPT1"
    header_len   u32
    header       header_len bytes of UTF-8 JSON:
                 {"encoder": {EncoderConfig fields}, "meta": {...}}
    count        u32       number of tensors
    count times:
      name_len   u16
      name       name_len bytes UTF-8
      dtype      u8        0 = float32, 1 = float64
      ndim       u8
      dims       ndim × u32
      data       prod(dims) little-endian values, row-major

Tensors are written sorted by name, and the header JSON uses sorted keys, so
equal states produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, PS3Encoder
from .tensor import Tensor

MAGIC = b"PS3CKPT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, cfg: EncoderConfig, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = json.dumps({"encoder": cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[EncoderConfig, dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        pos = 8
        (hlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        header = json.loads(buf[pos:pos + hlen].decode())
        pos += hlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            n = int(np.prod(dims)) if ndim else 1
            tensors[name] = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
            pos += n * dt.itemsize
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return EncoderConfig.from_dict(_tuples(header["encoder"])), tensors, header.get("meta", {})


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def save_model(path, model: PS3Encoder, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = {f"param.{k}": t.data for k, t in model.params.items()}
    tensors.update(extra or {})
    write_checkpoint(path, model.cfg, tensors, meta)


def load_model(path) -> tuple[PS3Encoder, dict, dict[str, np.ndarray]]:
    """Returns the model, header meta, and the non-parameter tensors (optimizer state)."""
    cfg, tensors, meta = read_checkpoint(path)
    model = PS3Encoder(cfg)
    extra = {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            key = name[len("param."):]
            if key not in model.params or model.params[key].shape != arr.shape:
                raise CheckpointError(f"parameter {key} does not match the encoder config")
            model.params[key] = Tensor(arr.astype(np.float32), requires_grad=True, name=key)
        else:
            extra[name] = arr
    missing = [k for k in model.params if f"param.{k}" not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    return model, meta, extra


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
