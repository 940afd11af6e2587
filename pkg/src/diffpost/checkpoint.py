"""Little-endian binary checkpoints.

Layout::

    magic    b"DPCKPT\\x00\\x01"                8 bytes
    version  uint32
    digest   32 raw bytes (sha256 of the model config)
    meta     uint32 length + UTF-8 JSON
    count    uint32
    records  count x (uint16 name length, name, uint8 dtype code,
                      uint8 ndim, ndim x uint32 shape, uint64 nbytes, data)

All integers and tensor data are little-endian. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DPCKPT\x00\x01"
FORMAT_VERSION = 1

_CODES = {"<f8": 1, "<f4": 2, "<i8": 3}
_DTYPES = {v: np.dtype(k) for k, v in _CODES.items()}


class CheckpointError(ValueError):
    pass


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    a = np.ascontiguousarray(t)
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path: str | Path, tensors: dict, digest: str, meta: dict | None = None) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    meta_blob = json.dumps(meta or {}, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(bytes.fromhex(digest))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            a = _to_numpy(t)
            code = _CODES.get(a.dtype.str)
            if code is None:
                raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<BB", code, a.ndim))
            f.write(struct.pack(f"<{a.ndim}I", *a.shape))
            raw = a.tobytes()
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], str, dict]:
    """Returns (tensors, digest hex, meta)."""
    data = Path(path).read_bytes()
    try:
        return _parse(path, data)
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError, ValueError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from e


def _parse(path, data: bytes):
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    digest = data[off:off + 32].hex()
    off += 32
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + mlen])
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        arr = np.frombuffer(data, dtype=_DTYPES[code], count=nbytes // _DTYPES[code].itemsize, offset=off)
        off += nbytes
        tensors[name] = torch.from_numpy(arr.reshape(shape).copy())
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return tensors, digest, meta


def model_tensors(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"param.{k}": v for k, v in model.state_dict().items()}


@torch.no_grad()
def load_model_tensors(model: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    sd = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    model.load_state_dict(sd, strict=True)


def save_model(path, model, meta: dict | None = None) -> None:
    from dataclasses import asdict
    meta = dict(meta or {})
    meta.setdefault("model_config", asdict(model.cfg))
    save_checkpoint(path, model_tensors(model), model.cfg.digest(), meta)


def load_model(path, cfg=None):
    """Rebuild a Denoiser from a checkpoint. With ``cfg`` given, its digest
    must match the one in the file header."""
    from .model import ModelConfig, build_model
    tensors, digest, meta = load_checkpoint(path)
    if cfg is None:
        cfg = ModelConfig(**meta["model_config"])
    if cfg.digest() != digest:
        raise CheckpointError("checkpoint was written for a different model config")
    model = build_model(cfg)
    load_model_tensors(model, tensors)
    return model, meta
