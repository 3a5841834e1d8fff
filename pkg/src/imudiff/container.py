"""Versioned binary container: JSON header + named little-endian row-major tensors.

Layout::

    b"IMUDIFF\\0" | u32 format version | u64 header length | header (UTF-8 JSON) | tensor bytes

The header holds free-form ``meta`` and a ``tensors`` table of
(name, dtype, shape, offset, nbytes) with offsets relative to the data block.
Output is byte-for-byte deterministic for equal inputs.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"IMUDIFF\0"
FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "i4": "<i4", "b1": "|b1", "u1": "|u1"}


def _norm_dtype(a: np.ndarray) -> str:
    key = a.dtype.kind + str(a.dtype.itemsize)
    if key not in _DTYPES:
        raise ConfigError(f"unsupported dtype {a.dtype}")
    return _DTYPES[key]


def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    table, blobs, offset = [], [], 0
    for name in tensors:
        a = np.asarray(tensors[name])
        dt = _norm_dtype(a)
        raw = np.ascontiguousarray(a, dtype=np.dtype(dt)).tobytes(order="C")
        table.append({"name": name, "dtype": dt, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": table, "endianness": "little"},
                        sort_keys=True, separators=(",", ":")).encode()
    return b"".join([MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(header)), header, *blobs])


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise ConfigError("not an imudiff container")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported container version {version}")
    header = json.loads(data[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        buf = data[start:start + t["nbytes"]]
        tensors[t["name"]] = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
    return header["meta"], tensors


def atomic_write(path: "str | Path", data: "bytes | str"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save(path: "str | Path", meta: dict, tensors: dict[str, np.ndarray]):
    atomic_write(path, encode(meta, tensors))


def load(path: "str | Path") -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def save_model(path, model, meta: dict):
    """Checkpoint a torch module: config + parameters in registration order."""
    tensors = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    save(path, meta, tensors)


def load_state(path) -> tuple[dict, dict]:
    import torch

    meta, tensors = load(path)
    return meta, {k: torch.from_numpy(v) for k, v in tensors.items()}
