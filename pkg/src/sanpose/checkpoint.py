"""Language-neutral checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"SANCKPT\\0"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 header length N
    next N bytes  UTF-8 JSON header
    remainder     tensor payload

The header is ``{"version": 1, "meta": {...}, "tensors": [...]}``. Each tensor entry is
``{"name", "dtype", "shape", "offset", "nbytes"}`` with ``offset`` counted from the start of
the payload. ``dtype`` is ``"<f4"`` (little-endian float32) for floating tensors and ``"<i8"``
for integer buffers. Tensor names are dotted parameter paths prefixed by their group, e.g.
``generator.blocks.0.update.0.weight`` or ``discriminator.head.bias``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import DataError, MissingFileError

MAGIC = b"SANCKPT\0"
VERSION = 1


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if np.issubdtype(arr.dtype, np.floating):
        return arr.astype("<f4")
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return arr.astype("<i8")
    raise TypeError(f"unsupported dtype {arr.dtype}")


def save(path, tensors: Mapping[str, object], meta: Mapping | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name in tensors:
        arr = np.require(_as_array(tensors[name]), requirements="C")
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": VERSION, "meta": dict(meta or {}), "tensors": entries},
                        sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)
    return path


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(meta, {name: array})``."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[8:20])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[20:20 + hlen].decode("utf-8"))
    payload = memoryview(data)[20 + hlen:]
    arrays = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header["meta"], arrays


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = [k for k in state if f"{prefix}.{k}" not in arrays]
    if missing:
        raise DataError(f"checkpoint lacks {prefix} tensors: {missing[:3]}")
    new = {}
    for k, ref in state.items():
        arr = arrays[f"{prefix}.{k}"]
        if tuple(arr.shape) != tuple(ref.shape):
            raise DataError(f"{prefix}.{k}: shape {arr.shape}, model expects {tuple(ref.shape)}")
        new[k] = torch.from_numpy(arr).to(ref.dtype)
    module.load_state_dict(new)
