"""Binary model container.

Layout::

    b"CEDF"                      magic
    uint32 little-endian         header length in bytes
    header                       UTF-8 JSON: version, kind, arch, schedule,
                                 extra, and tensors = [{name, shape}, ...]
    payloads                     each tensor as little-endian float32, in
                                 header order
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CEDF"
VERSION = 1


def save_checkpoint(path, kind: str, tensors: dict, arch: dict | None = None,
                    schedule: dict | None = None, extra: dict | None = None) -> None:
    arrays = {name: np.ascontiguousarray(np.asarray(v, dtype="<f4")) for name, v in tensors.items()}
    header = {
        "version": VERSION,
        "kind": kind,
        "arch": arch or {},
        "schedule": schedule,
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(a.tobytes())


def load_checkpoint(path, kind: str | None = None):
    """Return (header, {name: float32 array}). Validates magic, kind and sizes."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}", offset=0)
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header length", offset=4)
    (hlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + hlen:
        raise FormatError(f"{path}: truncated header", offset=8)
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})", offset=8) from None
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}", offset=8)
    if kind is not None and header.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {header.get('kind')!r}", offset=8)
    offset = 8 + hlen
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: truncated payload for {spec['name']}", offset=offset)
        tensors[spec["name"]] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes", offset=offset)
    return header, tensors


def save_module(path, kind, module, arch, schedule=None, extra=None):
    state = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    save_checkpoint(path, kind, state, arch, schedule, extra)


def load_state_dict(tensors: dict):
    import torch

    return {k: torch.from_numpy(v) for k, v in tensors.items()}
