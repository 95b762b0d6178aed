"""Reader for the IDX binary format (unsigned-byte images and labels)."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class IDXDataset:
    images: np.ndarray  # (count, rows, cols) in [0, 1]
    labels: np.ndarray
    dims: tuple

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self.images), -1)


def _read(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    return gzip.decompress(data) if data[:2] == b"\x1f\x8b" else data


def _parse(raw: bytes, magic: int, ndim: int, name: str) -> np.ndarray:
    head = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError(f"{name}: truncated magic number", offset=len(raw))
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"{name}: bad magic 0x{got:08x}, expected 0x{magic:08x}", offset=0)
    if len(raw) < head:
        raise FormatError(f"{name}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = head + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise FormatError(f"{name}: truncated payload, {need - len(raw)} bytes missing", offset=len(raw))
    if len(raw) > need:
        raise FormatError(f"{name}: {len(raw) - need} trailing bytes", offset=need)
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(path_images, path_labels) -> IDXDataset:
    """Parse an image/label pair and scale pixel bytes to [0, 1]."""
    imgs = _parse(_read(path_images), IMAGES_MAGIC, 3, str(path_images))
    labels = _parse(_read(path_labels), LABELS_MAGIC, 1, str(path_labels))
    if len(labels) != len(imgs):
        raise FormatError(f"{len(imgs)} images but {len(labels)} labels", offset=4)
    return IDXDataset(imgs.astype(np.float64) / 255.0, labels.astype(np.int64), tuple(imgs.shape))


def write_idx(path_images, path_labels, images, labels) -> None:
    """Write uint8 images (count, rows, cols) and labels; used for fixtures and exports."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path_images).write_bytes(struct.pack(">4I", IMAGES_MAGIC, *images.shape) + images.tobytes())
    Path(path_labels).write_bytes(struct.pack(">2I", LABELS_MAGIC, len(labels)) + labels.tobytes())
