"""IDX dataset reading and writing.

The IDX layout is the one used by the MNIST distribution: a big-endian
magic number whose low byte is the rank and whose third byte is the
element type code (0x08 = unsigned byte), followed by one big-endian
uint32 per dimension and then the raw data. Files ending in ``.gz`` are
decompressed transparently.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXFormatError(ValueError):
    """Raised for malformed IDX files; carries the byte offset of the fault."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int = 10

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, count: int | None = None, start: int = 0) -> "Dataset":
        stop = len(self) if count is None else min(len(self), start + count)
        return Dataset(self.images[start:stop], self.labels[start:stop], self.num_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IDXFormatError(path, 0, "file too short for magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(path, 0, f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IDXFormatError(path, len(raw), "truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    size = int(np.prod(dims))
    if len(raw) - header_end != size:
        raise IDXFormatError(
            path, header_end, f"payload has {len(raw) - header_end} bytes, dimensions {dims} need {size}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the archive byte-reproducible
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def load_idx_dataset(image_path, label_path, num_classes: int = 10) -> Dataset:
    """Load an image/label IDX pair, scaling pixels to [0, 1]."""
    images = read_idx(image_path, IMAGE_MAGIC)
    labels = read_idx(label_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        # the count field sits right after the magic number
        raise IDXFormatError(
            label_path, 4, f"label count {labels.shape[0]} does not match image count {images.shape[0]}"
        )
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise IDXFormatError(label_path, 8 + int(bad[0]), f"label {labels[bad[0]]} outside [0, {num_classes})")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(x, labels.astype(np.int64), num_classes)
