"""IDX image/label parsing and the SLBL teacher-logits sidecar format.

IDX layout (big-endian): u32 magic, one u32 per dimension, then the
row-major u8 payload. Images use magic 0x00000803 (n, rows, cols),
labels 0x00000801 (n). Gzipped files are detected by their header and
decompressed transparently.

SLBL layout (little-endian)::

    bytes 0-3   b"SLBL"
    byte  4     u8 version (1)
    bytes 5-12  u64 n
    bytes 13-16 u32 C
    bytes 17-   n*C float32 logits, row-major
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

SLBL_MAGIC = b"SLBL"
SLBL_VERSION = 1
_SLBL_HEADER = struct.Struct("<4sBQI")


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValidationError(f"images must be 2-D, got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValidationError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.labels.size and int(self.labels.max()) >= self.n_classes:
            raise ValidationError(
                f"label {int(self.labels.max())} out of range for {self.n_classes} classes"
            )
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, index) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.n_classes)


@dataclass(frozen=True)
class SoftLabelSet:
    logits: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.logits.ndim != 2:
            raise ValidationError(f"logits must be 2-D, got shape {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValidationError("soft labels contain non-finite entries")

    @property
    def n(self):
        return self.logits.shape[0]

    @property
    def n_classes(self):
        return self.logits.shape[1]

    def check_pairing(self, data: Dataset):
        if self.logits.shape != (len(data), data.n_classes):
            raise ValidationError(
                f"soft labels {self.logits.shape} do not match dataset "
                f"({len(data)}, {data.n_classes})"
            )


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, path) -> tuple[tuple[int, ...], np.ndarray]:
    header_len = 4 * (1 + ndim)
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    found = struct.unpack_from(">I", raw, 0)[0]
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header_len
    if payload < expected:
        raise FormatError(
            f"{path}: truncated payload at byte offset {len(raw)}, "
            f"expected {header_len + expected} bytes"
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header_len)
    return dims, data


def load_idx_images(path) -> np.ndarray:
    """Read an IDX3 image file as an ``(n, rows*cols)`` float64 array in [0, 1]."""
    (n, rows, cols), data = _parse_idx(_read_bytes(path), IMAGE_MAGIC, 3, path)
    return data.reshape(n, rows * cols) / 255.0


def load_idx_labels(path) -> np.ndarray:
    (n,), data = _parse_idx(_read_bytes(path), LABEL_MAGIC, 1, path)
    return data.astype(np.int64)


def _find(root, stem):
    for name in (stem, stem + ".gz"):
        path = os.path.join(root, name)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(os.path.join(root, stem))


def load_split(root, split="train", n_classes=10) -> Dataset:
    """Load ``train`` or ``t10k`` (alias ``val``/``test``) from an MNIST-style directory."""
    prefix = {"train": "train", "t10k": "t10k", "val": "t10k", "test": "t10k"}[split]
    images = load_idx_images(_find(root, f"{prefix}-images-idx3-ubyte"))
    labels = load_idx_labels(_find(root, f"{prefix}-labels-idx1-ubyte"))
    return Dataset(images, labels, n_classes)


def write_soft_labels(soft: SoftLabelSet, path):
    logits = np.ascontiguousarray(soft.logits, dtype="<f4")
    if not np.all(np.isfinite(logits)):
        raise ValidationError("logits overflow float32")
    n, c = logits.shape
    with open(path, "wb") as f:
        f.write(_SLBL_HEADER.pack(SLBL_MAGIC, SLBL_VERSION, n, c))
        f.write(logits.tobytes())


def read_soft_labels(path) -> SoftLabelSet:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _SLBL_HEADER.size:
        raise FormatError(f"{path}: truncated SLBL header")
    magic, version, n, c = _SLBL_HEADER.unpack_from(raw, 0)
    if magic != SLBL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SLBL_VERSION:
        raise FormatError(f"{path}: unsupported SLBL version {version}")
    expected = _SLBL_HEADER.size + 4 * n * c
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    logits = np.frombuffer(raw, dtype="<f4", offset=_SLBL_HEADER.size).reshape(n, c)
    return SoftLabelSet(logits.astype(np.float32), source_id=os.fspath(path))
