"""Dataset sources: Gaussian blobs and IDX (MNIST-family) files."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import BadMagicError, ParseError, TruncatedFileError, ValidationError
from ..federation import LabeledDataset
from ..numerics.rng import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class BlobsSpec:
    K: int = 5
    d: int = 2
    per_class: int = 200
    radius: float = 4.0
    std: float = 0.5

    def __post_init__(self):
        if self.K < 1 or self.d < 1 or self.per_class < 1 or not self.radius > 0 or self.std < 0:
            raise ValidationError(f"invalid blobs spec {self}")


def blob_centers(spec: BlobsSpec) -> np.ndarray:
    centers = np.zeros((spec.K, spec.d))
    angles = 2.0 * np.pi * np.arange(spec.K) / spec.K
    centers[:, 0] = spec.radius * np.cos(angles)
    if spec.d > 1:
        centers[:, 1] = spec.radius * np.sin(angles)
    return centers


def generate_blobs(spec: BlobsSpec, rng: Rng) -> LabeledDataset:
    centers = blob_centers(spec)
    labels = np.repeat(np.arange(spec.K), spec.per_class)
    X = centers[labels] + spec.std * rng.standard_normal((labels.size, spec.d))
    order = rng.permutation(labels.size)
    return LabeledDataset(X[order], labels[order], spec.K)


def blobs_task(spec: BlobsSpec, seed: int, test_per_class: int | None = None):
    """(train, test) drawn from independent streams of one seed."""
    root = Rng(seed).split("data")
    train = generate_blobs(spec, root.split("train"))
    test_spec = spec if test_per_class is None else BlobsSpec(spec.K, spec.d, test_per_class, spec.radius, spec.std)
    return train, generate_blobs(test_spec, root.split("test"))


# ------------------------------------------------------------------ IDX

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _header(raw: bytes, n_dims: int, expect_magic: int, what: str):
    need = 4 + 4 * n_dims
    if len(raw) < 4:
        raise TruncatedFileError(f"{what}: file too short for a magic number", offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expect_magic:
        raise BadMagicError(f"{what}: magic 0x{magic:08x}, expected 0x{expect_magic:08x}", offset=0)
    if len(raw) < need:
        raise TruncatedFileError(f"{what}: header truncated", offset=len(raw))
    return struct.unpack_from(">" + "I" * n_dims, raw, 4), need


def parse_idx_images(raw: bytes) -> np.ndarray:
    (count, rows, cols), off = _header(raw, 3, IDX_IMAGES_MAGIC, "images")
    size = count * rows * cols
    if len(raw) < off + size:
        raise TruncatedFileError(f"images: expected {size} pixel bytes", offset=len(raw))
    pix = np.frombuffer(raw, dtype=np.uint8, count=size, offset=off)
    return pix.reshape(count, rows * cols).astype(np.float64) / 255.0


def parse_idx_labels(raw: bytes) -> np.ndarray:
    (count,), off = _header(raw, 1, IDX_LABELS_MAGIC, "labels")
    if len(raw) < off + count:
        raise TruncatedFileError(f"labels: expected {count} label bytes", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=off).astype(np.int64)


def load_idx(images_path, labels_path, K: int | None = None) -> LabeledDataset:
    X = parse_idx_images(_read_bytes(images_path))
    y = parse_idx_labels(_read_bytes(labels_path))
    if X.shape[0] != y.size:
        raise ParseError(f"{X.shape[0]} images but {y.size} labels", offset=4)
    if K is None:
        K = max(10, int(y.max()) + 1) if y.size else 10
    return LabeledDataset(X, y, K)


def write_idx_images(path, images: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())
