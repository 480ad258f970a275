"""Dataset ingestion, seeded batching, and the FIFO feature memory.

IDX files are parsed bit-exactly: big-endian magic (0x00000803 for images,
0x00000801 for labels), big-endian 32-bit extents, then unsigned bytes; pixel
bytes scale to [0, 1].  Synthetic Gaussian blobs give a deterministic
desk-scale classification stand-in.  Batching is a seeded per-epoch shuffle
that partitions the dataset, final partial batch included.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .tensor import BatchView, ShapeError, Tensor

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncated payload, or count mismatch."""


@dataclass(frozen=True)
class Dataset:
    """Inputs with a leading sample axis and aligned targets."""

    inputs: Tensor
    targets: Tensor
    class_count: Optional[int] = None

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ShapeError(
                f"inputs/targets leading extents differ: {self.inputs.shape[0]} vs {self.targets.shape[0]}"
            )
        if self.class_count is not None and self.targets.array.ndim == 1:
            ids = self.targets.array
            if ids.size and (ids.min() < 0 or ids.max() >= self.class_count):
                raise ShapeError("class id out of range")

    @property
    def sample_count(self) -> int:
        return self.inputs.shape[0]


def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = int(np.prod(dims))
    payload = raw[header_end:]
    if len(payload) < count:
        raise IdxFormatError(f"{path}: payload holds {len(payload)} bytes, header promises {count}")
    return np.frombuffer(payload[:count], dtype=np.uint8).reshape(dims)


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse an IDX image/label pair; pixels scale to [0, 1]."""
    images = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}"
        )
    inputs = Tensor.of(images.astype(np.float64) / 255.0)
    targets = Tensor.of(labels.astype(np.float64))
    return Dataset(inputs, targets, class_count=int(labels.max()) + 1 if labels.size else 0)


def save_idx(images: np.ndarray, labels: np.ndarray, images_path: str, labels_path: str):
    """Write an IDX image/label pair (uint8 payloads, big-endian headers)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ShapeError("images must be [count, rows, cols]")
    if labels.shape != (images.shape[0],):
        raise ShapeError("labels must align with images")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def synthetic_blobs(classes: int, per_class: int, dim: int, seed: int,
                    center_spread: float = 3.0) -> Dataset:
    """Deterministic Gaussian clusters with unit spread around seeded centers."""
    if classes <= 0 or per_class <= 0 or dim <= 0:
        raise ValueError("classes, per_class and dim must all be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_spread, size=(classes, dim))
    samples = centers[:, None, :] + rng.normal(0.0, 1.0, size=(classes, per_class, dim))
    inputs = samples.reshape(classes * per_class, dim)
    labels = np.repeat(np.arange(classes, dtype=np.float64), per_class)
    return Dataset(Tensor.of(inputs), Tensor.of(labels), class_count=classes)


def batches(ds: Dataset, batch_size: int, epoch_seed: int) -> Iterator[BatchView]:
    """Seeded shuffle partition of the dataset; the final partial batch is emitted."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(epoch_seed).permutation(ds.sample_count)
    inputs = ds.inputs.array
    targets = ds.targets.array
    for start in range(0, ds.sample_count, batch_size):
        idx = order[start:start + batch_size]
        yield BatchView(Tensor.of(inputs[idx]), Tensor.of(targets[idx]), len(idx))


class FeatureMemory:
    """FIFO ring of the most recent (feature, target) pairs.

    Assembled batches contain every freshly pushed sample exactly once plus the
    retained history; stored entries are plain values, so no gradient reaches
    whatever produced them.
    """

    def __init__(self, capacity: int = 256):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._features: list[np.ndarray] = []
        self._targets: list[np.ndarray] = []

    @property
    def fill(self) -> int:
        return len(self._features)

    def push(self, features: np.ndarray, targets: np.ndarray):
        for row, tgt in zip(features, targets):
            if len(self._features) == self.capacity:
                self._features.pop(0)
                self._targets.pop(0)
            self._features.append(np.array(row, dtype=np.float64))
            self._targets.append(np.array(tgt, dtype=np.float64))


def memory_push_assemble(mem: FeatureMemory, fresh: BatchView) -> BatchView:
    """Push a fresh batch into the memory and return the full buffer as a batch."""
    mem.push(fresh.inputs.array, fresh.targets.array)
    feats = np.stack(mem._features)
    tgts = np.stack(mem._targets)
    return BatchView(Tensor.of(feats), Tensor.of(tgts), mem.fill)
