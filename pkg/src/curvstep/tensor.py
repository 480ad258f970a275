"""Dense float64 containers and the parameter-vector algebra.

A Tensor wraps a C-contiguous float64 ndarray and is treated as immutable.
A ParamVec is the ordered collection of per-layer parameter tensors: it is
the carrier for parameters, gradients, update directions and Hessian-vector
products, and supports the handful of inner-product-space operations the
training loop needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Structural mismatch between shapes or segment layouts."""


def _as_array(values, shape=None) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if shape is not None:
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(f"cannot view {arr.size} values as shape {tuple(shape)}")
        arr = arr.reshape(tuple(shape))
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Tensor:
    """Immutable dense value: row-major float64 data plus its shape."""

    array: np.ndarray

    @staticmethod
    def of(values, shape=None) -> "Tensor":
        return Tensor(_as_array(values, shape))

    @staticmethod
    def zeros(shape) -> "Tensor":
        return Tensor(_as_array(np.zeros(shape)))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.array.reshape(-1)

    @property
    def size(self) -> int:
        return self.array.size

    def __post_init__(self):
        arr = self.array
        if arr.dtype != np.float64:
            object.__setattr__(self, "array", _as_array(arr))


@dataclass(frozen=True)
class BatchView:
    """One mini-batch: inputs and targets share the leading sample axis."""

    inputs: Tensor
    targets: Tensor
    sample_count: int

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ShapeError("sample_count must be positive")
        if self.inputs.shape[0] != self.sample_count or self.targets.shape[0] != self.sample_count:
            raise ShapeError(
                f"batch axes disagree: inputs {self.inputs.shape}, "
                f"targets {self.targets.shape}, sample_count {self.sample_count}"
            )


@dataclass(frozen=True)
class ParamVec:
    """Ordered (layer-id, Tensor) segments, one per parameterized layer."""

    segments: tuple[tuple[int, Tensor], ...]

    @staticmethod
    def of(pairs) -> "ParamVec":
        return ParamVec(tuple((int(i), t if isinstance(t, Tensor) else Tensor.of(t)) for i, t in pairs))

    def segment(self, layer_id: int) -> Tensor:
        for i, t in self.segments:
            if i == layer_id:
                return t
        raise KeyError(f"no parameter segment for layer {layer_id}")

    @property
    def layer_ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.segments)

    @property
    def size(self) -> int:
        return sum(t.size for _, t in self.segments)

    def zeros_like(self) -> "ParamVec":
        return ParamVec(tuple((i, Tensor.zeros(t.shape)) for i, t in self.segments))

    def map(self, fn) -> "ParamVec":
        """Apply an elementwise ndarray -> ndarray function to every segment."""
        return ParamVec(tuple((i, Tensor.of(fn(t.array))) for i, t in self.segments))


def _check_aligned(a: ParamVec, b: ParamVec):
    if a.layer_ids != b.layer_ids:
        raise ShapeError(f"segment layouts differ: {a.layer_ids} vs {b.layer_ids}")
    for (i, ta), (_, tb) in zip(a.segments, b.segments):
        if ta.shape != tb.shape:
            raise ShapeError(f"segment {i} shapes differ: {ta.shape} vs {tb.shape}")


def inner(a: ParamVec, b: ParamVec) -> float:
    """Sum over all segments of the element-wise products."""
    _check_aligned(a, b)
    total = 0.0
    for (_, ta), (_, tb) in zip(a.segments, b.segments):
        total += float(np.dot(ta.data, tb.data))
    return total


def norm_sq(a: ParamVec) -> float:
    """Squared norm, computed as inner(a, a) so the summation order matches."""
    return inner(a, a)


def scale(alpha: float, a: ParamVec) -> ParamVec:
    return a.map(lambda arr: alpha * arr)


def axpy(alpha: float, x: ParamVec, y: ParamVec) -> ParamVec:
    """Fresh value y + alpha * x."""
    _check_aligned(x, y)
    out = []
    for (i, tx), (_, ty) in zip(x.segments, y.segments):
        out.append((i, Tensor.of(ty.array + alpha * tx.array)))
    return ParamVec(tuple(out))


def combine(a: ParamVec, b: ParamVec, fn) -> ParamVec:
    """Segment-wise binary combination fn(a_arr, b_arr)."""
    _check_aligned(a, b)
    return ParamVec(tuple((i, Tensor.of(fn(ta.array, tb.array))) for (i, ta), (_, tb) in zip(a.segments, b.segments)))
