"""
Differential-geometry core of the perceived-distance model.

An image is a point in pixel space. A degraded image differs from its reference
by a difference field. Perception is modelled as a linear strain J of that
space, so the perceived squared distance is the quadratic form (Δ)ᵀ Jᵀ J (Δ).
All vector/matrix correspondences use row-major raster order.
"""

import math
from typing import Any

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, field_validator

from app.util.errors import ShapeError

type FloatArray = npt.NDArray[np.float64]


def _readonly(values: Any) -> FloatArray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class _ArrayModel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class _Field(_ArrayModel):
    values: FloatArray

    @field_validator("values", mode="before")
    @classmethod
    def _validate_values(cls, value: Any) -> FloatArray:
        arr = _readonly(value)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array, got {arr.ndim} dimensions")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("width and height must be >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("all values must be finite")
        return arr

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def size(self) -> int:
        """D, the number of pixels."""
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def flatten(self) -> FloatArray:
        return self.values.ravel(order="C")


class GrayImage(_Field):
    """Luminance per pixel, nominally in [0, 255]."""

    pass


class DifferenceField(_Field):
    """Per-pixel luminance difference deg − ref."""

    pass


class _SquareMatrix(_ArrayModel):
    entries: FloatArray

    @field_validator("entries", mode="before")
    @classmethod
    def _validate_entries(cls, value: Any) -> FloatArray:
        arr = _readonly(value)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
            raise ValueError(f"expected a non-empty square matrix, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("all entries must be finite")
        return arr

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.entries, self.entries.T))

    def has_unit_diagonal(self) -> bool:
        return bool(np.all(np.diag(self.entries) == 1.0))


class DenseJacobian(_SquareMatrix):
    pass


class DisplacementGradient(_SquareMatrix):
    pass


class StrainTensor(_SquareMatrix):
    @field_validator("entries")
    @classmethod
    def _symmetric(cls, value: FloatArray) -> FloatArray:
        if not np.array_equal(value, value.T):
            raise ValueError("strain tensor must be symmetric")
        return value


def identity_jacobian(dim: int) -> DenseJacobian:
    return DenseJacobian(entries=np.eye(dim))


def field_from_vector(vector: npt.ArrayLike, height: int, width: int) -> DifferenceField:
    return DifferenceField(values=np.asarray(vector, dtype=np.float64).reshape(height, width))


def difference(ref: GrayImage, deg: GrayImage) -> DifferenceField:
    if ref.shape != deg.shape:
        raise ShapeError(
            f"image dimensions differ: reference {ref.width}x{ref.height}, degraded {deg.width}x{deg.height}"
        )
    return DifferenceField(values=deg.values - ref.values)


def euclidean_distance_sq(delta: DifferenceField) -> float:
    flat = delta.flatten()
    return float(np.dot(flat, flat))


def distance(distance_sq: float) -> float:
    """Square-root accessor for reporting; everything else stays squared."""
    return math.sqrt(distance_sq)


def displacement_gradient(p: DenseJacobian) -> DisplacementGradient:
    entries = np.array(p.entries)
    np.fill_diagonal(entries, np.diag(entries) - 1.0)
    return DisplacementGradient(entries=entries)


def strain_tensor(j: DenseJacobian) -> StrainTensor:
    sym = (j.entries + j.entries.T) / 2.0
    np.fill_diagonal(sym, np.diag(sym) - 1.0)
    return StrainTensor(entries=sym)


def _check_dim(delta: DifferenceField, dim: int):
    if dim != delta.size:
        raise ShapeError(f"matrix dimension {dim} does not match {delta.size} pixels")


def perceived_distance_sq_dense(delta: DifferenceField, j: DenseJacobian) -> float:
    """‖JΔ‖², the perceived squared distance."""
    _check_dim(delta, j.dim)
    strained = j.entries @ delta.flatten()
    return float(np.dot(strained, strained))


def first_order_distance_sq(delta: DifferenceField, eps: StrainTensor) -> float:
    """d_E² + 2 Δᵀ ε Δ, dropping the second-order term of the strain."""
    _check_dim(delta, eps.dim)
    flat = delta.flatten()
    return euclidean_distance_sq(delta) + 2.0 * float(flat @ eps.entries @ flat)


def strain_remainder(delta: DifferenceField, j: DenseJacobian) -> float:
    """‖(J − I)Δ‖², the exact gap between the perceived and first-order forms."""
    _check_dim(delta, j.dim)
    gradient = displacement_gradient(j)
    moved = gradient.entries @ delta.flatten()
    return float(np.dot(moved, moved))
