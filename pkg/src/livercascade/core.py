"""Label taxonomy, voxel grids and volume arithmetic shared by every module."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInputError, GeometryError, InvalidProbabilityError

NUM_CHANNELS = 14
PROB_SUM_TOLERANCE = 1e-3


class ClassLabel(IntEnum):
    BACKGROUND = 0
    HCC = 1
    ICC = 2
    META = 3
    HEM = 4
    OTHER = 5
    CYST = 6
    LIVER = 7
    HEPATIC_VESSELS = 8
    PORTAL_SPLENIC_VEIN = 9
    GALLBLADDER = 10
    SPLEEN = 11
    PANCREAS = 12
    STOMACH = 13

    @property
    def is_lesion(self) -> bool:
        return 1 <= self <= 6

    @property
    def is_malignant(self) -> bool:
        return self in MALIGNANT

    @property
    def short_name(self) -> str:
        return SHORT_NAMES[self]


LESION_LABELS: tuple[ClassLabel, ...] = tuple(ClassLabel(c) for c in range(1, 7))
ORGAN_LABELS: tuple[ClassLabel, ...] = tuple(ClassLabel(c) for c in range(7, 14))
MALIGNANT = frozenset({ClassLabel.HCC, ClassLabel.ICC, ClassLabel.META})

SHORT_NAMES = {
    ClassLabel.BACKGROUND: "Background",
    ClassLabel.HCC: "HCC",
    ClassLabel.ICC: "ICC",
    ClassLabel.META: "Meta",
    ClassLabel.HEM: "Hem",
    ClassLabel.OTHER: "Other",
    ClassLabel.CYST: "Cyst",
    ClassLabel.LIVER: "Liver",
    ClassLabel.HEPATIC_VESSELS: "HepaticVessels",
    ClassLabel.PORTAL_SPLENIC_VEIN: "PortalSplenicVein",
    ClassLabel.GALLBLADDER: "Gallbladder",
    ClassLabel.SPLEEN: "Spleen",
    ClassLabel.PANCREAS: "Pancreas",
    ClassLabel.STOMACH: "Stomach",
}


def is_lesion_code(code: int) -> bool:
    return 1 <= int(code) <= 6


def lesion_voxels(labels: np.ndarray) -> np.ndarray:
    """Boolean array marking voxels that carry any lesion label (1-6)."""
    return (labels >= 1) & (labels <= 6)


def check_spacing(spacing: Sequence[float]) -> tuple[float, float, float]:
    if len(spacing) != 3:
        raise GeometryError(f"spacing must have 3 components, got {len(spacing)}")
    out = tuple(float(s) for s in spacing)
    for s in out:
        if not math.isfinite(s) or s <= 0:
            raise GeometryError(f"spacing components must be finite and > 0, got {out}")
    return out  # type: ignore[return-value]


def voxel_volume_cm3(spacing: Sequence[float]) -> float:
    """Volume of one voxel in cm^3 for a (z, y, x) spacing given in mm."""
    sz, sy, sx = check_spacing(spacing)
    return sz * sy * sx / 1000.0


def priority_max(labels: Iterable[int]) -> ClassLabel:
    """Highest-priority lesion label; priority runs HCC > ICC > Meta > Hem > Other > Cyst."""
    codes = set(int(c) for c in labels)
    if not codes:
        raise EmptyInputError("priority_max of an empty label set")
    bad = [c for c in codes if not is_lesion_code(c)]
    if bad:
        raise ValueError(f"not lesion codes: {sorted(bad)}")
    return ClassLabel(min(codes))


_KINDS = {
    np.dtype(np.uint8): "label-u8",
    np.dtype(np.float32): "scalar-f32",
    np.dtype(np.int16): "scalar-i16",
}


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """A (Z, Y, X) array with physical spacing in mm.

    Storage is C order, so the flat index of (z, y, x) is ``(z*Y + y)*X + x``.
    The wrapped array is made read-only.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) <= 0:
            raise GeometryError(f"VoxelGrid needs a non-empty 3D array, got shape {data.shape}")
        if data.dtype not in _KINDS:
            raise TypeError(f"unsupported element type {data.dtype}; expected one of u8, i16, f32")
        data = np.ascontiguousarray(data)
        if data.flags.writeable:
            data = data.view()
            data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)  # type: ignore[return-value]

    @property
    def kind(self) -> str:
        return _KINDS[self.data.dtype]

    @property
    def voxel_volume_cm3(self) -> float:
        return voxel_volume_cm3(self.spacing)

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None  # type: ignore[assignment]


def flat_index(coord: Sequence[int], dims: Sequence[int]) -> int:
    z, y, x = coord
    Z, Y, X = dims
    if not (0 <= z < Z and 0 <= y < Y and 0 <= x < X):
        raise IndexError(f"{tuple(coord)} outside dims {tuple(dims)}")
    return (z * Y + y) * X + x


def unravel(index: int, dims: Sequence[int]) -> tuple[int, int, int]:
    Z, Y, X = dims
    if not 0 <= index < Z * Y * X:
        raise IndexError(f"flat index {index} outside dims {tuple(dims)}")
    zy, x = divmod(index, X)
    z, y = divmod(zy, Y)
    return z, y, x


@dataclass(frozen=True, eq=False)
class ProbMaps:
    """Per-voxel class confidences, shape (14, Z, Y, X), channel 0 = background."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[0] != NUM_CHANNELS:
            raise GeometryError(f"ProbMaps needs shape (14, Z, Y, X), got {data.shape}")
        data = np.ascontiguousarray(data)
        if data.flags.writeable:
            data = data.view()
            data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape[1:])  # type: ignore[return-value]

    def channel(self, code: int) -> np.ndarray:
        return self.data[int(code)]

    def validate(self, tol: float = PROB_SUM_TOLERANCE) -> None:
        """Check the normalized-probability invariants; raise on violation."""
        if self.data.min() < 0 or self.data.max() > 1:
            raise InvalidProbabilityError("channel values outside [0, 1]")
        sums = self.data.sum(axis=0, dtype=np.float64)
        if np.abs(sums - 1.0).max() > tol:
            raise InvalidProbabilityError(f"per-voxel channel sums deviate from 1 by more than {tol}")
