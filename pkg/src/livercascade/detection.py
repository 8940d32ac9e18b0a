"""Lesion instances and per-case collections of them."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .core import ClassLabel, check_spacing, voxel_volume_cm3
from .errors import GeometryError
from .volio.rle import RleMask


@dataclass(frozen=True, eq=False)
class Detection:
    id: int
    label: ClassLabel
    mask: RleMask
    voxel_count: int
    volume_cm3: float
    bbox: tuple[int, int, int, int, int, int]
    centroid: tuple[float, float, float]
    score_cm3: float | None = None
    flags: tuple[str, ...] = ()

    @classmethod
    def from_indices(
        cls,
        id: int,
        label: int,
        indices: np.ndarray,
        dims: Sequence[int],
        spacing: Sequence[float],
        score_cm3: float | None = None,
    ) -> "Detection":
        """Build a detection from sorted unique flat indices."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise ValueError("a detection needs at least one voxel")
        dims = tuple(int(d) for d in dims)
        zz, yy, xx = np.unravel_index(idx, dims)
        bbox = (int(zz.min()), int(yy.min()), int(xx.min()), int(zz.max()), int(yy.max()), int(xx.max()))
        centroid = (float(zz.mean()), float(yy.mean()), float(xx.mean()))
        det = cls(
            id=int(id),
            label=ClassLabel(int(label)),
            mask=RleMask.from_indices(idx, dims),
            voxel_count=int(idx.size),
            volume_cm3=int(idx.size) * voxel_volume_cm3(spacing),
            bbox=bbox,
            centroid=centroid,
            score_cm3=score_cm3,
        )
        det.__dict__["indices"] = idx
        return det

    @cached_property
    def indices(self) -> np.ndarray:
        """Sorted flat voxel indices of the mask."""
        return self.mask.indices()

    @property
    def extent(self) -> tuple[int, int, int]:
        z0, y0, x0, z1, y1, x1 = self.bbox
        return z1 - z0 + 1, y1 - y0 + 1, x1 - x0 + 1

    def with_changes(self, **changes) -> "Detection":
        new = replace(self, **changes)
        if "mask" not in changes and "indices" in self.__dict__:
            new.__dict__["indices"] = self.__dict__["indices"]
        return new

    def __eq__(self, other) -> bool:
        if not isinstance(other, Detection):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.mask == other.mask
            and self.voxel_count == other.voxel_count
            and self.volume_cm3 == other.volume_cm3
            and self.bbox == other.bbox
            and self.centroid == other.centroid
            and self.score_cm3 == other.score_cm3
            and self.flags == other.flags
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class DetectionSet:
    case_id: str
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    detections: tuple[Detection, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", check_spacing(self.spacing))
        object.__setattr__(self, "detections", tuple(self.detections))
        ids = [d.id for d in self.detections]
        if len(set(ids)) != len(ids):
            raise ValueError(f"detection ids must be unique within a set: {ids}")
        for d in self.detections:
            if d.mask.dims != self.dims:
                raise GeometryError(f"detection {d.id} mask dims {d.mask.dims} differ from set dims {self.dims}")

    def __iter__(self) -> Iterator[Detection]:
        return iter(self.detections)

    def __len__(self) -> int:
        return len(self.detections)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DetectionSet):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.dims == other.dims
            and self.spacing == other.spacing
            and len(self.detections) == len(other.detections)
            and self.detections == other.detections
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def labels(self) -> set[ClassLabel]:
        return {d.label for d in self.detections}

    def by_id(self, det_id: int) -> Detection:
        for d in self.detections:
            if d.id == det_id:
                return d
        raise KeyError(det_id)

    def with_detections(self, detections) -> "DetectionSet":
        return DetectionSet(self.case_id, self.dims, self.spacing, tuple(detections))

    def check_compatible(self, other: "DetectionSet") -> None:
        if self.dims != other.dims or self.spacing != other.spacing:
            raise GeometryError(
                f"detection sets disagree: dims {self.dims} vs {other.dims}, "
                f"spacing {self.spacing} vs {other.spacing}"
            )

    def label_grid(self) -> np.ndarray:
        """Paint every detection into a uint8 (Z, Y, X) label array."""
        out = np.zeros(int(np.prod(self.dims)), dtype=np.uint8)
        for d in self.detections:
            out[d.indices] = int(d.label)
        return out.reshape(self.dims)
