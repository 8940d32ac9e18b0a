"""Split a multi-class label mask into individual lesion instances.

For each lesion class separately, every axial slice is labeled into 2D
components with 8-connectivity. Components in neighbouring slices that share
at least one (y, x) pixel belong to the same lesion; the merge is a union-find
over slice components whose roots are the smallest component number, which
keeps the result independent of processing order. Instances smaller than the
volume threshold are dropped and ids are handed out in (label, first voxel)
order, starting from 1.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import LESION_LABELS, ClassLabel, VoxelGrid, check_spacing, lesion_voxels, voxel_volume_cm3
from .detection import Detection, DetectionSet
from .errors import GeometryError

DEFAULT_MIN_VOLUME_CM3 = 0.5

# 8-connected within a slice, nothing across slices
_IN_PLANE = np.zeros((3, 3, 3), dtype=bool)
_IN_PLANE[1] = True


class UnionFind:
    """Disjoint sets over 0..n-1; the root of a set is always its smallest member."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, a: int) -> int:
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return int(root)

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return
        if ra < rb:
            self.parent[rb] = ra
        else:
            self.parent[ra] = rb

    def roots(self) -> np.ndarray:
        return np.array([self.find(i) for i in range(len(self.parent))], dtype=np.int64)


def slice_components(binary: np.ndarray) -> tuple[np.ndarray, int]:
    """Per-slice 8-connected labeling; numbers are unique across the whole volume."""
    labels, n = ndimage.label(binary, structure=_IN_PLANE)
    return labels, n


def merge_across_slices(labels: np.ndarray, n: int) -> np.ndarray:
    """Map each slice component (1..n) to its merged 3D instance root.

    Returns an array ``lut`` of length n+1 with ``lut[0] == 0``.
    """
    uf = UnionFind(n + 1)
    if labels.shape[0] > 1:
        lower, upper = labels[:-1], labels[1:]
        touching = (lower > 0) & (upper > 0)
        if touching.any():
            pairs = np.unique(np.stack([lower[touching], upper[touching]], axis=1), axis=0)
            for a, b in pairs:
                uf.union(int(a), int(b))
    return uf.roots()


def _instances_for_class(lesion_region: np.ndarray) -> list[np.ndarray]:
    """Flat indices (relative to ``lesion_region``) of each instance, sorted."""
    labels, n = slice_components(lesion_region)
    if n == 0:
        return []
    lut = merge_across_slices(labels, n)
    flat = labels.ravel()
    where = np.flatnonzero(flat)
    roots = lut[flat[where]]
    order = np.argsort(roots, kind="stable")
    roots_sorted = roots[order]
    cuts = np.flatnonzero(np.diff(roots_sorted)) + 1
    return np.split(where[order], cuts)


def _as_labels(mask, spacing) -> tuple[np.ndarray, tuple[float, float, float]]:
    if isinstance(mask, VoxelGrid):
        if spacing is not None and check_spacing(spacing) != mask.spacing:
            raise GeometryError(f"spacing {tuple(spacing)} disagrees with mask spacing {mask.spacing}")
        return mask.data, mask.spacing
    data = np.asarray(mask)
    if data.ndim != 3:
        raise GeometryError(f"label mask must be 3D, got shape {data.shape}")
    if spacing is None:
        raise GeometryError("spacing is required for a bare array mask")
    return data, check_spacing(spacing)


def extract_lesions(
    mask,
    spacing: Sequence[float] | None = None,
    min_volume_cm3: float = DEFAULT_MIN_VOLUME_CM3,
    case_id: str = "",
) -> DetectionSet:
    """Lesion instances of a label mask (``VoxelGrid`` or array plus spacing)."""
    labels, spacing = _as_labels(mask, spacing)
    dims = tuple(int(d) for d in labels.shape)
    vv = voxel_volume_cm3(spacing)
    any_lesion = lesion_voxels(labels)
    found: list[tuple[int, int, np.ndarray]] = []
    if any_lesion.any():
        # work inside the bounding box of all lesion voxels
        nz = [np.flatnonzero(any_lesion.any(axis=tuple(a for a in range(3) if a != ax))) for ax in range(3)]
        lo = [int(v[0]) for v in nz]
        hi = [int(v[-1]) + 1 for v in nz]
        crop = labels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        cdims = crop.shape
        for code in LESION_LABELS:
            region = crop == code
            if not region.any():
                continue
            for local in _instances_for_class(region):
                if local.size * vv < min_volume_cm3:
                    continue
                cz, cy, cx = np.unravel_index(local, cdims)
                idx = np.ravel_multi_index((cz + lo[0], cy + lo[1], cx + lo[2]), dims).astype(np.int64)
                found.append((int(code), int(idx[0]), idx))
    found.sort(key=lambda t: (t[0], t[1]))
    dets = tuple(
        Detection.from_indices(i + 1, code, idx, dims, spacing) for i, (code, _, idx) in enumerate(found)
    )
    return DetectionSet(case_id, dims, spacing, dets)


def extract_liver_mask(mask) -> np.ndarray:
    """Binary (uint8) grid of voxels labeled liver; lesion voxels are not included."""
    labels = mask.data if isinstance(mask, VoxelGrid) else np.asarray(mask)
    return (labels == ClassLabel.LIVER).astype(np.uint8)


__all__ = ["Detection", "DetectionSet", "extract_lesions", "extract_liver_mask", "UnionFind"]
