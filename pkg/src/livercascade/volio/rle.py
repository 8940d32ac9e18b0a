"""Run-length encoding of binary masks over C-order flat indices (X fastest)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import BoundsError, GeometryError


@dataclass(frozen=True, eq=False)
class RleMask:
    """Maximal runs ``(start, length)`` of ones, sorted by start.

    ``runs`` is an ``(n, 2)`` int64 array.
    """

    dims: tuple[int, int, int]
    runs: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise GeometryError(f"RLE dims must be three positive ints, got {self.dims}")
        runs = np.asarray(self.runs, dtype=np.int64).reshape(-1, 2)
        runs.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "runs", runs)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_count(self) -> int:
        return int(self.runs[:, 1].sum())

    def validate(self) -> None:
        """Raise ``BoundsError`` unless runs are sorted, maximal and in range."""
        starts, lengths = self.runs[:, 0], self.runs[:, 1]
        if len(starts) == 0:
            return
        if (lengths <= 0).any():
            raise BoundsError("run lengths must be positive")
        if starts[0] < 0 or int(starts[-1] + lengths[-1]) > self.size:
            raise BoundsError(f"run exceeds dims product {self.size}")
        ends = starts + lengths
        if (starts[1:] <= ends[:-1]).any():
            raise BoundsError("runs must be sorted, non-overlapping and non-adjacent")

    def indices(self) -> np.ndarray:
        """Sorted flat indices covered by the runs."""
        starts, lengths = self.runs[:, 0], self.runs[:, 1]
        if len(starts) == 0:
            return np.empty(0, dtype=np.int64)
        run_first = np.concatenate(([0], np.cumsum(lengths)[:-1]))
        return np.arange(int(lengths.sum()), dtype=np.int64) + np.repeat(starts - run_first, lengths)

    def to_list(self) -> list[list[int]]:
        return [[int(s), int(n)] for s, n in self.runs]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RleMask):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.runs, other.runs)

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def from_indices(cls, indices: np.ndarray, dims: Sequence[int]) -> "RleMask":
        """Runs from sorted, unique flat indices."""
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            return cls(tuple(dims), np.empty((0, 2), dtype=np.int64))
        breaks = np.flatnonzero(np.diff(idx) != 1) + 1
        starts = idx[np.concatenate(([0], breaks))]
        ends = idx[np.concatenate((breaks - 1, [idx.size - 1]))]
        return cls(tuple(dims), np.stack([starts, ends - starts + 1], axis=1))


def rle_encode(mask) -> RleMask:
    """Encode a {0, 1} grid (array or ``VoxelGrid``)."""
    data = np.asarray(getattr(mask, "data", mask))
    if data.ndim != 3:
        raise GeometryError(f"expected a 3D mask, got shape {data.shape}")
    flat = data.ravel(order="C")
    if flat.size and ((flat != 0) & (flat != 1)).any():
        raise ValueError("rle_encode input must contain only 0 and 1")
    return RleMask.from_indices(np.flatnonzero(flat), data.shape)


def rle_decode(rle: RleMask) -> np.ndarray:
    """Decode to a uint8 array of shape ``rle.dims``."""
    rle.validate()
    out = np.zeros(rle.size, dtype=np.uint8)
    out[rle.indices()] = 1
    return out.reshape(rle.dims)
