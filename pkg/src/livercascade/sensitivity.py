"""Label masks from probability maps at a chosen lesion sensitivity.

Lesion channels 1-6 are multiplied by a single factor ``f`` before the
per-voxel argmax. Nothing is renormalized afterwards; argmax does not need it.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .core import ProbMaps, VoxelGrid
from .errors import InvalidFactorError

LESION_CHANNELS = slice(1, 7)
# z-slabs processed per step by masks_at_sensitivities; bounds temporary memory
_SLAB_VOXELS = 1 << 21


def check_factor(f: float) -> float:
    try:
        f = float(f)
    except (TypeError, ValueError) as exc:
        raise InvalidFactorError(f"sensitivity factor must be a number, got {f!r}") from exc
    if not math.isfinite(f) or f <= 0:
        raise InvalidFactorError(f"sensitivity factor must be finite and > 0, got {f}")
    return f


def scale_lesion_channels(prob: ProbMaps, f: float) -> ProbMaps:
    f = check_factor(f)
    data = prob.data.copy()
    if f != 1.0:
        data[LESION_CHANNELS] *= np.float32(f)
    return ProbMaps(data, prob.spacing)


def _argmax_labels(channels: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest channel index on ties
    return np.argmax(channels, axis=0).astype(np.uint8)


def argmax_mask(prob: ProbMaps) -> VoxelGrid:
    return VoxelGrid(_argmax_labels(prob.data), prob.spacing)


def _scaled_argmax(data: np.ndarray, f: float) -> np.ndarray:
    Z = data.shape[1]
    per_slice = int(np.prod(data.shape[2:]))
    step = max(1, _SLAB_VOXELS // max(per_slice, 1))
    out = np.empty(data.shape[1:], dtype=np.uint8)
    scale = np.ones((data.shape[0], 1, 1, 1), dtype=np.float32)
    scale[LESION_CHANNELS] = np.float32(f)
    for z0 in range(0, Z, step):
        slab = data[:, z0:z0 + step]
        if f != 1.0:
            slab = slab * scale
        out[z0:z0 + step] = _argmax_labels(slab)
    return out


def sensitivity_mask(prob: ProbMaps, f: float) -> VoxelGrid:
    """``argmax_mask(scale_lesion_channels(prob, f))`` without materializing the scaled maps."""
    f = check_factor(f)
    return VoxelGrid(_scaled_argmax(prob.data, f), prob.spacing)


def masks_at_sensitivities(prob: ProbMaps, factors: Sequence[float]) -> list[tuple[float, VoxelGrid]]:
    if len(factors) == 0:
        raise InvalidFactorError("at least one sensitivity factor is required")
    checked = [check_factor(f) for f in factors]
    return [(f, sensitivity_mask(prob, f)) for f in checked]
