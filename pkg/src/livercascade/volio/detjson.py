"""Detection-set JSON codec.

Schema::

    {"case_id": str, "dims": [Z, Y, X], "spacing_mm": [sz, sy, sx],
     "detections": [{"id": int, "label": 1-6, "voxel_count": int,
                     "volume_cm3": number, "bbox": [z0, y0, x0, z1, y1, x1],
                     "centroid": [z, y, x], "rle": [[start, len], ...],
                     "score_cm3": number | null, "flags": [str, ...]?}]}

``volume_cm3`` is written with six significant digits. On read it is checked
against ``voxel_count`` times the voxel volume (0.5% tolerance) and then
replaced by the recomputed value, so write/read round trips are exact.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any

import numpy as np

from ..core import ClassLabel, check_spacing, is_lesion_code
from ..detection import Detection, DetectionSet
from ..errors import BoundsError, GeometryError, IntegrityError, SchemaError
from .rle import RleMask

VOLUME_TOLERANCE = 0.005


def detection_to_dict(det: Detection) -> dict[str, Any]:
    out: dict[str, Any] = {
        "id": det.id,
        "label": int(det.label),
        "voxel_count": det.voxel_count,
        "volume_cm3": float(f"{det.volume_cm3:.6g}"),
        "bbox": list(det.bbox),
        "centroid": list(det.centroid),
        "rle": det.mask.to_list(),
        "score_cm3": det.score_cm3,
    }
    if det.flags:
        out["flags"] = list(det.flags)
    return out


def detections_to_dict(dets: DetectionSet) -> dict[str, Any]:
    return {
        "case_id": dets.case_id,
        "dims": list(dets.dims),
        "spacing_mm": list(dets.spacing),
        "detections": [detection_to_dict(d) for d in dets],
    }


def write_detections(dets: DetectionSet, path=None) -> str:
    """Serialize to a JSON string; also write it to ``path`` when given."""
    text = json.dumps(detections_to_dict(dets), indent=1)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def _req(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"expected an object, got {type(obj).__name__}", field=where)
    if key not in obj:
        raise SchemaError("missing required field", field=f"{where}.{key}" if where else key)
    return obj[key]


def _int(value, where: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"expected integer, got {value!r}", field=where)
    return value


def _num(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SchemaError(f"expected finite number, got {value!r}", field=where)
    return float(value)


def _int_list(value, n: int, where: str) -> list[int]:
    if not isinstance(value, list) or len(value) != n:
        raise SchemaError(f"expected list of {n} integers", field=where)
    return [_int(v, f"{where}[{i}]") for i, v in enumerate(value)]


def _detection_from_dict(obj: dict, dims, spacing, where: str) -> Detection:
    det_id = _int(_req(obj, "id", where), f"{where}.id")
    label = _int(_req(obj, "label", where), f"{where}.label")
    if not is_lesion_code(label):
        raise SchemaError(f"label {label} is not a lesion code 1-6", field=f"{where}.label")
    runs = _req(obj, "rle", where)
    if not isinstance(runs, list):
        raise SchemaError("expected list of [start, length] pairs", field=f"{where}.rle")
    pairs = [_int_list(r, 2, f"{where}.rle[{i}]") for i, r in enumerate(runs)]
    rle = RleMask(dims, np.array(pairs, dtype=np.int64).reshape(-1, 2))
    try:
        rle.validate()
    except BoundsError as exc:
        raise SchemaError(str(exc), field=f"{where}.rle") from exc
    if rle.voxel_count == 0:
        raise SchemaError("empty mask", field=f"{where}.rle")

    rebuilt = Detection.from_indices(det_id, label, rle.indices(), dims, spacing)
    voxel_count = _int(_req(obj, "voxel_count", where), f"{where}.voxel_count")
    if voxel_count != rebuilt.voxel_count:
        raise IntegrityError(
            f"voxel_count {voxel_count} but runs cover {rebuilt.voxel_count}", field=f"{where}.voxel_count"
        )
    volume = _num(_req(obj, "volume_cm3", where), f"{where}.volume_cm3")
    if abs(volume - rebuilt.volume_cm3) > VOLUME_TOLERANCE * rebuilt.volume_cm3:
        raise IntegrityError(
            f"volume_cm3 {volume} inconsistent with runs x spacing = {rebuilt.volume_cm3:.6g}",
            field=f"{where}.volume_cm3",
        )
    bbox = tuple(_int_list(_req(obj, "bbox", where), 6, f"{where}.bbox"))
    if bbox != rebuilt.bbox:
        raise IntegrityError(f"bbox {list(bbox)} is not the mask's tight box {list(rebuilt.bbox)}", field=f"{where}.bbox")
    cen = _req(obj, "centroid", where)
    if not isinstance(cen, list) or len(cen) != 3:
        raise SchemaError("expected [z, y, x]", field=f"{where}.centroid")
    centroid = tuple(_num(c, f"{where}.centroid[{i}]") for i, c in enumerate(cen))
    if max(abs(a - b) for a, b in zip(centroid, rebuilt.centroid)) > 1e-6:
        raise IntegrityError(f"centroid {list(centroid)} disagrees with mask", field=f"{where}.centroid")
    score = obj.get("score_cm3")
    if score is not None:
        score = _num(score, f"{where}.score_cm3")
    flags = obj.get("flags", [])
    if not isinstance(flags, list) or not all(isinstance(f, str) for f in flags):
        raise SchemaError("expected list of strings", field=f"{where}.flags")
    return rebuilt.with_changes(centroid=centroid, score_cm3=score, flags=tuple(flags), label=ClassLabel(label))


def detections_from_dict(obj: Any) -> DetectionSet:
    if not isinstance(obj, dict):
        raise SchemaError("top level must be an object", field="$")
    case_id = _req(obj, "case_id", "")
    if not isinstance(case_id, str):
        raise SchemaError("expected string", field="case_id")
    dims = tuple(_int_list(_req(obj, "dims", ""), 3, "dims"))
    if min(dims) <= 0:
        raise SchemaError(f"dims must be positive, got {list(dims)}", field="dims")
    sp = _req(obj, "spacing_mm", "")
    if not isinstance(sp, list) or len(sp) != 3:
        raise SchemaError("expected [sz, sy, sx]", field="spacing_mm")
    try:
        spacing = check_spacing([_num(s, f"spacing_mm[{i}]") for i, s in enumerate(sp)])
    except GeometryError as exc:
        raise SchemaError(str(exc), field="spacing_mm") from exc
    items = _req(obj, "detections", "")
    if not isinstance(items, list):
        raise SchemaError("expected a list", field="detections")
    dets = [_detection_from_dict(d, dims, spacing, f"detections[{i}]") for i, d in enumerate(items)]
    ids = [d.id for d in dets]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"duplicate detection ids {ids}", field="detections")
    return DetectionSet(case_id, dims, spacing, tuple(dets))


def read_detections(source) -> DetectionSet:
    """Parse from a path or a JSON string."""
    if isinstance(source, (str, Path)) and not str(source).lstrip().startswith("{"):
        text = Path(source).read_text()
    else:
        text = str(source)
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"invalid JSON: {exc}", field="$") from exc
    return detections_from_dict(obj)


__all__ = [
    "read_detections",
    "write_detections",
    "detections_to_dict",
    "detections_from_dict",
    "detection_to_dict",
]
