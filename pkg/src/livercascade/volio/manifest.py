"""Per-case manifest: which files make up one case."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..core import check_spacing
from ..errors import SchemaError

PHASES = ("NC", "AP", "VP", "DP")


@dataclass(frozen=True)
class CaseManifest:
    """Paths are stored as given; relative ones resolve against ``base_dir``."""

    case_id: str
    phase_paths: dict[str, str]
    prob_path: str | None = None
    gt_mask_path: str | None = None
    spacing: tuple[float, float, float] | None = None
    base_dir: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        if "NC" not in self.phase_paths:
            raise SchemaError("the NC phase is mandatory", field="phases.NC")
        unknown = set(self.phase_paths) - set(PHASES)
        if unknown:
            raise SchemaError(f"unknown phase tags {sorted(unknown)}", field="phases")
        if self.spacing is not None:
            object.__setattr__(self, "spacing", check_spacing(self.spacing))

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "case_id": self.case_id,
            "phases": {k: self.phase_paths[k] for k in PHASES if k in self.phase_paths},
            "prob": self.prob_path,
            "gt_mask": self.gt_mask_path,
        }
        if self.spacing is not None:
            out["spacing_mm"] = list(self.spacing)
        return out


def manifest_from_dict(obj: Any, base_dir: Path = Path(".")) -> CaseManifest:
    if not isinstance(obj, dict):
        raise SchemaError("manifest must be a JSON object", field="$")
    case_id = obj.get("case_id")
    if not isinstance(case_id, str) or not case_id:
        raise SchemaError("expected non-empty string", field="case_id")
    phases = obj.get("phases")
    if not isinstance(phases, dict) or not all(isinstance(v, str) for v in phases.values()):
        raise SchemaError("expected an object mapping phase tag to path", field="phases")
    for key in ("prob", "gt_mask"):
        if obj.get(key) is not None and not isinstance(obj[key], str):
            raise SchemaError("expected path string or null", field=key)
    spacing = obj.get("spacing_mm")
    if spacing is not None and (not isinstance(spacing, list) or len(spacing) != 3):
        raise SchemaError("expected [sz, sy, sx]", field="spacing_mm")
    return CaseManifest(
        case_id=case_id,
        phase_paths=dict(phases),
        prob_path=obj.get("prob"),
        gt_mask_path=obj.get("gt_mask"),
        spacing=tuple(spacing) if spacing is not None else None,
        base_dir=Path(base_dir),
    )


def read_manifest(path) -> CaseManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}", field="$") from exc
    return manifest_from_dict(obj, base_dir=path.parent)


def write_manifest(manifest: CaseManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")
