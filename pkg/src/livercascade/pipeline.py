"""Whole-case cascade: probability maps to patient-level decision.

Per case: sensitivity masks at every factor, instance extraction, optional
reclassification, common/difference sets between the lowest and highest
factor, and patient classification per variant plus the joint decision.

Variant names: the lowest factor is ``Base``, the highest ``High``, anything
in between ``f=<value>``; reclassified sets get a ``+ReCls`` suffix.
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import ProbMaps, VoxelGrid
from .detection import DetectionSet
from .errors import CascadeError, GeometryError, InputError
from .matcher import MatchReport, match_predictions, match_sets
from .metrics import (
    MODES,
    EvalReport,
    PatientClassification,
    classify_patient,
    joint_classify,
    lesion_metrics,
    merge_strata,
    patient_metrics,
    stratify_by_volume,
)
from .reclassify import ReclassifyConfig, make_segmenter, reclassify_set
from .sensitivity import check_factor, sensitivity_mask
from .seg2det import DEFAULT_MIN_VOLUME_CM3, extract_lesions
from .shuffle import ShuffleCase
from .volio.detjson import write_detections
from .volio.manifest import CaseManifest, read_manifest
from .volio.nifti import read_probmaps, read_volume

log = logging.getLogger(__name__)

SPACING_RTOL = 1e-4


@dataclass(frozen=True)
class PipelineConfig:
    factors: tuple[float, ...] = (1.0, 4.0)
    min_volume_cm3: float = DEFAULT_MIN_VOLUME_CM3
    reclassify: ReclassifyConfig = field(default_factory=ReclassifyConfig)
    enable_reclassify: bool = True
    enable_shuffle_in_reclassify: bool = True
    segmenter: str = "mock:truth"
    seed: int = 0

    def __post_init__(self):
        if not self.factors:
            raise InputError("at least one sensitivity factor is required")
        object.__setattr__(self, "factors", tuple(sorted({check_factor(f) for f in self.factors})))

    @property
    def reclassify_config(self) -> ReclassifyConfig:
        from dataclasses import replace

        return replace(self.reclassify, shuffle=self.reclassify.shuffle and self.enable_shuffle_in_reclassify)


class StageError(CascadeError):
    """An error raised inside one pipeline stage; ``cause`` keeps the original."""

    def __init__(self, case_id: str, stage: str, cause: BaseException):
        super().__init__(f"case {case_id}: stage {stage}: {type(cause).__name__}: {cause}")
        self.case_id = case_id
        self.stage = stage
        self.cause = cause


@dataclass(eq=False)
class CaseData:
    case_id: str
    images: dict[str, VoxelGrid]
    prob: ProbMaps | None = None
    gt: VoxelGrid | None = None

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.images["NC"].dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.images["NC"].spacing

    def check_geometry(self) -> None:
        ref = self.images["NC"]
        grids: list[tuple[str, Any]] = [(f"phase {k}", g) for k, g in self.images.items()]
        if self.prob is not None:
            grids.append(("prob", self.prob))
        if self.gt is not None:
            grids.append(("gt_mask", self.gt))
        for name, g in grids:
            if g.dims != ref.dims:
                raise GeometryError(f"{name} dims {g.dims} differ from NC dims {ref.dims}")
            if not np.allclose(g.spacing, ref.spacing, rtol=SPACING_RTOL, atol=0):
                raise GeometryError(f"{name} spacing {g.spacing} differs from NC spacing {ref.spacing}")


def load_case(manifest: CaseManifest | str | os.PathLike) -> CaseData:
    """Read every file of a manifest; a manifest spacing overrides file headers."""
    if not isinstance(manifest, CaseManifest):
        manifest = read_manifest(manifest)
    images = {k: read_volume(manifest.resolve(p)) for k, p in manifest.phase_paths.items()}
    prob = read_probmaps(manifest.resolve(manifest.prob_path)) if manifest.prob_path else None
    gt = read_volume(manifest.resolve(manifest.gt_mask_path)) if manifest.gt_mask_path else None
    if manifest.spacing is not None:
        sp = manifest.spacing
        images = {k: VoxelGrid(g.data, sp) for k, g in images.items()}
        prob = ProbMaps(prob.data, sp) if prob is not None else None
        gt = VoxelGrid(gt.data, sp) if gt is not None else None
    case = CaseData(manifest.case_id, images, prob, gt)
    case.check_geometry()
    return case


def as_case_data(case) -> CaseData:
    if isinstance(case, CaseData):
        return case
    if isinstance(case, (CaseManifest, str, os.PathLike)):
        return load_case(case)
    # PhantomCase and anything shaped like it
    return CaseData(case.case_id, dict(case.images), case.prob, case.gt)


def variant_names(factors: Sequence[float]) -> dict[float, str]:
    lo, hi = min(factors), max(factors)
    out = {}
    for f in factors:
        out[f] = "Base" if f == lo else "High" if f == hi else f"f={f:g}"
    return out


@dataclass(eq=False)
class CaseResult:
    case_id: str
    raw: dict[str, DetectionSet] = field(default_factory=dict)
    reclassified: dict[str, DetectionSet] = field(default_factory=dict)
    same: DetectionSet | None = None
    diff: DetectionSet | None = None
    patient: dict[str, PatientClassification] = field(default_factory=dict)
    joint: PatientClassification | None = None
    joint_variants: tuple[str, str] | None = None
    gt: DetectionSet | None = None
    gt_patient: PatientClassification | None = None
    reports: dict[str, MatchReport] = field(default_factory=dict)

    def final_sets(self) -> dict[str, DetectionSet]:
        """Every detection set, keyed by variant name."""
        return {**self.raw, **self.reclassified}

    def summary(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "case_id": self.case_id,
            "variants": {k: len(v) for k, v in self.final_sets().items()},
            "patient": {k: v.value for k, v in self.patient.items()},
            "joint": self.joint.value if self.joint else None,
            "joint_of": list(self.joint_variants) if self.joint_variants else None,
        }
        if self.same is not None:
            out["same_count"] = len(self.same)
            out["diff_count"] = len(self.diff)
        if self.gt is not None:
            out["gt_count"] = len(self.gt)
            out["gt_patient"] = self.gt_patient.value
            out["match"] = {k: r.to_dict() for k, r in self.reports.items()}
        return out


def _stage(case_id: str, stage: str, fn, /, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (CascadeError, ValueError, OSError) as exc:
        raise StageError(case_id, stage, exc) from exc


def _masks(case: CaseData, config: PipelineConfig):
    if case.prob is not None:
        return {f: sensitivity_mask(case.prob, f) for f in config.factors}
    if case.gt is not None:
        # oracle-only run: the ground truth stands in for the argmax at every factor
        return {f: case.gt for f in config.factors}
    raise InputError("case has neither probability maps nor a ground-truth mask")


def run_case(case, config: PipelineConfig = PipelineConfig(), jobs: int = 1) -> CaseResult:
    """Run the cascade on one case (``CaseData``, manifest, manifest path or phantom)."""
    case_id = getattr(case, "case_id", str(case))
    case = _stage(case_id, "load", as_case_data, case)
    case_id = case.case_id
    _stage(case_id, "load", case.check_geometry)
    names = variant_names(config.factors)
    res = CaseResult(case_id)

    masks = _stage(case_id, "sensitivity", _masks, case, config)
    for f, mask in masks.items():
        res.raw[names[f]] = _stage(
            case_id, "seg2det", extract_lesions, mask, min_volume_cm3=config.min_volume_cm3, case_id=case_id
        )

    final = {f: res.raw[names[f]] for f in config.factors}
    if config.enable_reclassify:
        seg = _stage(case_id, "segmenter", make_segmenter, config.segmenter, case.gt, config.seed)
        for f, mask in masks.items():
            sc = _stage(case_id, "reclassify", ShuffleCase, case_id, case.images, mask)
            recl = _stage(
                case_id, "reclassify", reclassify_set,
                res.raw[names[f]], sc, seg, config.reclassify_config, config.seed, jobs,
            )
            res.reclassified[names[f] + "+ReCls"] = recl
            final[f] = recl
    suffix = "+ReCls" if config.enable_reclassify else ""

    for name, dets in res.final_sets().items():
        res.patient[name] = classify_patient(dets)
    lo, hi = config.factors[0], config.factors[-1]
    a, b = names[lo] + suffix, names[hi] + suffix
    if lo != hi:
        res.same, res.diff = _stage(case_id, "match", match_predictions, final[lo], final[hi])
        res.joint_variants = (a, b)
        res.joint = joint_classify(res.patient[a], res.patient[b])
    else:
        res.joint_variants = (a, a)
        res.joint = res.patient[a]

    if case.gt is not None:
        res.gt = _stage(case_id, "seg2det", extract_lesions, case.gt, min_volume_cm3=config.min_volume_cm3, case_id=case_id)
        res.gt_patient = classify_patient(res.gt)
        for name, dets in res.final_sets().items():
            res.reports[name] = _stage(case_id, "match", match_sets, res.gt, dets)
    return res


@dataclass
class CaseFailure:
    case_id: str
    stage: str
    error: str
    cause: BaseException | None = None

    def to_dict(self) -> dict[str, str]:
        return {"case_id": self.case_id, "stage": self.stage, "error": self.error}


@dataclass
class CohortResult:
    results: list[CaseResult]
    failures: list[CaseFailure]


def run_cohort(cases: Sequence, config: PipelineConfig = PipelineConfig(), jobs: int = 1) -> CohortResult:
    """Run every case; failures are recorded and the batch continues.

    Up to ``jobs`` cases run concurrently; leftover workers go to lesion
    scoring within each case. Result order follows input order.
    """
    jobs = max(1, int(jobs))
    n_case_workers = max(1, min(jobs, len(cases)))
    lesion_jobs = max(1, jobs // n_case_workers)

    def one(case):
        try:
            return run_case(case, config, lesion_jobs)
        except StageError as exc:
            log.error("%s", exc)
            return CaseFailure(exc.case_id, exc.stage, f"{type(exc.cause).__name__}: {exc.cause}", exc.cause)

    if n_case_workers > 1:
        with ThreadPoolExecutor(max_workers=n_case_workers) as pool:
            outs = list(pool.map(one, cases))
    else:
        outs = [one(c) for c in cases]
    return CohortResult(
        [o for o in outs if isinstance(o, CaseResult)],
        [o for o in outs if isinstance(o, CaseFailure)],
    )


def evaluate_cohort(results: Sequence[CaseResult], failures: Sequence[CaseFailure] = ()) -> EvalReport:
    """Lesion and patient metrics for every variant over the cases with ground truth.

    Also reports the highest-factor final variant restricted to the cases
    where the joint decision is not Uncertain (``<variant>@consensus``).
    """
    scored = [r for r in results if r.gt is not None]
    rep = EvalReport(n_cases=len(scored))
    if not scored:
        rep.notes.append("no case with a ground-truth mask; nothing to evaluate")
    else:
        gts = [r.gt_patient for r in scored]
        for name in scored[0].final_sets():
            reports = [r.reports[name] for r in scored]
            rep.lesion[name] = {m: lesion_metrics(reports, m) for m in MODES}
            rep.patient[name] = patient_metrics([r.patient[name] for r in scored], gts)
        a, b = scored[0].joint_variants
        if a != b:
            consensus = [r for r in scored if r.joint != PatientClassification.UNCERTAIN]
            rep.lesion[f"{b}@consensus"] = {m: lesion_metrics([r.reports[b] for r in consensus], m) for m in MODES}
            joint = [r.joint for r in scored]
            rep.patient["Joint"] = patient_metrics(joint, gts, exclude_uncertain=True)
            rep.patient["Joint(uncertain=error)"] = patient_metrics(joint, gts, exclude_uncertain=False)
        rep.stratification = merge_strata(stratify_by_volume(r.gt) for r in scored)
    for f in failures:
        rep.notes.append(f"case {f.case_id} failed at stage {f.stage}: {f.error}")
    return rep


def _file_stem(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9=.-]+", "_", name)


def write_case_outputs(result: CaseResult, out_dir) -> list[Path]:
    """Detection JSON per variant, same/diff sets and a summary JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    sets = dict(result.final_sets())
    if result.same is not None:
        sets["same"] = result.same
        sets["diff"] = result.diff
    for name, dets in sets.items():
        path = out_dir / f"{result.case_id}_{_file_stem(name)}.json"
        write_detections(dets, path)
        written.append(path)
    path = out_dir / f"{result.case_id}_summary.json"
    path.write_text(json.dumps(result.summary(), indent=1, sort_keys=True) + "\n")
    written.append(path)
    return written


def write_cohort_outputs(cohort: CohortResult, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in cohort.results:
        write_case_outputs(r, out_dir)
    paths = {}
    if cohort.failures:
        paths["failures"] = out_dir / "failures.json"
        paths["failures"].write_text(json.dumps([f.to_dict() for f in cohort.failures], indent=1) + "\n")
    if any(r.gt is not None for r in cohort.results):
        rep = evaluate_cohort(cohort.results, cohort.failures)
        paths["report"] = out_dir / "eval_report.json"
        paths["report"].write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
        paths["report_text"] = out_dir / "eval_report.txt"
        paths["report_text"].write_text(rep.to_text())
    return paths
