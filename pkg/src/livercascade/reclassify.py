"""Second-stage filtering of detections with a patch segmenter.

Each detection is scored by segmenting ``n_patches`` inference patches (orig-pos
and shuf-pos alternating) and averaging the volume, in cm^3, where the binarized
prediction overlaps the patch's reference lesion mask. Low scores are dropped;
survivors may be relabeled by a volume vote over the same predictions.
Detections above ``skip_volume_cm3`` bypass the stage.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .core import LESION_LABELS, ClassLabel, VoxelGrid, priority_max, voxel_volume_cm3
from .detection import Detection, DetectionSet
from .errors import CascadeError, ContractViolation, InputError
from .shuffle import Patch, ShuffleCase, ShuffleConfig, make_inference_patches, write_patch_bundle

log = logging.getLogger(__name__)

FLAG_FAILED = "reclassify-failed"
FLAG_FALLBACK = "transplant-fallback"
FLAG_RELABELED = "relabeled"


@runtime_checkable
class PatchSegmenter(Protocol):
    """Maps a patch to a label grid of the patch dims with values 0-6.

    ``reentrant`` tells the engine whether ``segment`` may run concurrently.
    """

    reentrant: bool

    def segment(self, patch: Patch) -> np.ndarray: ...


@dataclass(frozen=True)
class ReclassifyConfig:
    n_patches: int = 10
    discard_threshold_cm3: float = 0.5
    skip_volume_cm3: float = 64.0
    relabel_voting: bool = True
    # False restricts inference patches to orig-pos (no lesion shuffle)
    shuffle: bool = True
    patch: ShuffleConfig = field(default_factory=ShuffleConfig)

    def __post_init__(self):
        if self.n_patches < 1:
            raise ValueError(f"n_patches must be >= 1, got {self.n_patches}")
        if not self.discard_threshold_cm3 > 0 or not self.skip_volume_cm3 > 0:
            raise ValueError("thresholds must be positive")


def _checked_prediction(pred, patch: Patch) -> np.ndarray:
    pred = np.asarray(pred)
    if pred.shape != patch.dims:
        raise ContractViolation(f"segmenter returned dims {pred.shape}, patch dims are {patch.dims}")
    if pred.size and (pred.min() < 0 or pred.max() > 6):
        raise ContractViolation(
            f"segmenter returned labels outside 0-6 (range {int(pred.min())}..{int(pred.max())})"
        )
    return pred


def predict_patches(patches: Sequence[Patch], segmenter: PatchSegmenter, lock: threading.Lock | None = None) -> list[np.ndarray]:
    out = []
    for p in patches:
        if lock is None:
            pred = segmenter.segment(p)
        else:
            with lock:
                pred = segmenter.segment(p)
        out.append(_checked_prediction(pred, p))
    return out


def patch_overlaps_cm3(patches: Sequence[Patch], predictions: Sequence[np.ndarray]) -> list[float]:
    """Binarized overlap volume between each reference mask and its prediction."""
    vals = []
    for p, pred in zip(patches, predictions):
        vv = voxel_volume_cm3(p.spacing)
        vals.append(int(np.count_nonzero((p.mask > 0) & (pred > 0))) * vv)
    return vals


def score_lesion(
    lesion: Detection,
    case: ShuffleCase,
    segmenter: PatchSegmenter,
    cfg: ReclassifyConfig = ReclassifyConfig(),
    seed: int = 0,
) -> float:
    patches = make_inference_patches(lesion, case, cfg.n_patches, seed, cfg.shuffle, cfg.patch)
    preds = predict_patches(patches, segmenter)
    return float(np.mean(patch_overlaps_cm3(patches, preds)))


def relabel_vote(lesion: Detection, patches: Sequence[Patch], predictions: Sequence[np.ndarray]) -> ClassLabel:
    """Lesion class with the largest predicted volume inside the reference masks.

    Ties go to the higher-priority class; no predicted lesion voxel at all
    keeps the current label.
    """
    totals = dict.fromkeys(LESION_LABELS, 0.0)
    for p, pred in zip(patches, predictions):
        ref = p.mask > 0
        vv = voxel_volume_cm3(p.spacing)
        hits = pred[ref]
        counts = np.bincount(hits.astype(np.int64), minlength=7)
        for c in LESION_LABELS:
            totals[c] += int(counts[c]) * vv
    best = max(totals.values())
    if best == 0.0:
        return lesion.label
    return priority_max(c for c, v in totals.items() if v == best)


def _process(
    lesion: Detection,
    case: ShuffleCase,
    segmenter: PatchSegmenter,
    cfg: ReclassifyConfig,
    seed: int,
    lock: threading.Lock | None,
) -> Detection | None:
    if lesion.volume_cm3 > cfg.skip_volume_cm3:
        return lesion
    try:
        patches = make_inference_patches(lesion, case, cfg.n_patches, seed, cfg.shuffle, cfg.patch)
        preds = predict_patches(patches, segmenter, lock)
    except ContractViolation:
        raise
    except CascadeError as exc:
        log.warning("case %s lesion %d: scoring failed, kept: %s", case.case_id, lesion.id, exc)
        return lesion.with_changes(flags=lesion.flags + (f"{FLAG_FAILED}:{type(exc).__name__}",))
    score = float(np.mean(patch_overlaps_cm3(patches, preds)))
    if score < cfg.discard_threshold_cm3:
        return None
    flags = lesion.flags
    if any(p.fallback for p in patches):
        log.info("case %s lesion %d: no transplant placement, orig-pos patches used", case.case_id, lesion.id)
        flags += (FLAG_FALLBACK,)
    label = lesion.label
    if cfg.relabel_voting:
        label = relabel_vote(lesion, patches, preds)
        if label != lesion.label:
            flags += (f"{FLAG_RELABELED}:{lesion.label.short_name}",)
    return lesion.with_changes(score_cm3=score, label=label, flags=flags)


def reclassify_set(
    dets: DetectionSet,
    case: ShuffleCase,
    segmenter: PatchSegmenter,
    cfg: ReclassifyConfig = ReclassifyConfig(),
    seed: int = 0,
    jobs: int = 1,
) -> DetectionSet:
    """Score, filter and relabel every detection of ``dets``.

    ``case`` supplies the images and the reference label mask the patches are
    cut from (normally the predicted mask the detections came from). Scoring
    failures keep the detection with a ``reclassify-failed`` flag; segmenter
    contract violations propagate. Ids are kept.
    """
    if case.dims != dets.dims:
        raise InputError(f"case dims {case.dims} differ from detection dims {dets.dims}")
    lock = None if getattr(segmenter, "reentrant", False) else threading.Lock()
    pending = list(dets)
    if jobs > 1 and len(pending) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda d: _process(d, case, segmenter, cfg, seed, lock), pending))
    else:
        results = [_process(d, case, segmenter, cfg, seed, lock) for d in pending]
    return dets.with_detections(d for d in results if d is not None)


class ExecSegmenter:
    """Runs an external command once per patch.

    The patch is written as a bundle (``write_patch_bundle``) into a fresh
    temporary directory, the command is called with that directory as its last
    argument, and must leave ``pred_mask.nii.gz`` there. A nonzero exit status,
    a missing or malformed prediction is a contract violation.
    """

    def __init__(self, command: str, timeout: float | None = None, reentrant: bool = False):
        self.argv = shlex.split(command)
        if not self.argv:
            raise ValueError("empty segmenter command")
        self.timeout = timeout
        self.reentrant = reentrant

    def segment(self, patch: Patch) -> np.ndarray:
        from .volio.nifti import read_volume

        with tempfile.TemporaryDirectory(prefix="lc-patch-") as tmp:
            write_patch_bundle([patch], tmp)
            try:
                proc = subprocess.run(
                    self.argv + [tmp], capture_output=True, text=True, timeout=self.timeout, check=False
                )
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ContractViolation(f"segmenter command failed to run: {exc}") from exc
            if proc.returncode != 0:
                raise ContractViolation(
                    f"segmenter exited with status {proc.returncode}: {proc.stderr.strip()[-500:]}"
                )
            out = Path(tmp) / "pred_mask.nii.gz"
            if not out.exists():
                raise ContractViolation("segmenter did not write pred_mask.nii.gz")
            try:
                grid = read_volume(out)
            except CascadeError as exc:
                raise ContractViolation(f"unreadable pred_mask.nii.gz: {exc}") from exc
            return np.array(grid.data, dtype=np.uint8) if grid.data.dtype != np.uint8 else np.array(grid.data)


SEGMENTER_CHOICES = "mock:truth | mock:null | mock:noisy:<p> | exec:<cmd>"


def make_segmenter(selector: str, gt: VoxelGrid | np.ndarray | None = None, seed: int = 0) -> PatchSegmenter:
    """Build a segmenter from a selector string (see ``SEGMENTER_CHOICES``)."""
    from .phantom import NoisySegmenter, NullSegmenter, TruthSegmenter

    if selector == "mock:null":
        return NullSegmenter()
    if selector == "mock:truth" or selector.startswith("mock:noisy:"):
        if gt is None:
            raise InputError(f"segmenter {selector} needs a ground-truth mask")
        if selector == "mock:truth":
            return TruthSegmenter(gt)
        try:
            p = float(selector.split(":", 2)[2])
        except ValueError as exc:
            raise InputError(f"bad drop probability in {selector!r}") from exc
        if not 0.0 <= p <= 1.0:
            raise InputError(f"drop probability must lie in [0, 1], got {p}")
        return NoisySegmenter(gt, p, seed)
    if selector.startswith("exec:") and selector[5:].strip():
        return ExecSegmenter(selector[5:])
    raise InputError(f"unknown segmenter {selector!r}; expected {SEGMENTER_CHOICES}")
