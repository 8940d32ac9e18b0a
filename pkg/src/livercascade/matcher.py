"""Pairing of two detection sets into TP / FL / FP / FN outcomes.

Candidates are all (gt, pred) pairs sharing at least ``min_overlap_voxels``
voxels. They are taken greedily in descending intersection size (ties: smaller
gt id, then smaller pred id), each instance at most once. Same-label pairs are
true positives, different-label pairs are false labels, and whatever is left
over becomes FN (gt side) or FP (pred side).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .core import LESION_LABELS, ClassLabel, voxel_volume_cm3
from .detection import Detection, DetectionSet


@dataclass(frozen=True)
class MatchPair:
    gt_id: int
    pred_id: int
    intersection_voxels: int
    intersection_cm3: float
    same_label: bool
    gt_label: ClassLabel
    pred_label: ClassLabel


@dataclass(frozen=True)
class ClassTally:
    TP: int = 0
    FN: int = 0
    FP: int = 0
    FL_gt: int = 0
    FL_pred: int = 0

    def __add__(self, other: "ClassTally") -> "ClassTally":
        return ClassTally(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    def as_tuple(self) -> tuple[int, int, int, int, int]:
        return self.TP, self.FN, self.FP, self.FL_gt, self.FL_pred


@dataclass(frozen=True)
class MatchReport:
    case_id: str
    pairs: tuple[MatchPair, ...]
    unmatched_gt: tuple[int, ...]
    unmatched_pred: tuple[int, ...]
    gt_labels: dict[int, ClassLabel] = field(default_factory=dict)
    pred_labels: dict[int, ClassLabel] = field(default_factory=dict)

    def tally(self, label: int) -> ClassTally:
        return self.tally_group({int(label)})

    def tally_group(self, codes: set[int]) -> ClassTally:
        """Counts for a group of labels treated as one class.

        A pair whose both sides fall in the group counts as TP even when the
        exact subtypes differ; this is how malignant lesions are aggregated.
        """
        tp = fl_gt = fl_pred = 0
        for p in self.pairs:
            g, q = int(p.gt_label) in codes, int(p.pred_label) in codes
            if g and q:
                tp += 1
            elif g:
                fl_gt += 1
            elif q:
                fl_pred += 1
        fn = sum(1 for i in self.unmatched_gt if int(self.gt_labels[i]) in codes)
        fp = sum(1 for i in self.unmatched_pred if int(self.pred_labels[i]) in codes)
        return ClassTally(TP=tp, FN=fn, FP=fp, FL_gt=fl_gt, FL_pred=fl_pred)

    def per_class(self) -> dict[ClassLabel, ClassTally]:
        return {c: self.tally(c) for c in LESION_LABELS}

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "pairs": [
                {
                    "gt_id": p.gt_id,
                    "pred_id": p.pred_id,
                    "intersection_voxels": p.intersection_voxels,
                    "intersection_cm3": p.intersection_cm3,
                    "same_label": p.same_label,
                    "gt_label": int(p.gt_label),
                    "pred_label": int(p.pred_label),
                }
                for p in self.pairs
            ],
            "unmatched_gt": list(self.unmatched_gt),
            "unmatched_pred": list(self.unmatched_pred),
            "per_class": {
                c.short_name: dict(zip(("TP", "FN", "FP", "FL_gt", "FL_pred"), t.as_tuple()))
                for c, t in self.per_class().items()
            },
        }


def _boxes_touch(a: Detection, b: Detection) -> bool:
    return all(a.bbox[i] <= b.bbox[i + 3] and b.bbox[i] <= a.bbox[i + 3] for i in range(3))


def intersection_voxels(a: Detection, b: Detection) -> int:
    if not _boxes_touch(a, b):
        return 0
    ia, ib = a.indices, b.indices
    if ia.size > ib.size:
        ia, ib = ib, ia
    pos = np.searchsorted(ib, ia)
    pos[pos == ib.size] = ib.size - 1 if ib.size else 0
    return int(np.count_nonzero(ib[pos] == ia)) if ib.size else 0


def candidate_pairs(gt: DetectionSet, pred: DetectionSet, min_overlap_voxels: int = 1) -> list[tuple[int, int, int]]:
    """All (overlap, gt_id, pred_id) with overlap >= the threshold, unsorted."""
    out = []
    for g in gt:
        for p in pred:
            n = intersection_voxels(g, p)
            if n >= max(1, min_overlap_voxels):
                out.append((n, g.id, p.id))
    return out


def greedy_assignment(candidates: list[tuple[int, int, int]]) -> list[tuple[int, int, int]]:
    used_gt: set[int] = set()
    used_pred: set[int] = set()
    chosen = []
    for n, g, p in sorted(candidates, key=lambda c: (-c[0], c[1], c[2])):
        if g in used_gt or p in used_pred:
            continue
        used_gt.add(g)
        used_pred.add(p)
        chosen.append((n, g, p))
    return chosen


def match_sets(gt: DetectionSet, pred: DetectionSet, min_overlap_voxels: int = 1) -> MatchReport:
    gt.check_compatible(pred)
    vv = voxel_volume_cm3(gt.spacing)
    glab = {d.id: d.label for d in gt}
    plab = {d.id: d.label for d in pred}
    chosen = greedy_assignment(candidate_pairs(gt, pred, min_overlap_voxels))
    pairs = tuple(
        MatchPair(g, p, n, n * vv, glab[g] == plab[p], glab[g], plab[p])
        for n, g, p in sorted(chosen, key=lambda c: (c[1], c[2]))
    )
    paired_gt = {p.gt_id for p in pairs}
    paired_pred = {p.pred_id for p in pairs}
    return MatchReport(
        case_id=gt.case_id,
        pairs=pairs,
        unmatched_gt=tuple(sorted(i for i in glab if i not in paired_gt)),
        unmatched_pred=tuple(sorted(i for i in plab if i not in paired_pred)),
        gt_labels=glab,
        pred_labels=plab,
    )


def _renumber(dets: list[Detection]) -> list[Detection]:
    ordered = sorted(dets, key=lambda d: (int(d.label), int(d.indices[0])))
    return [d.with_changes(id=i + 1) for i, d in enumerate(ordered)]


def match_predictions(a: DetectionSet, b: DetectionSet) -> tuple[DetectionSet, DetectionSet]:
    """Split two prediction runs into a common set and a difference set.

    ``same`` holds the instances of ``a`` that pair with a same-label instance
    of ``b`` (ids kept). ``diff`` holds every instance of either run without a
    same-label partner; when an ``a`` and a ``b`` instance of the same label
    overlap inside ``diff``, only the ``b`` one (higher sensitivity) is kept.
    ``diff`` ids are renumbered in (label, first voxel) order.
    """
    report = match_sets(a, b)
    same_ids = {p.gt_id for p in report.pairs if p.same_label}
    b_same = {p.pred_id for p in report.pairs if p.same_label}
    same = a.with_detections(d for d in a if d.id in same_ids)
    diff_b = [d for d in b if d.id not in b_same]
    diff_a = [
        d
        for d in a
        if d.id not in same_ids
        and not any(d.label == e.label and intersection_voxels(d, e) > 0 for e in diff_b)
    ]
    diff = b.with_detections(_renumber(diff_a + diff_b))
    return same, diff
