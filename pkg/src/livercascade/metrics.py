"""Lesion-level and patient-level evaluation.

Two metric modes are reported side by side:

* ``strict``  recall = TP / (TP + FN), precision = TP / (TP + FL_pred + FP)
* ``table``   recall = TP / (TP + FN + FL_gt), precision = TP / (TP + FP + FL_pred)

``recall_rough`` = (TP + FL_gt) / (TP + FN + FL_gt) counts a detection with the
wrong lesion type as found. A zero denominator gives ``None`` ("undefined").
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

from .core import LESION_LABELS, MALIGNANT, ClassLabel, priority_max
from .detection import DetectionSet
from .errors import ContractViolation
from .matcher import ClassTally, MatchReport

MODES = ("strict", "table")
VOLUME_BINS: tuple[tuple[float, float], ...] = ((0.5, 2), (2, 4), (4, 8), (8, 16), (16, 64), (64, math.inf))
BIN_NAMES = ("0.5-2", "2-4", "4-8", "8-16", "16-64", ">64")


def ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class LesionMetricsRow:
    name: str
    TP: int
    FN: int
    FP: int
    FL_gt: int
    FL_pred: int
    precision: float | None
    recall: float | None
    recall_rough: float | None
    mode: str = "table"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def metrics_row(name: str, t: ClassTally, mode: str = "table") -> LesionMetricsRow:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "strict":
        recall = ratio(t.TP, t.TP + t.FN)
    else:
        recall = ratio(t.TP, t.TP + t.FN + t.FL_gt)
    precision = ratio(t.TP, t.TP + t.FP + t.FL_pred)
    rough = ratio(t.TP + t.FL_gt, t.TP + t.FN + t.FL_gt)
    return LesionMetricsRow(name, t.TP, t.FN, t.FP, t.FL_gt, t.FL_pred, precision, recall, rough, mode)


def lesion_metrics(reports: MatchReport | Iterable[MatchReport], mode: str = "table") -> list[LesionMetricsRow]:
    """One row per lesion class, then ``All`` (column sums) and ``Malig``.

    Several reports (a cohort) are pooled by summing counts.
    """
    if isinstance(reports, MatchReport):
        reports = [reports]
    per_class = {c: ClassTally() for c in LESION_LABELS}
    malig = ClassTally()
    for r in reports:
        for c in LESION_LABELS:
            per_class[c] = per_class[c] + r.tally(c)
        malig = malig + r.tally_group(set(MALIGNANT))
    total = ClassTally()
    for t in per_class.values():
        total = total + t
    rows = [metrics_row(c.short_name, per_class[c], mode) for c in LESION_LABELS]
    rows.append(metrics_row("All", total, mode))
    rows.append(metrics_row("Malig", malig, mode))
    return rows


class PatientClassification(str, Enum):
    HCC = "HCC"
    ICC = "ICC"
    META = "Meta"
    HEM = "Hem"
    OTHER = "Other"
    CYST = "Cyst"
    NORMAL = "Normal"
    UNCERTAIN = "Uncertain"

    @classmethod
    def from_label(cls, label: int) -> "PatientClassification":
        return cls(ClassLabel(label).short_name)

    @property
    def is_malignant(self) -> bool:
        return self in (PatientClassification.HCC, PatientClassification.ICC, PatientClassification.META)


def classify_patient(dets: DetectionSet | Iterable) -> PatientClassification:
    """Highest-priority lesion type present, or Normal."""
    labels = [d.label for d in dets]
    if not labels:
        return PatientClassification.NORMAL
    return PatientClassification.from_label(priority_max(labels))


def joint_classify(a: PatientClassification, b: PatientClassification) -> PatientClassification:
    if PatientClassification.UNCERTAIN in (a, b):
        raise ContractViolation("joint_classify inputs must not be Uncertain")
    return a if a == b else PatientClassification.UNCERTAIN


@dataclass(frozen=True)
class PatientMetrics:
    sensitivity: float | None
    specificity: float | None
    accuracy: float | None
    n_counted: int
    n_uncertain: int
    TP: int
    FN: int
    TN: int
    FP: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def patient_metrics(
    preds: Sequence[PatientClassification],
    gts: Sequence[PatientClassification],
    exclude_uncertain: bool = True,
) -> PatientMetrics:
    """Malignancy sensitivity/specificity and 7-way accuracy.

    Uncertain predictions are left out when ``exclude_uncertain``; otherwise
    each one counts as a miss on both the binary and the 7-way scale.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth labels")
    tp = fn = tn = fp = correct = n = unc = 0
    for p, g in zip(preds, gts):
        p, g = PatientClassification(p), PatientClassification(g)
        if g == PatientClassification.UNCERTAIN:
            raise ValueError("ground truth cannot be Uncertain")
        if p == PatientClassification.UNCERTAIN:
            unc += 1
            if exclude_uncertain:
                continue
        n += 1
        correct += p == g
        if g.is_malignant:
            if p.is_malignant:
                tp += 1
            else:
                fn += 1
        else:
            if p == PatientClassification.UNCERTAIN or p.is_malignant:
                fp += 1
            else:
                tn += 1
    return PatientMetrics(ratio(tp, tp + fn), ratio(tn, tn + fp), ratio(correct, n), n, unc, tp, fn, tn, fp)


def volume_bin(volume_cm3: float) -> int:
    for i, (lo, hi) in enumerate(VOLUME_BINS):
        if lo <= volume_cm3 < hi:
            return i
    raise ValueError(f"volume {volume_cm3} cm3 is below the smallest bin ({VOLUME_BINS[0][0]})")


def stratify_by_volume(dets: DetectionSet | Iterable) -> dict[str, list[int]]:
    """Counts per class and volume bin, plus ``All`` and ``Malig`` rows."""
    table = {c.short_name: [0] * len(VOLUME_BINS) for c in LESION_LABELS}
    table["All"] = [0] * len(VOLUME_BINS)
    table["Malig"] = [0] * len(VOLUME_BINS)
    for d in dets:
        b = volume_bin(d.volume_cm3)
        table[d.label.short_name][b] += 1
        table["All"][b] += 1
        if d.label in MALIGNANT:
            table["Malig"][b] += 1
    return table


def merge_strata(tables: Iterable[dict[str, list[int]]]) -> dict[str, list[int]]:
    out: dict[str, list[int]] = {}
    for t in tables:
        for k, row in t.items():
            acc = out.setdefault(k, [0] * len(row))
            for i, v in enumerate(row):
                acc[i] += v
    return out


@dataclass
class EvalReport:
    """Lesion metrics per variant and mode, patient metrics, GT volume strata."""

    lesion: dict[str, dict[str, list[LesionMetricsRow]]] = field(default_factory=dict)
    patient: dict[str, PatientMetrics] = field(default_factory=dict)
    stratification: dict[str, list[int]] = field(default_factory=dict)
    n_cases: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_cases": self.n_cases,
            "lesion": {
                v: {m: [r.to_dict() for r in rows] for m, rows in modes.items()}
                for v, modes in self.lesion.items()
            },
            "patient": {v: m.to_dict() for v, m in self.patient.items()},
            "stratification": {"bins": list(BIN_NAMES), "rows": self.stratification},
            "notes": list(self.notes),
        }

    def to_text(self) -> str:
        return format_report(self)


def _pct(v: float | None) -> str:
    return "n/a" if v is None else f"{100 * v:.1f}"


def format_lesion_table(rows: Sequence[LesionMetricsRow]) -> str:
    head = ("Class", "FN", "FP", "FL_gt", "FL_pred", "TP", "Prec%", "Recall%", "Rough%")
    body = [
        (r.name, str(r.FN), str(r.FP), str(r.FL_gt), str(r.FL_pred), str(r.TP),
         _pct(r.precision), _pct(r.recall), _pct(r.recall_rough))
        for r in rows
    ]
    widths = [max(len(x[i]) for x in [head, *body]) for i in range(len(head))]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    return "\n".join([fmt(head), fmt(["-" * w for w in widths]), *map(fmt, body)])


def format_report(report: EvalReport) -> str:
    out = [f"cases: {report.n_cases}"]
    for variant, modes in report.lesion.items():
        for mode, rows in modes.items():
            out += ["", f"[{variant}] lesion metrics ({mode})", format_lesion_table(rows)]
    if report.patient:
        out += ["", "patient-level"]
        for variant, m in report.patient.items():
            out.append(
                f"  {variant}: sensitivity {_pct(m.sensitivity)}  specificity {_pct(m.specificity)}  "
                f"accuracy {_pct(m.accuracy)}  counted {m.n_counted}  uncertain {m.n_uncertain}"
            )
    if report.stratification:
        out += ["", "ground-truth lesions by volume (cm3)"]
        width = max(len(k) for k in report.stratification)
        out.append(" " * width + "  " + "  ".join(b.rjust(6) for b in BIN_NAMES))
        for k, row in report.stratification.items():
            out.append(k.ljust(width) + "  " + "  ".join(str(v).rjust(6) for v in row))
    for note in report.notes:
        out.append(f"note: {note}")
    return "\n".join(out) + "\n"


def evaluate_sets(gt_sets: Sequence[DetectionSet], pred_sets: Sequence[DetectionSet], variant: str = "pred",
                  min_overlap_voxels: int = 1) -> EvalReport:
    """Match paired GT/prediction sets and build a report for one variant."""
    from .matcher import match_sets

    if len(gt_sets) != len(pred_sets):
        raise ValueError(f"{len(gt_sets)} ground-truth sets for {len(pred_sets)} prediction sets")
    reports = [match_sets(g, p, min_overlap_voxels) for g, p in zip(gt_sets, pred_sets)]
    rep = EvalReport(n_cases=len(reports))
    rep.lesion[variant] = {m: lesion_metrics(reports, m) for m in MODES}
    rep.patient[variant] = patient_metrics(
        [classify_patient(p) for p in pred_sets], [classify_patient(g) for g in gt_sets]
    )
    rep.stratification = merge_strata(stratify_by_volume(g) for g in gt_sets)
    return rep
