import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from livercascade.detection import Detection, DetectionSet
from livercascade.errors import ContractViolation
from livercascade.matcher import ClassTally, match_sets
from livercascade.metrics import (
    EvalReport,
    PatientClassification as PC,
    classify_patient,
    evaluate_sets,
    joint_classify,
    lesion_metrics,
    metrics_row,
    patient_metrics,
    stratify_by_volume,
    volume_bin,
)
from oracles import random_set_pair

PRIORITY = [PC.HCC, PC.ICC, PC.META, PC.HEM, PC.OTHER, PC.CYST]


def dets_with_labels(labels, dims=(1, 1, 64), spacing=(10.0, 10.0, 10.0)):
    return DetectionSet(
        "c", dims, spacing,
        [Detection.from_indices(i + 1, lab, [i], dims, spacing) for i, lab in enumerate(labels)],
    )


def test_aggregate_row_example():
    t = ClassTally(TP=448, FN=38, FP=26, FL_gt=64, FL_pred=64)
    row = metrics_row("All", t, "table")
    assert 100 * row.precision == pytest.approx(83.3, abs=0.05)
    assert 100 * row.recall == pytest.approx(81.5, abs=0.05)
    assert 100 * row.recall_rough == pytest.approx(93.1, abs=0.05)


def test_strict_versus_table_modes():
    t = ClassTally(TP=3, FN=1, FP=2, FL_gt=1, FL_pred=0)
    strict, table = metrics_row("x", t, "strict"), metrics_row("x", t, "table")
    assert strict.recall == pytest.approx(0.75)
    assert table.recall == pytest.approx(0.6)
    assert strict.precision == table.precision == pytest.approx(0.6)


def test_all_tp_and_undefined():
    row = metrics_row("x", ClassTally(TP=5))
    assert row.precision == row.recall == row.recall_rough == 1.0
    row = metrics_row("x", ClassTally())
    assert row.precision is row.recall is row.recall_rough is None
    with pytest.raises(ValueError):
        metrics_row("x", ClassTally(), "loose")


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_row_invariants(seed):
    reports = [match_sets(*random_set_pair(np.random.default_rng(seed + k))) for k in range(3)]
    for mode in ("strict", "table"):
        rows = lesion_metrics(reports, mode)
        assert [r.name for r in rows] == ["HCC", "ICC", "Meta", "Hem", "Other", "Cyst", "All", "Malig"]
        cls, total = rows[:6], rows[6]
        for f in ("TP", "FN", "FP", "FL_gt", "FL_pred"):
            assert getattr(total, f) == sum(getattr(r, f) for r in cls)
        assert total.FL_gt == total.FL_pred
    strict, table = lesion_metrics(reports, "strict"), lesion_metrics(reports, "table")
    for s, t in zip(strict, table):
        if t.recall is not None and s.recall is not None:
            assert s.recall >= t.recall - 1e-12
            assert t.recall_rough >= t.recall - 1e-12


def test_classify_patient_examples():
    assert classify_patient(dets_with_labels([])) == PC.NORMAL
    assert classify_patient(dets_with_labels([6, 3, 4])) == PC.META
    assert classify_patient(dets_with_labels([5])) == PC.OTHER


@pytest.mark.parametrize("subset", [s for k in range(7) for s in itertools.combinations(range(1, 7), k)])
def test_classify_patient_all_subsets(subset):
    # expected: the first entry of the priority list present in the subset
    present = {PRIORITY[c - 1] for c in subset}
    expected = next((p for p in PRIORITY if p in present), PC.NORMAL)
    labels = list(subset) + list(subset[:1])  # duplicates and order must not matter
    assert classify_patient(dets_with_labels(labels)) == expected
    assert classify_patient(dets_with_labels(labels[::-1])) == expected


def test_joint_classify():
    assert joint_classify(PC.HCC, PC.HCC) == PC.HCC
    assert joint_classify(PC.NORMAL, PC.CYST) == PC.UNCERTAIN
    assert joint_classify(PC.META, PC.HCC) == PC.UNCERTAIN
    with pytest.raises(ContractViolation):
        joint_classify(PC.UNCERTAIN, PC.HCC)


def test_patient_metrics_examples():
    m = patient_metrics([PC.HCC, PC.META, PC.NORMAL, PC.CYST], [PC.HCC, PC.CYST, PC.NORMAL, PC.META])
    assert (m.sensitivity, m.specificity, m.accuracy) == (0.5, 0.5, 0.5)
    perfect = patient_metrics(PRIORITY, PRIORITY)
    assert perfect.sensitivity == perfect.specificity == perfect.accuracy == 1.0
    preds = [PC.HCC] * 9 + [PC.UNCERTAIN]
    m = patient_metrics(preds, [PC.HCC] * 10)
    assert (m.n_counted, m.n_uncertain, m.sensitivity) == (9, 1, 1.0)
    m = patient_metrics(preds, [PC.HCC] * 10, exclude_uncertain=False)
    assert (m.n_counted, m.FN, m.sensitivity, m.accuracy) == (10, 1, 0.9, 0.9)
    with pytest.raises(ValueError):
        patient_metrics([PC.HCC], [])


def consensus_cohort(n=331, n_disagree=12, seed=3):
    """Synthetic cohort where the two models disagree on exactly ``n_disagree`` patients."""
    rng = np.random.default_rng(seed)
    pool = PRIORITY + [PC.NORMAL]
    gts = [pool[i] for i in rng.integers(0, 7, n)]
    base = [g if rng.random() < 0.9 else pool[rng.integers(0, 7)] for g in gts]
    high = list(base)
    for i in rng.choice(n, n_disagree, replace=False):
        high[i] = next(p for p in pool if p != base[i])
    return gts, base, high


def test_consensus_excludes_disagreements():
    gts, base, high = consensus_cohort()
    joint = [joint_classify(a, b) for a, b in zip(base, high)]
    m = patient_metrics(joint, gts)
    assert (m.n_counted, m.n_uncertain) == (319, 12)
    # hand count over the agreeing patients only
    kept = [(j, g) for j, g in zip(joint, gts) if j != PC.UNCERTAIN]
    tp = sum(j.is_malignant and g.is_malignant for j, g in kept)
    fn = sum(not j.is_malignant and g.is_malignant for j, g in kept)
    tn = sum(not j.is_malignant and not g.is_malignant for j, g in kept)
    assert (m.TP, m.FN, m.TN, m.TP + m.FN + m.TN + m.FP) == (tp, fn, tn, 319)
    assert m.sensitivity == pytest.approx(tp / (tp + fn))
    assert m.accuracy == pytest.approx(sum(j == g for j, g in kept) / 319)


def test_volume_bins():
    assert volume_bin(2.0) == 1
    assert volume_bin(0.5) == 0
    assert volume_bin(64.0) == 5
    with pytest.raises(ValueError):
        volume_bin(0.49)


def test_stratify():
    assert all(v == [0] * 6 for v in stratify_by_volume([]).values())
    dims, spacing = (10, 10, 10), (10.0, 10.0, 10.0)  # one voxel is 1 cm3
    sizes = {1: 1, 4: 3, 3: 40}
    dets, start = [], 0
    for i, (lab, n) in enumerate(sizes.items()):
        dets.append(Detection.from_indices(i + 1, lab, np.arange(start, start + n), dims, spacing))
        start += n
    dets.append(Detection.from_indices(4, 2, np.arange(start, start + 100), dims, spacing))
    table = stratify_by_volume(DetectionSet("c", dims, spacing, dets))
    assert table["All"] == [1, 1, 0, 0, 1, 1]
    assert table["Malig"] == [1, 0, 0, 0, 1, 1]
    assert table["Hem"] == [0, 1, 0, 0, 0, 0]


def test_evaluate_sets_report():
    gt = dets_with_labels([1, 6])
    pred = dets_with_labels([1, 4])
    rep = evaluate_sets([gt], [pred], variant="v", min_overlap_voxels=1)
    assert isinstance(rep, EvalReport) and rep.n_cases == 1
    d = rep.to_dict()
    json.dumps(d)
    assert set(d["lesion"]["v"]) == {"strict", "table"}
    text = rep.to_text()
    assert "[v] lesion metrics (table)" in text and "Recall%" in text
    assert d["patient"]["v"]["TP"] == 1
