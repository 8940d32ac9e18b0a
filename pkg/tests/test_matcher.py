import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from livercascade.core import MALIGNANT
from livercascade.detection import Detection, DetectionSet
from livercascade.errors import GeometryError
from livercascade.matcher import intersection_voxels, match_predictions, match_sets
from livercascade.seg2det import extract_lesions
from oracles import lexicographic_best, overlap_table, random_set_pair

DIMS = (1, 4, 40)


def row_set(*items, dims=DIMS):
    """Detections on the first image row: each item is (id, label, x0, x1)."""
    dets = [
        Detection.from_indices(i, lab, np.ravel_multi_index((0, 0, np.arange(a, b)), dims), dims, (1, 1, 1))
        for i, lab, a, b in items
    ]
    return DetectionSet("c", dims, (1, 1, 1), dets)


def test_blob_over_two_lesions_takes_larger_overlap():
    gt = row_set((1, 1, 0, 10), (2, 1, 10, 13))
    pred = row_set((1, 1, 0, 13))
    r = match_sets(gt, pred)
    assert [(p.gt_id, p.pred_id, p.intersection_voxels) for p in r.pairs] == [(1, 1, 10)]
    assert r.unmatched_gt == (2,) and r.unmatched_pred == ()
    assert r.tally(1).as_tuple() == (1, 1, 0, 0, 0)


def test_tie_prefers_smaller_ids():
    gt = row_set((1, 2, 0, 5), (2, 2, 5, 10))
    pred = row_set((1, 2, 0, 10))
    (p,) = match_sets(gt, pred).pairs
    assert (p.gt_id, p.pred_id) == (1, 1)


def test_false_label_counts_both_sides():
    gt = row_set((1, 1, 0, 5), (2, 6, 20, 25))
    pred = row_set((1, 4, 0, 5), (2, 6, 30, 35))
    r = match_sets(gt, pred)
    assert r.tally(1).as_tuple() == (0, 0, 0, 1, 0)
    assert r.tally(4).as_tuple() == (0, 0, 0, 0, 1)
    assert r.tally(6).as_tuple() == (0, 1, 1, 0, 0)
    # HCC versus ICC is a false label per class but a hit for the malignant group
    r = match_sets(row_set((1, 1, 0, 5)), row_set((1, 2, 0, 5)))
    assert r.tally_group(set(MALIGNANT)).as_tuple() == (1, 0, 0, 0, 0)


def test_greedy_is_not_max_total():
    # greedy pairs the 10-voxel overlap first, which forfeits the 9 + 9 assignment
    gt = row_set((1, 1, 0, 19), (2, 1, 19, 28))
    pred = row_set((1, 1, 9, 28), (2, 1, 0, 9))
    r = match_sets(gt, pred)
    chosen = {(p.gt_id, p.pred_id): p.intersection_voxels for p in r.pairs}
    assert chosen == {(1, 1): 10}
    assert r.unmatched_gt == (2,) and r.unmatched_pred == (2,)


def test_min_overlap_threshold():
    gt = row_set((1, 1, 0, 5))
    pred = row_set((1, 1, 3, 8))
    assert len(match_sets(gt, pred, min_overlap_voxels=2).pairs) == 1
    assert len(match_sets(gt, pred, min_overlap_voxels=3).pairs) == 0


def test_incompatible_sets():
    with pytest.raises(GeometryError):
        match_sets(row_set((1, 1, 0, 2)), row_set((1, 1, 0, 2), dims=(1, 4, 41)))


def test_empty_sets():
    r = match_sets(row_set(), row_set((1, 3, 0, 4)))
    assert r.tally(3).as_tuple() == (0, 0, 1, 0, 0)
    assert r.to_dict()["per_class"]["Meta"]["FP"] == 1


def test_match_predictions_same_and_diff():
    a = row_set((1, 1, 0, 5), (2, 4, 10, 14), (3, 6, 30, 32))
    b = row_set((1, 1, 1, 6), (2, 5, 10, 14), (3, 6, 31, 33), (4, 2, 20, 22))
    same, diff = match_predictions(a, b)
    assert [d.id for d in same] == [1, 3]
    # b's instance wins over an overlapping a-instance of the same label; ids renumbered
    assert [(d.id, int(d.label), d.bbox[2]) for d in diff] == [(1, 2, 20), (2, 4, 10), (3, 5, 10)]


def check_identities(gt, pred, r):
    tot = sum((r.tally(c) for c in range(1, 7)), start=type(r.tally(1))())
    assert tot.TP + tot.FL_gt + tot.FN == len(gt)
    assert tot.TP + tot.FL_pred + tot.FP == len(pred)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_identities_and_lexicographic_oracle(seed):
    gt, pred = random_set_pair(np.random.default_rng(seed))
    r = match_sets(gt, pred)
    check_identities(gt, pred, r)
    ov = overlap_table(gt, pred)
    for p in r.pairs:
        assert ov[p.gt_id, p.pred_id] == p.intersection_voxels
        assert intersection_voxels(gt.by_id(p.gt_id), pred.by_id(p.pred_id)) == p.intersection_voxels
    if len(gt) <= 6 and len(pred) <= 6:
        assert sorted((p.gt_id, p.pred_id) for p in r.pairs) == lexicographic_best([d.id for d in gt], ov)


def test_volume_in_cm3():
    dims = (2, 8, 8)
    m = np.zeros(dims, np.uint8)
    m[:, :4, :4] = 2
    gt = extract_lesions(m, (2.0, 1.0, 1.0), min_volume_cm3=0)
    (p,) = match_sets(gt, gt).pairs
    assert p.intersection_voxels == 32 and p.intersection_cm3 == pytest.approx(0.064)
