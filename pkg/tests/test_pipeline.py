import filecmp
import json

import numpy as np
import pytest

from livercascade.core import VoxelGrid
from livercascade.metrics import PatientClassification as PC
from livercascade.phantom import generate_case, random_spec, write_case
from livercascade.pipeline import (
    CaseData,
    PipelineConfig,
    StageError,
    evaluate_cohort,
    run_case,
    run_cohort,
    variant_names,
    write_cohort_outputs,
)
from oracles import expected_instances, expected_patient_class, instances


def cls_of(label):
    return PC.NORMAL if label is None else PC.from_label(label)


@pytest.fixture(scope="module")
def cohort():
    return [generate_case(random_spec(s, n_spurious=(1, 2))) for s in range(100, 108)]


def test_variant_names():
    assert variant_names([1.0, 2.0, 4.0]) == {1.0: "Base", 2.0: "f=2", 4.0: "High"}
    assert PipelineConfig(factors=[4, 1, 4]).factors == (1.0, 4.0)


def test_base_only_misses_weak_lesions(cohort):
    cfg = PipelineConfig(factors=[1.0], enable_reclassify=False)
    for case in cohort:
        res = run_case(case, cfg)
        assert list(res.final_sets()) == ["Base"]
        assert instances(res.raw["Base"]) == expected_instances(case, 1.0)


def test_two_factors_detect_analytic_sets(cohort):
    cfg = PipelineConfig(enable_reclassify=False)
    for case in cohort:
        res = run_case(case, cfg)
        assert instances(res.raw["Base"]) == expected_instances(case, 1.0)
        assert instances(res.raw["High"]) == expected_instances(case, 4.0)


def test_joint_with_truth_segmenter(cohort):
    for case in cohort:
        res = run_case(case, PipelineConfig())
        base = cls_of(expected_patient_class(case, 1.0))
        high = cls_of(expected_patient_class(case, 4.0))
        assert res.patient["Base+ReCls"] == base
        assert res.patient["High+ReCls"] == high
        assert res.joint == (base if base == high else PC.UNCERTAIN)
        # agreement still misses a priority lesion too weak for either factor
        truth = cls_of(min((l.label for l in case.spec.lesions), default=None))
        assert res.gt_patient == truth
        if base == truth:
            assert res.joint == truth


def test_joint_equals_gt_when_lesions_confident():
    bands = (((0.55, 0.95), 1.0),)
    for s in range(6):
        case = generate_case(random_spec(200 + s, confidence_bands=bands, n_spurious=(1, 2)))
        res = run_case(case, PipelineConfig())
        assert res.joint == res.gt_patient


def lesion_totals(results, variant):
    from livercascade.metrics import lesion_metrics

    all_row = lesion_metrics([r.reports[variant] for r in results], "table")[6]
    return all_row


def test_variant_ordering(cohort):
    truth = run_cohort(cohort, PipelineConfig()).results
    base, high = lesion_totals(truth, "Base"), lesion_totals(truth, "High")
    assert high.FP >= base.FP and high.FN <= base.FN
    assert high.FP > 0
    for v in ("Base", "High"):
        raw, recl = lesion_totals(truth, v), lesion_totals(truth, v + "+ReCls")
        assert recl.FP < raw.FP or raw.FP == 0
        assert recl.TP >= raw.TP
    noisy = run_cohort(cohort, PipelineConfig(segmenter="mock:noisy:0.3", seed=1)).results
    raw, recl = lesion_totals(noisy, "High"), lesion_totals(noisy, "High+ReCls")
    assert recl.FP < raw.FP
    assert recl.FN >= raw.FN


def test_no_shuffle_ablation_uses_orig_pos(cohort):
    cfg = PipelineConfig(enable_shuffle_in_reclassify=False)
    assert cfg.reclassify_config.shuffle is False
    res = run_case(cohort[0], cfg)
    assert res.joint is not None


def test_oracle_only_run(cohort):
    case = cohort[0]
    data = CaseData(case.case_id, dict(case.images), None, case.gt)
    res = run_case(data, PipelineConfig())
    for dets in res.final_sets().values():
        assert instances(dets) == instances(res.gt)


def test_stage_errors_and_batch_continues(cohort, tmp_path):
    good = cohort[0]
    bad_gt = VoxelGrid(np.zeros((5, 5, 5), np.uint8), good.spacing)
    bad = CaseData("broken", dict(good.images), good.prob, bad_gt)
    with pytest.raises(StageError) as info:
        run_case(bad, PipelineConfig())
    assert info.value.stage == "load" and "broken" in str(info.value)
    out = run_cohort([good, bad, cohort[1]], PipelineConfig())
    assert [r.case_id for r in out.results] == [good.case_id, cohort[1].case_id]
    assert [(f.case_id, f.stage) for f in out.failures] == [("broken", "load")]
    paths = write_cohort_outputs(out, tmp_path)
    assert json.loads(paths["failures"].read_text())[0]["case_id"] == "broken"
    assert "failed at stage load" in paths["report_text"].read_text()


def test_missing_inputs(cohort):
    case = cohort[0]
    with pytest.raises(StageError, match="neither"):
        run_case(CaseData("x", dict(case.images)), PipelineConfig(enable_reclassify=False))


def test_manifest_input(cohort, tmp_path):
    path = write_case(cohort[2], tmp_path)
    a = run_case(path, PipelineConfig())
    b = run_case(cohort[2], PipelineConfig())
    assert a.final_sets() == b.final_sets() and a.joint == b.joint


def test_outputs_identical_across_workers(cohort, tmp_path):
    cfg = PipelineConfig(segmenter="mock:noisy:0.3", seed=5)
    dirs = []
    for jobs in (1, 8):
        d = tmp_path / f"j{jobs}"
        write_cohort_outputs(run_cohort(cohort, cfg, jobs=jobs), d)
        dirs.append(d)
    names = sorted(p.name for p in dirs[0].iterdir())
    assert names == sorted(p.name for p in dirs[1].iterdir())
    assert f"{cohort[0].case_id}_High_ReCls.json" in names
    _, mismatch, errors = filecmp.cmpfiles(dirs[0], dirs[1], names, shallow=False)
    assert not mismatch and not errors


def test_consensus_report(cohort):
    results = run_cohort(cohort, PipelineConfig()).results
    rep = evaluate_cohort(results)
    kept = [r for r in results if r.joint != PC.UNCERTAIN]
    assert rep.patient["Joint"].n_counted == len(kept)
    assert rep.patient["Joint(uncertain=error)"].n_counted == len(results)
    assert "High+ReCls@consensus" in rep.lesion
    tp = sum(r.reports["High+ReCls"].tally_group({1, 2, 3, 4, 5, 6}).TP for r in kept)
    assert rep.lesion["High+ReCls@consensus"]["table"][6].TP == tp
