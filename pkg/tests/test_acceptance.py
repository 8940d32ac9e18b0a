"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import os
import subprocess
import sys
import textwrap
import time
from collections import Counter
from itertools import combinations

import numpy as np
import pytest

from conftest import simple_spec
from livercascade.core import LESION_LABELS, VoxelGrid
from livercascade.matcher import ClassTally, match_sets
from livercascade.metrics import (
    PatientClassification as PC,
    classify_patient,
    joint_classify,
    metrics_row,
    patient_metrics,
)
from livercascade.phantom import (
    Ellipsoid,
    LesionSpec,
    generate_case,
    null_segmenter,
    random_spec,
    truth_segmenter,
)
from livercascade.pipeline import PipelineConfig, run_case
from livercascade.reclassify import reclassify_set
from livercascade.seg2det import extract_lesions
from livercascade.sensitivity import sensitivity_mask
from livercascade.shuffle import ShuffleCase, make_inference_patches, make_training_patches
from livercascade.volio.detjson import read_detections, write_detections
from livercascade.volio.nifti import read_volume, write_volume
from oracles import (
    expected_instances,
    flood_fill_instances,
    instances,
    lexicographic_best,
    max_total_overlap,
    overlap_table,
    patch_violations,
    random_label_grid,
    random_set_pair,
)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


def test_criterion_01_metric_reproduction(verdict):
    t0 = time.perf_counter()
    row = metrics_row("All", ClassTally(TP=448, FN=38, FP=26, FL_gt=64, FL_pred=64), "table")
    elapsed = time.perf_counter() - t0
    got = (100 * row.precision, 100 * row.recall, 100 * row.recall_rough)
    ok = all(abs(g - w) <= 0.05 for g, w in zip(got, (83.3, 81.5, 93.1))) and elapsed < 1.0
    verdict(1, ok, "precision %.3f%% recall %.3f%% rough %.3f%% in %.4fs" % (*got, elapsed))


def test_criterion_02_seg2det_oracle(verdict):
    rng = np.random.default_rng(20240101)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        g = random_label_grid(rng)
        got = [(int(d.label), d.indices.tolist()) for d in extract_lesions(g, (1, 1, 1), min_volume_cm3=0)]
        bad += got != flood_fill_instances(g)
    elapsed = time.perf_counter() - t0
    verdict(2, bad == 0 and elapsed < 60, f"{bad} mismatches on 1000 grids in {elapsed:.1f}s")


def test_criterion_03_phantom_recovery(verdict):
    t0 = time.perf_counter()
    recovery_bad = detect_bad = 0
    cfg = PipelineConfig()
    for seed in range(100):
        case = generate_case(random_spec(1000 + seed, n_spurious=(0, 2)))
        planted = sorted((l.label, idx.tolist()) for l, idx in zip(case.spec.lesions, case.lesion_indices))
        recovery_bad += instances(extract_lesions(case.gt, min_volume_cm3=0)) != planted
        res = run_case(case, cfg)
        for f, name in ((1.0, "Base"), (4.0, "High")):
            # raw masks: every planted object above the threshold, under its predicted label
            detect_bad += instances(res.raw[name]) != expected_instances(case, f)
            # after reclassification: exactly the true lesions above the threshold
            truth = sorted(
                (l.label, idx.tolist())
                for l, idx in zip(case.spec.lesions, case.lesion_indices)
                if l.confidence > 1.0 / (1.0 + f)
            )
            detect_bad += instances(res.reclassified[name + "+ReCls"]) != truth
    elapsed = time.perf_counter() - t0
    ok = recovery_bad == 0 and detect_bad == 0 and elapsed < 300
    verdict(3, ok, f"recovery mismatches {recovery_bad}, detection mismatches {detect_bad}, {elapsed:.1f}s")


def test_criterion_04_sensitivity_monotone(verdict):
    # a 0.25 grid plus the flip point of a c = 0.21 lesion (0.79 / 0.21)
    factors = sorted({round(float(f), 6) for f in np.linspace(1, 8, 29)} | {0.79 / 0.21})
    breaches = 0
    for seed in range(50):
        case = generate_case(random_spec(2000 + seed))
        prev = None
        for f in factors:
            m = sensitivity_mask(case.prob, f).data
            lesion = (m >= 1) & (m <= 6)
            if prev is not None:
                p_lesion, p_mask = prev
                breaches += int(np.count_nonzero(p_lesion & ~lesion))
                both = p_lesion & lesion
                breaches += int(np.count_nonzero(p_mask[both] != m[both]))
            prev = (lesion, m)
    verdict(4, breaches == 0, f"{breaches} breaches over 50 phantoms x {len(factors)} factors in [1, 8]")


def coarse(lesions):
    case = generate_case(simple_spec(lesions, spacing=(2.5, 2.0, 2.0)))
    return ShuffleCase(case.case_id, case.images, case.gt), extract_lesions(case.gt)


class FirstK:
    reentrant = True

    def __init__(self, k):
        self.k = k

    def segment(self, patch):
        flat = patch.mask.reshape(-1)
        out = np.zeros_like(flat)
        idx = np.flatnonzero(flat)[: self.k]
        out[idx] = flat[idx]
        return out.reshape(patch.dims)


def test_criterion_05_reclassification_contracts(verdict):
    lesions_lost = blobs_seen = blobs_left = null_bad = 0
    for seed in range(30):
        case = generate_case(random_spec(3000 + seed, n_spurious=(1, 3)))
        pred = sensitivity_mask(case.prob, 4.0)
        dets = extract_lesions(pred)
        out = reclassify_set(dets, ShuffleCase(case.case_id, case.images, pred), truth_segmenter(case))
        kept = {tuple(d.indices.tolist()) for d in out}
        for l, idx in zip(case.spec.lesions, case.lesion_indices):
            if l.confidence > 0.2:
                lesions_lost += tuple(idx.tolist()) not in kept
        for b, idx in zip(case.spec.spurious, case.spurious_indices):
            if b.confidence > 0.2:
                blobs_seen += 1
                blobs_left += tuple(idx.tolist()) in kept
        nulled = reclassify_set(dets, ShuffleCase(case.case_id, case.images, pred), null_segmenter())
        null_bad += sorted(d.id for d in nulled) != sorted(d.id for d in dets if d.volume_cm3 > 64)
    sc, dets = coarse([
        LesionSpec(1, Ellipsoid((20, 96, 80), (20.0, 30.0, 30.0)), 0.8),
        LesionSpec(6, Ellipsoid((20, 96, 115), (8.0, 8.0, 8.0)), 0.8),
    ])
    nulled = reclassify_set(dets, sc, null_segmenter())
    null_bad += [d.id for d in nulled] != [d.id for d in dets if d.volume_cm3 > 64] or len(nulled) != 1
    sc, dets = coarse([LesionSpec(4, Ellipsoid((20, 96, 80), (9.0, 9.0, 9.0)), 0.8)])
    low, high = len(reclassify_set(dets, sc, FirstK(49))), len(reclassify_set(dets, sc, FirstK(51)))
    ok = lesions_lost == 0 and blobs_seen > 0 and blobs_left == 0 and null_bad == 0 and (low, high) == (0, 1)
    verdict(
        5, ok,
        f"lesions lost {lesions_lost}, blobs removed {blobs_seen - blobs_left}/{blobs_seen}, "
        f"null mismatches {null_bad}, 0.49 cm3 kept {low}, 0.51 cm3 kept {high}",
    )


def test_criterion_06_shuffle_invariants(roomy_phantom, verdict):
    cases = [roomy_phantom] + [
        generate_case(random_spec(
            4000 + s, dims=(40, 176, 176), n_lesions=(2, 3), lesion_z_band=(0.55, 0.9),
            confidence_bands=(((0.6, 0.9), 1.0),),
        ))
        for s in range(3)
    ]
    patches, violations, nondeterministic = 0, [], 0
    schemes = Counter()
    for k, case in enumerate(cases):
        sc = ShuffleCase(case.case_id, case.images, case.gt)
        lesions = extract_lesions(case.gt)
        made, failures = make_training_patches(sc, per_lesion=10, seed=k)
        for d in lesions:
            made += make_inference_patches(d, sc, n=10, seed=k)
        again, _ = make_training_patches(ShuffleCase(case.case_id, case.images, case.gt), per_lesion=10, seed=k)
        for d in lesions:
            again += make_inference_patches(d, sc, n=10, seed=k)
        nondeterministic += [p.digest() for p in made] != [p.digest() for p in again]
        for p in made:
            src = lesions.by_id(p.lesion_id) if p.lesion_id is not None else None
            violations += [f"{case.case_id}/{p.scheme}: {v}" for v in patch_violations(p, sc, src)]
            schemes[p.scheme] += 1
        patches += len(made)
    ok = patches >= 500 and not violations and nondeterministic == 0 and len(schemes) == 4
    verdict(6, ok, f"{patches} patches {dict(schemes)}, {len(violations)} violations, "
                   f"{nondeterministic} non-reproducible cases" + (f"; first: {violations[0]}" if violations else ""))


def test_criterion_07_matcher(verdict):
    rng = np.random.default_rng(77)
    identity_bad = lex_bad = compared = total_differs = 0
    for _ in range(1000):
        gt, pred = random_set_pair(rng, n_boxes=(1, 9))
        r = match_sets(gt, pred)
        t = ClassTally()
        for c in LESION_LABELS:
            t = t + r.tally(c)
        identity_bad += (t.TP + t.FL_gt + t.FN != len(gt)) or (t.TP + t.FL_pred + t.FP != len(pred))
        if len(gt) <= 6 and len(pred) <= 6:
            compared += 1
            ov = overlap_table(gt, pred)
            lex_bad += sorted((p.gt_id, p.pred_id) for p in r.pairs) != lexicographic_best([d.id for d in gt], ov)
            greedy_total = sum(p.intersection_voxels for p in r.pairs)
            total_differs += greedy_total != max_total_overlap([d.id for d in gt], ov)
    ok = identity_bad == 0 and lex_bad == 0 and compared > 0
    verdict(
        7, ok,
        f"identity breaches {identity_bad}/1000; greedy vs brute-force max-overlap (largest-first) "
        f"mismatches {lex_bad}/{compared}; pairs where the max-total-overlap optimum differs {total_differs}",
    )


def test_criterion_08_patient_classification(verdict):
    priority = [PC.HCC, PC.ICC, PC.META, PC.HEM, PC.OTHER, PC.CYST]
    dims, sp = (1, 1, 16), (10.0, 10.0, 10.0)
    subset_bad = 0
    n_subsets = 0
    for k in range(7):
        for subset in combinations(range(1, 7), k):
            n_subsets += 1
            row = np.zeros(dims, np.uint8)
            row[0, 0, : 2 * len(subset) : 2] = subset  # one isolated voxel per type
            dets = extract_lesions(row, sp)
            want = next((p for i, p in enumerate(priority, 1) if i in subset), PC.NORMAL)
            subset_bad += classify_patient(dets) != want
    # synthetic cohort: 331 patients, the two models disagree on 12
    rng = np.random.default_rng(331)
    pool = priority + [PC.NORMAL]
    gts = [pool[i] for i in rng.integers(0, 7, 331)]
    base = [g if rng.random() < 0.9 else pool[rng.integers(0, 7)] for g in gts]
    high = list(base)
    for i in rng.choice(331, 12, replace=False):
        high[i] = next(p for p in pool if p != base[i])
    joint = [joint_classify(a, b) for a, b in zip(base, high)]
    m = patient_metrics(joint, gts, exclude_uncertain=True)
    ok = n_subsets == 64 and subset_bad == 0 and (m.n_counted, m.n_uncertain) == (319, 12)
    verdict(8, ok, f"{n_subsets} lesion-type subsets, {subset_bad} wrong; joint cohort counted {m.n_counted} "
                   f"of 331 with {m.n_uncertain} uncertain")


PERF_SCRIPT = textwrap.dedent("""
    import json, resource, sys, time
    from livercascade.phantom import generate_case, random_spec
    from livercascade.pipeline import PipelineConfig, run_case, write_case_outputs

    out = sys.argv[1]
    spec = random_spec(
        9, dims=(60, 512, 512), spacing=(5.0, 0.7, 0.7), n_lesions=(8, 8), n_spurious=(4, 4),
        radius_mm=(6.0, 14.0),
    )
    case = generate_case(spec)
    timings = {}
    for jobs in (1, 8):
        t0 = time.perf_counter()
        res = run_case(case, PipelineConfig(), jobs=jobs)
        timings[jobs] = time.perf_counter() - t0
        write_case_outputs(res, f"{out}/j{jobs}")
    peak_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    print(json.dumps({"timings": timings, "peak_kb": peak_kb, "lesions": len(spec.lesions)}))
""")


def test_criterion_09_performance(tmp_path, verdict):
    env = {**os.environ, "OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1", "MKL_NUM_THREADS": "1"}
    proc = subprocess.run(
        [sys.executable, "-c", PERF_SCRIPT, str(tmp_path)], capture_output=True, text=True, env=env, timeout=900
    )
    assert proc.returncode == 0, proc.stderr[-2000:]
    info = json.loads(proc.stdout.strip().splitlines()[-1])
    peak_gb = info["peak_kb"] / 2**20
    single = info["timings"]["1"]
    a, b = tmp_path / "j1", tmp_path / "j8"
    names = sorted(p.name for p in a.iterdir())
    identical = names == sorted(p.name for p in b.iterdir()) and all(
        (a / n).read_bytes() == (b / n).read_bytes() for n in names
    )
    ok = single < 30 and peak_gb < 8 and identical
    verdict(9, ok, f"512x512x60 single-threaded {single:.1f}s, 8 threads {info['timings']['8']:.1f}s, "
                   f"peak RSS {peak_gb:.2f} GB, outputs identical {identical} ({len(names)} files)")


def test_criterion_10_io_round_trips(tmp_path, verdict):
    rng = np.random.default_rng(10)
    nifti_bad = det_bad = 0
    for k in range(150):
        dims = tuple(int(v) for v in rng.integers(1, 12, 3))
        spacing = tuple(float(np.float32(v)) for v in rng.uniform(0.1, 6.0, 3))
        kind = k % 3
        if kind == 0:
            data = rng.integers(0, 256, dims).astype(np.uint8)
        elif kind == 1:
            data = rng.integers(-32768, 32768, dims).astype(np.int16)
        else:
            data = rng.standard_normal(dims).astype(np.float32) * np.float32(rng.uniform(1, 1e4))
        path = tmp_path / f"v{k}.nii{'.gz' if k % 2 else ''}"
        write_volume(VoxelGrid(data, spacing), path)
        back = read_volume(path)
        nifti_bad += not (
            back.data.dtype == data.dtype and back.data.tobytes() == data.tobytes()
            and np.array_equal(np.float32(back.spacing), np.float32(spacing)) and back.dims == dims
        )
    for k in range(150):
        g = random_label_grid(rng)
        dets = extract_lesions(g, tuple(float(v) for v in rng.uniform(0.5, 3, 3)), min_volume_cm3=0, case_id=f"c{k}")
        if len(dets) and rng.random() < 0.5:
            first = next(iter(dets))
            dets = dets.with_detections([first.with_changes(score_cm3=float(rng.uniform(0, 5)), flags=("relabeled:Hem",))]
                                        + list(dets)[1:])
        path = tmp_path / f"d{k}.json"
        write_detections(dets, path)
        back = read_detections(path)
        write_detections(back, tmp_path / f"again{k}.json")
        det_bad += back != dets or (tmp_path / f"again{k}.json").read_bytes() != path.read_bytes()
    verdict(10, nifti_bad == 0 and det_bad == 0,
            f"NIfTI mismatches {nifti_bad}/150, detection JSON mismatches {det_bad}/150")
