"""Seeded synthetic cases with analytic ground truth, plus mock patch segmenters.

A phantom is a liver ellipsoid holding ellipsoidal lesions, optionally with
organ ellipsoids (classes 8-13) and "spurious" blobs: regions of healthy
liver to which the probability maps nevertheless assign a lesion class.

Probability model, per voxel:

* lesion of confidence c: its predicted channel = c, background = 1 - c
* spurious blob of confidence c: same, although the ground truth says liver
* liver / organ: organ channel 0.9, background 0.1
* elsewhere: background 1.0

so a lesion survives the sensitivity argmax at factor f exactly when
c > 1 / (1 + f).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import NUM_CHANNELS, ClassLabel, ProbMaps, VoxelGrid, check_spacing, lesion_voxels, voxel_volume_cm3
from .errors import GeometryError, SpecValidationError
from .seg2det import extract_lesions
from .shuffle import PATCH_SIZE, Patch, derive_seed
from .volio.manifest import PHASES, CaseManifest, write_manifest
from .volio.nifti import write_probmaps, write_volume

BACKGROUND_HU = -100.0
LIVER_HU = {"NC": 55.0, "AP": 70.0, "VP": 110.0, "DP": 90.0}
ORGAN_HU = {"NC": 40.0, "AP": 60.0, "VP": 80.0, "DP": 70.0}
# lesion contrast is scaled per phase (arterial enhancement, delayed washout)
LESION_GAIN = {"NC": 1.0, "AP": 1.5, "VP": 1.0, "DP": 0.8}
NOISE_SD = 5.0
ORGAN_CONFIDENCE = 0.9


@dataclass(frozen=True)
class Ellipsoid:
    """Axis-aligned ellipsoid; ``center`` in voxel coordinates (z, y, x), radii in mm."""

    center: tuple[float, float, float]
    radii_mm: tuple[float, float, float]

    def indices(self, dims: Sequence[int], spacing: Sequence[float]) -> np.ndarray:
        """Sorted flat indices of voxels whose centers lie inside (boundary included)."""
        lo, hi = [], []
        for c, r, s, d in zip(self.center, self.radii_mm, spacing, dims):
            lo.append(max(0, math.ceil(c - r / s)))
            hi.append(min(d - 1, math.floor(c + r / s)))
        if any(h < l for l, h in zip(lo, hi)):
            return np.empty(0, dtype=np.int64)
        axes = [
            ((np.arange(l, h + 1, dtype=np.float64) - c) * s / r) ** 2
            for l, h, c, s, r in zip(lo, hi, self.center, spacing, self.radii_mm)
        ]
        inside = axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :] <= 1.0
        z, y, x = np.nonzero(inside)
        return np.ravel_multi_index((z + lo[0], y + lo[1], x + lo[2]), tuple(dims)).astype(np.int64)


@dataclass(frozen=True)
class LesionSpec:
    label: int
    shape: Ellipsoid
    confidence: float
    contrast: float = 40.0
    # channel the probability maps put the confidence on; None = the true label
    prob_label: int | None = None

    @property
    def predicted_label(self) -> int:
        return self.label if self.prob_label is None else self.prob_label


@dataclass(frozen=True)
class SpuriousBlob:
    label: int
    shape: Ellipsoid
    confidence: float
    contrast: float = 10.0


@dataclass(frozen=True)
class OrganSpec:
    label: int
    shape: Ellipsoid


@dataclass(frozen=True)
class PhantomSpec:
    case_id: str
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    seed: int
    liver: Ellipsoid
    lesions: tuple[LesionSpec, ...] = ()
    organs: tuple[OrganSpec, ...] = ()
    spurious: tuple[SpuriousBlob, ...] = ()
    phases: tuple[str, ...] = PHASES

    def to_dict(self) -> dict:
        return asdict(self)


def spec_from_dict(obj: dict) -> PhantomSpec:
    ell = lambda d: Ellipsoid(tuple(d["center"]), tuple(d["radii_mm"]))  # noqa: E731
    return PhantomSpec(
        case_id=obj["case_id"],
        dims=tuple(obj["dims"]),
        spacing=tuple(obj["spacing"]),
        seed=obj["seed"],
        liver=ell(obj["liver"]),
        lesions=tuple(
            LesionSpec(l["label"], ell(l["shape"]), l["confidence"], l["contrast"], l["prob_label"])
            for l in obj["lesions"]
        ),
        organs=tuple(OrganSpec(o["label"], ell(o["shape"])) for o in obj["organs"]),
        spurious=tuple(
            SpuriousBlob(b["label"], ell(b["shape"]), b["confidence"], b["contrast"]) for b in obj["spurious"]
        ),
        phases=tuple(obj["phases"]),
    )


def validate_spec(spec: PhantomSpec) -> dict[str, list[np.ndarray]]:
    """Check the spec and return rasterized index arrays of every object."""
    try:
        dims = tuple(int(d) for d in spec.dims)
        if len(dims) != 3 or min(dims) <= 0:
            raise SpecValidationError(f"dims must be three positive integers, got {spec.dims}")
        spacing = check_spacing(spec.spacing)
    except GeometryError as exc:
        raise SpecValidationError(str(exc)) from exc
    if "NC" not in spec.phases or set(spec.phases) - set(PHASES):
        raise SpecValidationError(f"phases must include NC and be drawn from {PHASES}, got {spec.phases}")

    def positive_radii(e: Ellipsoid, what: str):
        if len(e.radii_mm) != 3 or not all(r > 0 and math.isfinite(r) for r in e.radii_mm):
            raise SpecValidationError(f"{what}: radii must be positive, got {e.radii_mm}")

    positive_radii(spec.liver, "liver")
    liver = spec.liver.indices(dims, spacing)
    if liver.size == 0:
        raise SpecValidationError("liver ellipsoid contains no voxel")
    out: dict[str, list[np.ndarray]] = {"liver": [liver], "organs": [], "lesions": [], "spurious": []}

    for i, o in enumerate(spec.organs):
        if not 8 <= o.label <= 13:
            raise SpecValidationError(f"organs[{i}]: label {o.label} is not an organ class 8-13")
        positive_radii(o.shape, f"organs[{i}]")
        out["organs"].append(o.shape.indices(dims, spacing))

    taken = np.empty(0, dtype=np.int64)
    for kind, items in (("lesions", spec.lesions), ("spurious", spec.spurious)):
        for i, item in enumerate(items):
            where = f"{kind}[{i}]"
            if not 1 <= item.label <= 6:
                raise SpecValidationError(f"{where}: label {item.label} is not a lesion class 1-6")
            if isinstance(item, LesionSpec) and not 1 <= item.predicted_label <= 6:
                raise SpecValidationError(f"{where}: prob_label {item.prob_label} is not a lesion class 1-6")
            if not 0.0 < item.confidence < 1.0:
                raise SpecValidationError(f"{where}: confidence {item.confidence} outside (0, 1)")
            positive_radii(item.shape, where)
            idx = item.shape.indices(dims, spacing)
            if idx.size == 0:
                raise SpecValidationError(f"{where}: ellipsoid contains no voxel")
            if not np.isin(idx, liver, assume_unique=True).all():
                raise SpecValidationError(f"{where}: ellipsoid is not inside the liver")
            if np.isin(idx, taken, assume_unique=True).any():
                raise SpecValidationError(f"{where}: overlaps another lesion or blob")
            if kind == "spurious":
                for organ in out["organs"]:
                    if np.isin(idx, organ, assume_unique=True).any():
                        raise SpecValidationError(f"{where}: blob must lie in plain liver, overlaps an organ")
            taken = np.union1d(taken, idx)
            out[kind].append(idx)
    return out


@dataclass(eq=False)
class PhantomCase:
    spec: PhantomSpec
    images: dict[str, VoxelGrid]
    gt: VoxelGrid
    prob: ProbMaps
    manifest: CaseManifest
    lesion_indices: list[np.ndarray] = field(default_factory=list)
    spurious_indices: list[np.ndarray] = field(default_factory=list)

    @property
    def case_id(self) -> str:
        return self.spec.case_id

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.gt.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.gt.spacing

    def expected_detected(self, f: float) -> list[int]:
        """Indices (into spec.lesions) of lesions that survive the argmax at factor f."""
        return [i for i, l in enumerate(self.spec.lesions) if l.confidence > 1.0 / (1.0 + f)]

    def lesion_volume_cm3(self, i: int) -> float:
        return self.lesion_indices[i].size * voxel_volume_cm3(self.spacing)


def default_manifest(case_id: str, phases: Sequence[str], spacing=None) -> CaseManifest:
    return CaseManifest(
        case_id=case_id,
        phase_paths={p: f"{case_id}_{p}.nii.gz" for p in phases},
        prob_path=f"{case_id}_prob.nii.gz",
        gt_mask_path=f"{case_id}_gt.nii.gz",
        spacing=spacing,
    )


def generate_case(spec: PhantomSpec) -> PhantomCase:
    objs = validate_spec(spec)
    dims = tuple(int(d) for d in spec.dims)
    spacing = check_spacing(spec.spacing)
    n = int(np.prod(dims))

    gt = np.zeros(n, dtype=np.uint8)
    gt[objs["liver"][0]] = ClassLabel.LIVER
    for o, idx in zip(spec.organs, objs["organs"]):
        gt[idx] = o.label
    for l, idx in zip(spec.lesions, objs["lesions"]):
        gt[idx] = l.label

    prob = np.zeros((NUM_CHANNELS, n), dtype=np.float32)
    prob[0] = 1.0
    organ = (gt >= ClassLabel.LIVER)
    organ_idx = np.flatnonzero(organ)
    prob[0, organ_idx] = np.float32(1.0 - ORGAN_CONFIDENCE)
    prob[gt[organ_idx].astype(np.int64), organ_idx] = np.float32(ORGAN_CONFIDENCE)
    for kind in ("lesions", "spurious"):
        items = spec.lesions if kind == "lesions" else spec.spurious
        for item, idx in zip(items, objs[kind]):
            # the lesion voxels were liver or an organ before; clear that channel
            prob[7:, idx] = 0.0
            c = np.float32(item.confidence)
            label = item.predicted_label if kind == "lesions" else item.label
            prob[0, idx] = np.float32(1.0) - c
            prob[label, idx] = c

    images = {}
    for p_i, phase in enumerate(spec.phases):
        rng = np.random.default_rng(derive_seed(spec.seed, spec.case_id, "image", phase))
        img = np.full(n, BACKGROUND_HU, dtype=np.float32)
        img[gt == ClassLabel.LIVER] = LIVER_HU[phase]
        img[gt > ClassLabel.LIVER] = ORGAN_HU[phase]
        for l, idx in zip(spec.lesions, objs["lesions"]):
            img[idx] = LIVER_HU[phase] + l.contrast * LESION_GAIN[phase]
        for b, idx in zip(spec.spurious, objs["spurious"]):
            img[idx] = LIVER_HU[phase] + b.contrast * LESION_GAIN[phase]
        img += rng.standard_normal(n, dtype=np.float32) * np.float32(NOISE_SD)
        images[phase] = VoxelGrid(np.rint(img).astype(np.int16).reshape(dims), spacing)

    return PhantomCase(
        spec=spec,
        images=images,
        gt=VoxelGrid(gt.reshape(dims), spacing),
        prob=ProbMaps(prob.reshape((NUM_CHANNELS,) + dims), spacing),
        manifest=default_manifest(spec.case_id, spec.phases),
        lesion_indices=objs["lesions"],
        spurious_indices=objs["spurious"],
    )


def write_case(case: PhantomCase, out_dir) -> Path:
    """Write images, gt mask, probability maps, spec and manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m = case.manifest
    for phase, grid in case.images.items():
        write_volume(grid, out_dir / m.phase_paths[phase])
    write_volume(case.gt, out_dir / m.gt_mask_path)
    write_probmaps(case.prob, out_dir / m.prob_path)
    (out_dir / f"{case.case_id}_spec.json").write_text(json.dumps(case.spec.to_dict(), indent=1) + "\n")
    path = out_dir / f"{case.case_id}.manifest.json"
    write_manifest(m, path)
    return path


# smallest default grid that still holds a whole reclassification patch
DEFAULT_DIMS = (24, 144, 144)
DEFAULT_SPACING = (2.5, 0.8, 0.8)

# confidence bands keep every draw well away from 1/(1+f) for f in {1, 4}
DEFAULT_CONFIDENCE_BANDS = (((0.55, 0.95), 0.55), ((0.25, 0.45), 0.30), ((0.06, 0.15), 0.15))


def _draw_confidence(rng: np.random.Generator, bands) -> float:
    weights = np.array([w for _, w in bands], dtype=np.float64)
    k = rng.choice(len(bands), p=weights / weights.sum())
    lo, hi = bands[k][0]
    return round(float(rng.uniform(lo, hi)), 4)


def random_spec(
    seed: int,
    case_id: str | None = None,
    dims: tuple[int, int, int] = DEFAULT_DIMS,
    spacing: tuple[float, float, float] = DEFAULT_SPACING,
    n_lesions: tuple[int, int] = (1, 5),
    n_spurious: tuple[int, int] = (0, 2),
    radius_mm: tuple[float, float] = (4.5, 9.0),
    p_false_label: float = 0.15,
    confidence_bands=DEFAULT_CONFIDENCE_BANDS,
    lesion_z_band: tuple[float, float] | None = None,
    with_organs: bool = True,
    labels: Sequence[int] = (1, 2, 3, 4, 5, 6),
    phases: tuple[str, ...] = PHASES,
    min_volume_cm3: float = 0.6,
) -> PhantomSpec:
    """Random valid spec; objects are kept at least two voxels apart.

    ``lesion_z_band`` restricts lesion and blob centers to a fraction range of
    the volume's z extent, leaving lesion-free liver elsewhere.
    """
    rng = np.random.default_rng(seed)
    case_id = case_id or f"phantom{seed:05d}"
    dims = tuple(int(d) for d in dims)
    spacing = check_spacing(spacing)
    Z, Y, X = dims
    ext_mm = [d * s for d, s in zip(dims, spacing)]
    liver = Ellipsoid(
        (Z / 2 - 0.5, Y / 2 - 0.5, 0.40 * X),
        (0.40 * ext_mm[0], 0.36 * ext_mm[1], 0.30 * ext_mm[2]),
    )
    organs = []
    if with_organs:
        organs.append(OrganSpec(ClassLabel.SPLEEN, Ellipsoid((Z / 2, 0.45 * Y, 0.86 * X), (0.3 * ext_mm[0], 0.12 * ext_mm[1], 0.07 * ext_mm[2]))))
        organs.append(OrganSpec(ClassLabel.STOMACH, Ellipsoid((Z / 2, 0.80 * Y, 0.84 * X), (0.2 * ext_mm[0], 0.08 * ext_mm[1], 0.07 * ext_mm[2]))))
    liver_idx = liver.indices(dims, spacing)
    lz = np.unravel_index(liver_idx, dims)[0]
    if lesion_z_band is not None:
        keep = (lz >= lesion_z_band[0] * Z) & (lz < lesion_z_band[1] * Z)
        centers_pool = liver_idx[keep]
    else:
        centers_pool = liver_idx
    occupied = np.zeros(dims, dtype=bool)
    vv = voxel_volume_cm3(spacing)
    max_rz = (PATCH_SIZE[0] - 1) / 2 * spacing[0]

    def place(min_r, max_r):
        for _ in range(200):
            c = np.unravel_index(centers_pool[rng.integers(centers_pool.size)], dims)
            center = tuple(float(v) + float(rng.uniform(-0.5, 0.5)) for v in c)
            radii = tuple(float(rng.uniform(min_r, max_r)) for _ in range(3))
            radii = (min(radii[0], max_rz),) + radii[1:]
            radii = tuple(round(r, 3) for r in radii)
            center = tuple(round(v, 3) for v in center)
            e = Ellipsoid(center, radii)
            idx = e.indices(dims, spacing)
            if idx.size * vv < min_volume_cm3:
                continue
            if not np.isin(idx, liver_idx, assume_unique=True).all():
                continue
            z, y, x = np.unravel_index(idx, dims)
            box = (
                slice(max(0, z.min() - 2), z.max() + 3),
                slice(max(0, y.min() - 2), y.max() + 3),
                slice(max(0, x.min() - 2), x.max() + 3),
            )
            if occupied[box].any():
                continue
            occupied[box] = True
            return e
        return None

    lesions = []
    for _ in range(int(rng.integers(n_lesions[0], n_lesions[1] + 1))):
        e = place(*radius_mm)
        if e is None:
            break
        label = int(rng.choice(labels))
        prob_label = None
        if rng.random() < p_false_label:
            prob_label = int(rng.choice([c for c in range(1, 7) if c != label]))
        contrast = round(float(rng.uniform(20, 60)) * (1 if rng.random() < 0.5 else -1), 2)
        lesions.append(LesionSpec(label, e, _draw_confidence(rng, confidence_bands), contrast, prob_label))
    spurious = []
    for _ in range(int(rng.integers(n_spurious[0], n_spurious[1] + 1))):
        e = place(radius_mm[0], max(radius_mm[0], radius_mm[1] * 0.7))
        if e is None:
            break
        spurious.append(SpuriousBlob(int(rng.integers(1, 7)), e, _draw_confidence(rng, confidence_bands)))
    return PhantomSpec(case_id, dims, spacing, seed, liver, tuple(lesions), tuple(organs), tuple(spurious), tuple(phases))


class TruthSegmenter:
    """Perfect patch model: ground-truth lesion labels at each patch voxel's source.

    Transplanted voxels are looked up at their case origin, so a copied lesion
    is segmented wherever it was pasted and excised lesions disappear.
    """

    reentrant = True

    def __init__(self, gt):
        labels = gt.data if isinstance(gt, VoxelGrid) else np.asarray(gt)
        self.lesions = np.where(lesion_voxels(labels), labels, 0).astype(np.uint8)

    def segment(self, patch: Patch) -> np.ndarray:
        sl = tuple(slice(o, o + p) for o, p in zip(patch.origin, patch.dims))
        out = self.lesions[sl].copy()
        if out.shape != patch.dims:
            raise GeometryError(f"patch window {patch.origin}+{patch.dims} leaves the case grid {self.lesions.shape}")
        flat = out.reshape(-1)
        src_flat = self.lesions.reshape(-1)
        for t in patch.transfers:
            flat[t.dest] = src_flat[t.src]
        return out


class NullSegmenter:
    reentrant = True

    def segment(self, patch: Patch) -> np.ndarray:
        return np.zeros(patch.dims, dtype=np.uint8)


class NoisySegmenter:
    """Truth segmenter output with each lesion instance dropped with probability ``p_drop``.

    The drop decisions depend only on the seed and the patch provenance.
    """

    reentrant = True

    def __init__(self, gt, p_drop: float, seed: int = 0):
        if not 0.0 <= p_drop <= 1.0:
            raise ValueError(f"p_drop must lie in [0, 1], got {p_drop}")
        self.truth = TruthSegmenter(gt)
        self.p_drop = float(p_drop)
        self.seed = seed

    def segment(self, patch: Patch) -> np.ndarray:
        out = self.truth.segment(patch)
        if self.p_drop == 0.0 or not out.any():
            return out
        rng = np.random.default_rng(
            derive_seed(self.seed, patch.case_id, patch.rng_seed, patch.origin, patch.scheme, patch.lesion_id)
        )
        flat = out.reshape(-1)
        for inst in extract_lesions(out, patch.spacing, min_volume_cm3=0.0):
            if rng.random() < self.p_drop:
                flat[inst.indices] = 0
        return out


def truth_segmenter(case) -> TruthSegmenter:
    return TruthSegmenter(case.gt if isinstance(case, PhantomCase) else case)


def null_segmenter() -> NullSegmenter:
    return NullSegmenter()


def noisy_segmenter(case, p_drop: float, seed: int = 0) -> NoisySegmenter:
    return NoisySegmenter(case.gt if isinstance(case, PhantomCase) else case, p_drop, seed)
