"""Lesion-shuffle augmentation: liver patches, lesion transplantation and excision.

Four patch schemes are produced:

* ``orig-pos``  window cropped around a lesion
* ``orig-neg``  lesion-free window with enough liver in it
* ``shuf-pos``  an orig-neg window with a lesion copied into its liver tissue
* ``shuf-neg``  an orig-pos window whose lesion voxels are overwritten by
  lesion-free liver voxels taken from elsewhere in the same case

Voxels outside the liver region (liver label plus lesion labels) are set to
``fill_value`` in every phase image; patch masks only ever hold labels 0-6.

Randomness: every patch is drawn from its own generator whose seed is derived
from (seed, case id, lesion id, scheme, index), so outputs do not depend on
generation order or thread count. Valid windows and placements are enumerated
exhaustively and one is picked uniformly; "exhausted" therefore means that no
valid choice exists at all.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import signal

from .core import ClassLabel, VoxelGrid, check_spacing, lesion_voxels
from .detection import Detection
from .errors import CascadeError, GeometryError, LesionTooLargeError, SamplingExhaustedError
from .seg2det import extract_lesions

log = logging.getLogger(__name__)

PATCH_SIZE = (16, 128, 128)
FILL_VALUE = -1024
SCHEMES = ("orig-pos", "orig-neg", "shuf-pos", "shuf-neg")


@dataclass(frozen=True)
class ShuffleConfig:
    patch_size: tuple[int, int, int] = PATCH_SIZE
    fill_value: int = FILL_VALUE
    min_liver_fraction: float = 0.25
    # orig-neg windows tried when looking for a transplant destination
    max_attempts: int = 100


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary hashable parts (not Python's salted hash)."""
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class Transfer:
    """Voxels copied from case coordinates ``src`` to patch coordinates ``dest`` (flat indices)."""

    dest: np.ndarray
    src: np.ndarray


@dataclass(frozen=True, eq=False)
class Patch:
    images: dict[str, np.ndarray]
    mask: np.ndarray
    origin: tuple[int, int, int]
    scheme: str
    spacing: tuple[float, float, float]
    case_id: str = ""
    lesion_id: int | None = None
    rng_seed: int | None = None
    transfers: tuple[Transfer, ...] = ()
    fallback: bool = False

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.mask.shape)  # type: ignore[return-value]

    def digest(self) -> str:
        h = hashlib.sha256()
        meta = {
            "origin": self.origin,
            "scheme": self.scheme,
            "lesion_id": self.lesion_id,
            "rng_seed": self.rng_seed,
            "fallback": self.fallback,
        }
        h.update(json.dumps(meta, sort_keys=True).encode())
        for name in sorted(self.images):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.images[name]).tobytes())
        h.update(np.ascontiguousarray(self.mask).tobytes())
        for t in self.transfers:
            h.update(t.dest.tobytes())
            h.update(t.src.tobytes())
        return h.hexdigest()


class ShuffleCase:
    """Images plus a reference label mask of one case, with cached helper arrays.

    ``labels`` is the ground truth when generating training patches and the
    predicted mask when scoring detections.
    """

    def __init__(self, case_id: str, images: Mapping[str, np.ndarray | VoxelGrid], labels, spacing=None):
        lab = labels.data if isinstance(labels, VoxelGrid) else np.asarray(labels)
        if spacing is None:
            if not isinstance(labels, VoxelGrid):
                raise GeometryError("spacing is required when labels is a bare array")
            spacing = labels.spacing
        self.case_id = case_id
        self.spacing = check_spacing(spacing)
        self.labels = lab
        self.dims = tuple(int(d) for d in lab.shape)
        if not images:
            raise ValueError("at least one image phase is required")
        self.images: dict[str, np.ndarray] = {}
        for name, img in images.items():
            arr = img.data if isinstance(img, VoxelGrid) else np.asarray(img)
            if arr.shape != lab.shape:
                raise GeometryError(f"phase {name} dims {arr.shape} differ from mask dims {lab.shape}")
            self.images[name] = arr
        self.liver = lab == ClassLabel.LIVER
        self.lesion = lesion_voxels(lab)
        self.region = self.liver | self.lesion
        self._lock = threading.Lock()
        self._neg_origins: dict[tuple, np.ndarray] = {}
        self._donor_cache: tuple | None = None
        self._donor_offsets: dict = {}

    @classmethod
    def from_grids(cls, case_id: str, images: Mapping[str, VoxelGrid], labels: VoxelGrid) -> "ShuffleCase":
        return cls(case_id, images, labels)

    def check_fits(self, patch_size) -> None:
        if any(d < p for d, p in zip(self.dims, patch_size)):
            raise GeometryError(f"volume dims {self.dims} smaller than patch size {tuple(patch_size)}")

    def negative_origins(self, cfg: ShuffleConfig) -> np.ndarray:
        """Flat indices (over the origin grid) of valid lesion-free windows."""
        key = (cfg.patch_size, cfg.min_liver_fraction)
        with self._lock:
            if key not in self._neg_origins:
                self._neg_origins[key] = self._compute_negative_origins(cfg)
            return self._neg_origins[key]

    def _compute_negative_origins(self, cfg: ShuffleConfig) -> np.ndarray:
        self.check_fits(cfg.patch_size)
        liver_sum = _window_sums(self.liver, cfg.patch_size)
        lesion_sum = _window_sums(self.lesion, cfg.patch_size)
        need = cfg.min_liver_fraction * float(np.prod(cfg.patch_size))
        return np.flatnonzero((lesion_sum == 0) & (liver_sum >= need))

    def donor_domain(self) -> tuple[tuple[int, int, int], np.ndarray]:
        """Liver bounding box corner and the "not liver" indicator inside it (float64)."""
        with self._lock:
            if self._donor_cache is None:
                if not self.liver.any():
                    raise SamplingExhaustedError(f"case {self.case_id}: liver mask is empty")
                lo, hi = _bbox_of(self.liver)
                box = self.liver[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
                self._donor_cache = (lo, (~box).astype(np.float64))
            return self._donor_cache

    def donor_offsets(self, shape: np.ndarray) -> tuple[tuple[int, int, int], np.ndarray]:
        """Valid donor corners (relative to the liver box) for ``shape``; cached per shape."""
        lo, forbidden = self.donor_domain()
        key = (shape.shape, np.packbits(shape).tobytes())
        with self._lock:
            hit = self._donor_offsets.get(key)
        if hit is None:
            hit = _fit_offsets(forbidden, shape)
            with self._lock:
                if len(self._donor_offsets) >= 256:
                    self._donor_offsets.clear()
                self._donor_offsets[key] = hit
        return lo, hit


def _bbox_of(binary: np.ndarray) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    lo, hi = [], []
    for ax in range(3):
        nz = np.flatnonzero(binary.any(axis=tuple(a for a in range(3) if a != ax)))
        lo.append(int(nz[0]))
        hi.append(int(nz[-1]) + 1)
    return tuple(lo), tuple(hi)  # type: ignore[return-value]


def _window_sums(binary: np.ndarray, size: Sequence[int]) -> np.ndarray:
    """Sum of ``binary`` over every window of ``size`` fully inside the volume."""
    s = np.zeros(tuple(d + 1 for d in binary.shape), dtype=np.int32)
    s[1:, 1:, 1:] = binary.astype(np.int32).cumsum(0).cumsum(1).cumsum(2)
    pz, py, px = size
    Z, Y, X = (d - p + 1 for d, p in zip(binary.shape, size))
    a = lambda dz, dy, dx: s[dz:dz + Z, dy:dy + Y, dx:dx + X]  # noqa: E731
    return (
        a(pz, py, px) - a(0, py, px) - a(pz, 0, px) - a(pz, py, 0)
        + a(0, 0, px) + a(0, py, 0) + a(pz, 0, 0) - a(0, 0, 0)
    )


def _fit_offsets(forbidden: np.ndarray, shape: np.ndarray) -> np.ndarray:
    """Offsets where ``shape`` placed inside ``forbidden``'s grid covers no forbidden voxel.

    Returns an (n, 3) array of corner offsets.
    """
    if any(f < s for f, s in zip(forbidden.shape, shape.shape)):
        return np.empty((0, 3), dtype=np.int64)
    hits = signal.fftconvolve(forbidden, shape[::-1, ::-1, ::-1].astype(np.float64), mode="valid")
    return np.argwhere(hits < 0.5)


def _crop(case: ShuffleCase, origin, cfg: ShuffleConfig):
    sl = tuple(slice(o, o + p) for o, p in zip(origin, cfg.patch_size))
    region = case.region[sl]
    images = {}
    for name, img in case.images.items():
        out = img[sl].copy()
        out[~region] = np.asarray(cfg.fill_value).astype(out.dtype)
        images[name] = out
    return sl, images


def _lesion_origin(case: ShuffleCase, lesion: Detection, rng: np.random.Generator, cfg: ShuffleConfig):
    case.check_fits(cfg.patch_size)
    ext = lesion.extent
    if any(e > p for e, p in zip(ext, cfg.patch_size)):
        raise LesionTooLargeError(
            f"lesion {lesion.id} bbox extent {ext} exceeds patch size {tuple(cfg.patch_size)}"
        )
    origin = []
    for ax in range(3):
        lo_b, hi_b = lesion.bbox[ax], lesion.bbox[ax + 3]
        lo = max(0, hi_b - cfg.patch_size[ax] + 1)
        hi = min(lo_b, case.dims[ax] - cfg.patch_size[ax])
        origin.append(int(rng.integers(lo, hi + 1)))
    return tuple(origin)


def _require_liver(case: ShuffleCase) -> None:
    if not case.liver.any():
        raise SamplingExhaustedError(f"case {case.case_id}: liver mask is empty")


def sample_patch(
    case: ShuffleCase,
    target: Detection | None,
    rng: np.random.Generator,
    cfg: ShuffleConfig = ShuffleConfig(),
    isolate: bool = False,
    seed: int | None = None,
) -> Patch:
    """Crop an orig-pos patch around ``target`` or, with ``target=None``, an orig-neg patch.

    With ``isolate`` the orig-pos mask holds only the target lesion; otherwise
    every lesion voxel inside the window keeps its label.
    """
    _require_liver(case)
    if target is None:
        valid = case.negative_origins(cfg)
        if valid.size == 0:
            raise SamplingExhaustedError(
                f"case {case.case_id}: no lesion-free window with >= {cfg.min_liver_fraction:.0%} liver"
            )
        grid = tuple(d - p + 1 for d, p in zip(case.dims, cfg.patch_size))
        origin = tuple(int(v) for v in np.unravel_index(valid[rng.integers(valid.size)], grid))
        _, images = _crop(case, origin, cfg)
        mask = np.zeros(cfg.patch_size, dtype=np.uint8)
        return Patch(images, mask, origin, "orig-neg", case.spacing, case.case_id, None, seed)

    origin = _lesion_origin(case, target, rng, cfg)
    sl, images = _crop(case, origin, cfg)
    if isolate:
        mask = np.zeros(int(np.prod(cfg.patch_size)), dtype=np.uint8)
        z, y, x = np.unravel_index(target.indices, case.dims)
        local = np.ravel_multi_index((z - origin[0], y - origin[1], x - origin[2]), cfg.patch_size)
        mask[local] = int(target.label)
        mask = mask.reshape(cfg.patch_size)
    else:
        window = case.labels[sl]
        mask = np.where(lesion_voxels(window), window, 0).astype(np.uint8)
    return Patch(images, mask, origin, "orig-pos", case.spacing, case.case_id, target.id, seed)


def _lesion_shape(lesion: Detection, dims) -> tuple[np.ndarray, np.ndarray]:
    """Boolean mask of the lesion within its bbox, and the lesion's case coordinates."""
    z, y, x = np.unravel_index(lesion.indices, dims)
    z0, y0, x0 = lesion.bbox[:3]
    shape = np.zeros(lesion.extent, dtype=bool)
    shape[z - z0, y - y0, x - x0] = True
    return shape, np.stack([z - z0, y - y0, x - x0], axis=1)


def transplant(
    lesion: Detection,
    case: ShuffleCase,
    rng: np.random.Generator,
    cfg: ShuffleConfig = ShuffleConfig(),
    seed: int | None = None,
) -> Patch:
    """Copy ``lesion`` into the liver tissue of a lesion-free window (scheme shuf-pos).

    When no window offers a placement that lies entirely in liver, an orig-pos
    patch of the lesion is returned instead with ``fallback=True``.
    """
    _require_liver(case)
    ext = lesion.extent
    if any(e > p for e, p in zip(ext, cfg.patch_size)):
        raise LesionTooLargeError(
            f"lesion {lesion.id} bbox extent {ext} exceeds patch size {tuple(cfg.patch_size)}"
        )
    shape, rel = _lesion_shape(lesion, case.dims)
    base = None
    offsets = np.empty((0, 3), dtype=np.int64)
    valid = case.negative_origins(cfg)
    if valid.size:
        for _ in range(cfg.max_attempts):
            base = sample_patch(case, None, rng, cfg, seed=seed)
            sl = tuple(slice(o, o + p) for o, p in zip(base.origin, cfg.patch_size))
            offsets = _fit_offsets((~case.liver[sl]).astype(np.float64), shape)
            if len(offsets):
                break
    if base is None or not len(offsets):
        log.debug(
            "case %s lesion %s: no transplant placement found, falling back to orig-pos",
            case.case_id, lesion.id,
        )
        patch = sample_patch(case, lesion, rng, cfg, isolate=True, seed=seed)
        return Patch(
            patch.images, patch.mask, patch.origin, "orig-pos", patch.spacing,
            patch.case_id, patch.lesion_id, seed, (), True,
        )
    off = offsets[rng.integers(len(offsets))]
    dest_zyx = rel + off
    dest = np.ravel_multi_index(tuple(dest_zyx.T), cfg.patch_size).astype(np.int64)
    src = lesion.indices
    images = {}
    for name, img in base.images.items():
        out = img.copy()
        out.reshape(-1)[dest] = case.images[name].reshape(-1)[src]
        images[name] = out
    mask = np.zeros(int(np.prod(cfg.patch_size)), dtype=np.uint8)
    mask[dest] = int(lesion.label)
    return Patch(
        images, mask.reshape(cfg.patch_size), base.origin, "shuf-pos", case.spacing,
        case.case_id, lesion.id, seed, (Transfer(dest, src),),
    )


def _donor_for(shape: np.ndarray, case: ShuffleCase, rng: np.random.Generator) -> np.ndarray:
    """Corner (case coordinates) of a placement of ``shape`` lying wholly in liver."""
    lo, offsets = case.donor_offsets(shape)
    if not len(offsets):
        raise SamplingExhaustedError(
            f"case {case.case_id}: no lesion-free liver region can host a shape of extent {shape.shape}"
        )
    return offsets[rng.integers(len(offsets))] + np.asarray(lo)


def excise(
    lesion: Detection,
    case: ShuffleCase,
    rng: np.random.Generator,
    cfg: ShuffleConfig = ShuffleConfig(),
    seed: int | None = None,
) -> Patch:
    """Replace the lesion voxels of an orig-pos patch with lesion-free liver (scheme shuf-neg).

    Every lesion piece inside the window is replaced, not only ``lesion``, so
    the result holds no lesion tissue at all; each piece gets its own donor.
    """
    base = sample_patch(case, lesion, rng, cfg, seed=seed)
    return excise_from(base, case, rng, cfg)


def excise_from(base: Patch, case: ShuffleCase, rng: np.random.Generator, cfg: ShuffleConfig = ShuffleConfig()) -> Patch:
    sl = tuple(slice(o, o + p) for o, p in zip(base.origin, cfg.patch_size))
    pieces = extract_lesions(
        np.where(case.lesion[sl], ClassLabel.HCC, 0).astype(np.uint8), case.spacing, min_volume_cm3=0.0
    )
    images = {name: img.copy() for name, img in base.images.items()}
    transfers = []
    for piece in pieces:
        shape, rel = _lesion_shape(piece, cfg.patch_size)
        corner = _donor_for(shape, case, rng)
        src_zyx = rel + corner
        src = np.ravel_multi_index(tuple(src_zyx.T), case.dims).astype(np.int64)
        dest = piece.indices
        for name, out in images.items():
            out.reshape(-1)[dest] = case.images[name].reshape(-1)[src]
        transfers.append(Transfer(dest, src))
    mask = np.zeros(cfg.patch_size, dtype=np.uint8)
    return Patch(
        images, mask, base.origin, "shuf-neg", case.spacing, case.case_id, base.lesion_id,
        base.rng_seed, tuple(transfers),
    )


@dataclass
class PatchFailure:
    lesion_id: int | None
    scheme: str
    index: int
    error: str


def _rng_for(seed: int, case_id: str, lesion_id, scheme: str, index: int):
    s = derive_seed(seed, case_id, lesion_id, scheme, index)
    return s, np.random.default_rng(s)


def make_training_patches(
    case: ShuffleCase,
    per_lesion: int = 20,
    seed: int = 0,
    lesions: Sequence[Detection] | None = None,
    cfg: ShuffleConfig = ShuffleConfig(),
) -> tuple[list[Patch], list[PatchFailure]]:
    """All four schemes for every lesion; orig-neg count matches the orig-pos count.

    Per-patch errors are collected in the second return value instead of raised.
    """
    if lesions is None:
        lesions = list(extract_lesions(case.labels, case.spacing, case_id=case.case_id))
    patches: list[Patch] = []
    failures: list[PatchFailure] = []

    def attempt(lesion_id, scheme, i, fn):
        s, rng = _rng_for(seed, case.case_id, lesion_id, scheme, i)
        try:
            p = fn(rng, s)
        except CascadeError as exc:
            failures.append(PatchFailure(lesion_id, scheme, i, f"{type(exc).__name__}: {exc}"))
            return None
        patches.append(p)
        return p

    n_pos = 0
    for lesion in sorted(lesions, key=lambda d: d.id):
        for i in range(per_lesion):
            if attempt(lesion.id, "orig-pos", i, lambda r, s: sample_patch(case, lesion, r, cfg, seed=s)):
                n_pos += 1
        for i in range(per_lesion):
            attempt(lesion.id, "shuf-pos", i, lambda r, s: transplant(lesion, case, r, cfg, seed=s))
        for i in range(per_lesion):
            attempt(lesion.id, "shuf-neg", i, lambda r, s: excise(lesion, case, r, cfg, seed=s))
    n_neg = n_pos if lesions else per_lesion
    for i in range(n_neg):
        attempt(None, "orig-neg", i, lambda r, s: sample_patch(case, None, r, cfg, seed=s))
    return patches, failures


def make_inference_patches(
    lesion: Detection,
    case: ShuffleCase,
    n: int = 10,
    seed: int = 0,
    shuffle: bool = True,
    cfg: ShuffleConfig = ShuffleConfig(),
) -> list[Patch]:
    """``n`` lesion-containing patches alternating orig-pos and shuf-pos.

    Masks hold only ``lesion`` (or its transplanted copy). With ``shuffle=False``
    all patches are orig-pos.
    """
    out = []
    for i in range(n):
        scheme = "shuf-pos" if shuffle and i % 2 == 1 else "orig-pos"
        s, rng = _rng_for(seed, case.case_id, lesion.id, scheme, i)
        if scheme == "orig-pos":
            out.append(sample_patch(case, lesion, rng, cfg, isolate=True, seed=s))
        else:
            out.append(transplant(lesion, case, rng, cfg, seed=s))
    return out


def write_patch_bundle(patches: Sequence[Patch], out_dir, prefix: str = "patch") -> Path:
    """Write each patch as NIfTI files (one per phase plus the mask) and an ``index.json``."""
    from .volio.nifti import write_volume

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for k, p in enumerate(patches):
        stem = f"{prefix}_{k:04d}"
        files = {}
        for name, img in sorted(p.images.items()):
            fname = f"{stem}_{name}.nii.gz"
            write_volume(VoxelGrid(img, p.spacing), out_dir / fname)
            files[name] = fname
        mname = f"{stem}_mask.nii.gz"
        write_volume(VoxelGrid(p.mask, p.spacing), out_dir / mname)
        index.append(
            {
                "images": files,
                "mask": mname,
                "scheme": p.scheme,
                "origin": list(p.origin),
                "lesion_id": p.lesion_id,
                "seed": p.rng_seed,
                "fallback": p.fallback,
                "case_id": p.case_id,
            }
        )
    path = out_dir / "index.json"
    path.write_text(json.dumps({"patches": index}, indent=1) + "\n")
    return path
