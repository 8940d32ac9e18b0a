"""File formats: NIfTI-1 subset, RLE masks, detection JSON, case manifests."""

from .manifest import CaseManifest, read_manifest, write_manifest
from .nifti import read_probmaps, read_volume, write_probmaps, write_volume
from .rle import RleMask, rle_decode, rle_encode

__all__ = [
    "CaseManifest",
    "RleMask",
    "read_detections",
    "read_manifest",
    "read_probmaps",
    "read_volume",
    "rle_decode",
    "rle_encode",
    "write_detections",
    "write_manifest",
    "write_probmaps",
    "write_volume",
]


def __getattr__(name):
    # detjson depends on ..detection, which itself needs .rle; import on demand
    if name in ("read_detections", "write_detections"):
        from . import detjson

        return getattr(detjson, name)
    raise AttributeError(name)
