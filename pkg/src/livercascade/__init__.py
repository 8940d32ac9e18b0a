"""Post-processing for multi-sensitivity liver lesion detection.

Probability maps are turned into label masks at several lesion sensitivities,
split into lesion instances, filtered by a patch-based reclassification stage
and summarised per patient; the evaluation suite scores the result against a
ground truth.
"""

__version__ = "0.1.0"

from .core import MALIGNANT, ClassLabel, ProbMaps, VoxelGrid, priority_max, voxel_volume_cm3
from .detection import Detection, DetectionSet
from .errors import CascadeError, ContractViolation, InputError
from .matcher import MatchReport, match_predictions, match_sets
from .metrics import PatientClassification, classify_patient, joint_classify, lesion_metrics, patient_metrics
from .seg2det import extract_lesions, extract_liver_mask
from .sensitivity import masks_at_sensitivities, sensitivity_mask

__all__ = [
    "MALIGNANT",
    "CascadeError",
    "ClassLabel",
    "ContractViolation",
    "Detection",
    "DetectionSet",
    "InputError",
    "MatchReport",
    "PatientClassification",
    "ProbMaps",
    "VoxelGrid",
    "classify_patient",
    "extract_lesions",
    "extract_liver_mask",
    "joint_classify",
    "lesion_metrics",
    "masks_at_sensitivities",
    "match_predictions",
    "match_sets",
    "patient_metrics",
    "priority_max",
    "sensitivity_mask",
    "voxel_volume_cm3",
]
