import numpy as np
import pytest

from livercascade.phantom import Ellipsoid, LesionSpec, PhantomSpec, SpuriousBlob, generate_case, random_spec


def box_labels(dims, boxes):
    """Label array with axis-aligned boxes painted in order: (label, z0, y0, x0, z1, y1, x1)."""
    out = np.zeros(dims, dtype=np.uint8)
    for label, z0, y0, x0, z1, y1, x1 in boxes:
        out[z0:z1, y0:y1, x0:x1] = label
    return out


@pytest.fixture(scope="session")
def small_phantom():
    return generate_case(random_spec(11))


@pytest.fixture(scope="session")
def roomy_phantom():
    """Lesions confined to the upper z band so lesion-free liver windows exist."""
    spec = random_spec(
        5,
        dims=(40, 192, 192),
        spacing=(2.5, 0.8, 0.8),
        n_lesions=(3, 3),
        n_spurious=(1, 1),
        lesion_z_band=(0.55, 0.9),
        confidence_bands=(((0.6, 0.9), 1.0),),
    )
    return generate_case(spec)


def simple_spec(lesions=(), spurious=(), dims=(40, 192, 192), spacing=(2.5, 0.8, 0.8), seed=0, case_id="hand"):
    liver = Ellipsoid((20, 96, 96), (40.0, 65.0, 65.0))
    return PhantomSpec(case_id, dims, spacing, seed, liver, tuple(lesions), (), tuple(spurious))


@pytest.fixture
def make_spec():
    return simple_spec


__all__ = ["box_labels", "simple_spec", "LesionSpec", "SpuriousBlob", "Ellipsoid"]
