import numpy as np
import pytest

from spinewarp.atlas import build_atlas_from_phantom
from spinewarp.phantom import FractureSpec, PhantomSpec, apply_fracture, generate_healthy
from spinewarp.straighten import straighten_spine


@pytest.fixture(scope="session")
def healthy_case():
    """(ct, mask, truth) of a default healthy phantom."""
    return generate_healthy(PhantomSpec(seed=1))


@pytest.fixture(scope="session")
def fractured_case(healthy_case):
    """(ct, mask, truth) with an L2 wedge fracture and 10 degree kink."""
    ct, mask, truth = healthy_case
    return apply_fracture(ct, mask, truth, FractureSpec(level=21, height_factor=0.6,
                                                        wedge=True, kink_deg=10.0))


@pytest.fixture(scope="session")
def unit_atlas():
    """Atlas built from an independent healthy phantom (different seed)."""
    _, mask, _ = generate_healthy(PhantomSpec(seed=2))
    return build_atlas_from_phantom(mask)


@pytest.fixture(scope="session")
def pipeline_run(fractured_case, unit_atlas):
    """One full straightening run on the fractured fixture."""
    ct, mask, _ = fractured_case
    return straighten_spine(ct, mask, [21], unit_atlas)


@pytest.fixture(scope="session")
def pipeline_inpaint(pipeline_run):
    """(straightened run, inpainting result for the fractured vertebra)."""
    from spinewarp.inpaint import inpaint_vertebra

    result = inpaint_vertebra(pipeline_run.ct, pipeline_run.mask, 21,
                              pipeline_run.scaled_atlas)
    return pipeline_run, result


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(12345))
