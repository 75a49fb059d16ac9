import numpy as np
import pytest

from bones4d.fields import CanonicalSdf, pretrain_sdf_to_sphere
from bones4d.optim import ParamStore


@pytest.fixture(scope="session")
def sphere_sdf_model():
    """Default-spec SDF trunk pre-fit to the 0.1 m sphere (shared, read-only)."""
    rng = np.random.default_rng(0)
    store = ParamStore()
    sdf = CanonicalSdf(store, rng)
    pretrain_sdf_to_sphere(sdf, store, rng, steps=2000, batch=512)
    return store, sdf
