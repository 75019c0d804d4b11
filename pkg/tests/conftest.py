import numpy as np
import pytest

from mvcorr import _kernels
from mvcorr.synthetic import SceneSpec, generate


@pytest.fixture(scope="session")
def plane_scene():
    return generate(SceneSpec(kind="plane", n_views=4, size=128, seed=3))


@pytest.fixture(scope="session")
def occluder_scene():
    return generate(SceneSpec(kind="plane_with_occluder", n_views=4, size=128, seed=5))


@pytest.fixture(scope="session")
def mirrored_scene():
    return generate(SceneSpec(kind="mirrored_texture", n_views=4, size=128, seed=2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=_kernels.available())
def backend(request):
    """Run a test once per importable kernel backend."""
    previous = _kernels.BACKEND
    _kernels.use(request.param)
    yield request.param
    _kernels.use(previous)
