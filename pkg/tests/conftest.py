import numpy as np
import pytest

from skinsynth.fixtures import make_lesion, make_plane_mesh, make_skin_texture, make_uv_sphere


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def plane():
    return make_plane_mesh(size=2.0)


@pytest.fixture
def sphere():
    return make_uv_sphere(radius=1.0, rings=12, segments=18, with_anatomy=True)


@pytest.fixture
def skin_texture():
    return make_skin_texture(64, np.random.default_rng(0))


@pytest.fixture
def lesion():
    return make_lesion(32, np.random.default_rng(1), lesion_id=1)
