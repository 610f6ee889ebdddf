import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gauss_avatar import synthetic
from gauss_avatar.body_model import SkinnedBody

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tube():
    return synthetic.make_tube_body()


@pytest.fixture(scope="session")
def small_tube():
    return synthetic.make_tube_body(n_around=8, n_along=6)


@pytest.fixture(scope="session")
def canonical(tube):
    return synthetic.make_canonical_map(tube, size=64)


def single_triangle_body(verts=None, uvs=None) -> SkinnedBody:
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]) if verts is None else np.asarray(verts, float)
    uvs = np.array([[[0.0, 0], [1, 0], [0, 1]]]) if uvs is None else np.asarray(uvs, float)
    return SkinnedBody(
        rest_vertices=verts,
        faces=np.array([[0, 1, 2]]),
        uv_corners=uvs,
        joint_parents=np.array([-1]),
        joint_rest_positions=np.zeros((1, 3)),
        skin_weights=np.ones((3, 1)),
        part_labels=np.zeros(1, dtype=int),
        num_segments=1,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(RESULTS, key=lambda c: int(c[1:])):
        terminalreporter.write_line(RESULTS[cid])
