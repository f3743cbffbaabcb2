import numpy as np
import pytest
from hypothesis import settings

from icp_attack.data import generate_shape, make_pair
from icp_attack.pointcloud import PointCloud

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def twist_matrix(xi):
    """4x4 matrix of a (rho, phi) twist in the Lie algebra."""
    rho, phi = np.asarray(xi[:3]), np.asarray(xi[3:])
    m = np.zeros((4, 4))
    m[:3, :3] = [[0, -phi[2], phi[1]], [phi[2], 0, -phi[0]], [-phi[1], phi[0], 0]]
    m[:3, 3] = rho
    return m


def box_scene(n_side=12, size=1.0, seed=0):
    """Points on five faces of a box; every DOF is observable."""
    rng = np.random.default_rng(seed)
    faces = []
    u = rng.uniform(-size, size, size=(5, n_side * n_side, 2))
    faces.append(np.c_[u[0], np.full(len(u[0]), -size)])
    faces.append(np.c_[np.full(len(u[1]), -size), u[1]])
    faces.append(np.c_[np.full(len(u[2]), size), u[2]])
    faces.append(np.c_[u[3][:, 0], np.full(len(u[3]), -size), u[3][:, 1]])
    faces.append(np.c_[u[4][:, 0], np.full(len(u[4]), size), u[4][:, 1]])
    return PointCloud(np.vstack(faces))


@pytest.fixture(scope="session")
def rectangle_pair():
    shape = generate_shape("rectangle", seed=11)
    return make_pair(shape, "shapenet", seed=5, pair_id="rect")


@pytest.fixture(scope="session")
def small_rectangle_pair():
    """Forty-point scan against a sparse rectangle map, for finite differences."""
    shape = generate_shape("rectangle", density=60, seed=3)
    return make_pair(shape, "shapenet", seed=4, sample_size=40, noise_sigma=0.01, pair_id="small")


# Acceptance verdicts, printed as one line each after the run.
VERDICTS: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
