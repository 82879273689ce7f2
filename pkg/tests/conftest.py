import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from occrefine.geometry import Pose
from occrefine.voxel import GridSpec, VoxelGrid

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    return GridSpec((6, 5, 4), (0.0, -0.5, -0.4), (0.2, 0.2, 0.2))


def random_grid(rng, spec, occupancy=0.3, num_classes=19, frame_id=0):
    labels = np.where(rng.random(spec.dims) < occupancy, rng.integers(1, num_classes + 1, size=spec.dims), 0)
    return VoxelGrid(spec, labels.astype(np.uint8), frame_id, num_classes)


def random_pose(rng, yaw=0.3, shift=1.0):
    return Pose.rot_z(rng.normal() * yaw, rng.normal(size=3) * shift)
