import math

import numpy as np
import pytest

from anchorsfm.geometry import CameraPose, Quaternion


def random_quaternion(rng: np.random.Generator) -> Quaternion:
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-6:
        q = rng.normal(size=4)
    return Quaternion(*q)


def random_pose(rng: np.random.Generator, fov_range=(0.5, 2.5)) -> CameraPose:
    fov = rng.uniform(*fov_range, size=2)
    return CameraPose(random_quaternion(rng), rng.normal(scale=2.0, size=3), fov)


def rotation_angle_deg(q1: Quaternion, q2: Quaternion) -> float:
    dot = abs(float(np.dot(q1.as_array(), q2.as_array())))
    return math.degrees(2.0 * math.acos(min(1.0, dot)))


def quat_component_diff(q1: Quaternion, q2: Quaternion) -> float:
    """Max absolute component difference modulo the double-cover sign."""
    a, b = q1.as_array(), q2.as_array()
    return min(np.abs(a - b).max(), np.abs(a + b).max())


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
