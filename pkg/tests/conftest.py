"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from masklift import CameraIntrinsics, CameraPose, LabeledCloud


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform-ish random rotation matrix via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_pose(rng: np.random.Generator, translation_scale: float = 2.0) -> CameraPose:
    return CameraPose(random_rotation(rng), rng.normal(scale=translation_scale, size=3))


def make_cloud(points, labels) -> LabeledCloud:
    return LabeledCloud(np.asarray(points, dtype=np.float64), np.asarray(labels))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


@pytest.fixture
def simple_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0)
