"""Shared fixtures for the softbound test suite."""

import numpy as np
import pytest

from softbound.services.bounds_service import Box
from softbound.services.network_service import Ensemble


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def sigmoid_box():
    """K=2 box with x1 pinned at 0 and x2 in [-2, 2]."""
    return Box([0.0, -2.0], [0.0, 2.0])


@pytest.fixture
def make_box():
    """Factory for random boxes with widths in [min_width, max_width]."""

    def _make(rng, K, min_width=0.01, max_width=4.0):
        center = rng.normal(0.0, 2.0, size=K)
        width = rng.uniform(min_width, max_width, size=K)
        return Box(center - width / 2, center + width / 2)

    return _make


@pytest.fixture
def sample_in():
    """Uniform samples of shape (n, K) inside a box."""

    def _sample(rng, box, n):
        return box.lower + rng.uniform(size=(n, box.K)) * (box.upper - box.lower)

    return _sample


@pytest.fixture
def small_ensemble():
    return Ensemble.random((4, 8, 3), members=3, seed=7)
