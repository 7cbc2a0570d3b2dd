"""Shared fixtures for spatial-crt tests."""

from pathlib import Path

import numpy as np
import pytest

from spatial_crt.clustering import Clustering
from spatial_crt.estimators import UnitPanel
from spatial_crt.geometry import PointSet

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def line4():
    """Four units on a line: two pairs ten apart."""
    return PointSet(np.array([[0.0], [1.0], [10.0], [11.0]]))


@pytest.fixture
def line4_clustering():
    return Clustering(
        medoids=np.array([0, 2]),
        assignment=np.array([0, 0, 1, 1]),
        radii=np.array([1.0, 1.0]),
        cost=2.0,
    )


@pytest.fixture(autouse=True)
def isolated_cache(tmp_path, monkeypatch):
    """Keep the clustering cache out of the user's home directory."""
    monkeypatch.setenv("SPATIAL_CRT_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.delenv("SOURCE_DATE_EPOCH", raising=False)


def horvitz_thompson(panel: UnitPanel) -> float:
    """Unnormalized inverse-propensity contrast, used to check unbiasedness."""
    return float(np.mean(panel.T1 * panel.Y / panel.p1 - panel.T0 * panel.Y / panel.p0))
