import numpy as np
import pytest

from surfvem.config import reset_settings
from surfvem.models import DomainKind
from surfvem.services.chart import make_chart
from surfvem.services.vemcore import ElementGeometry


def random_star_polygon(rng: np.random.Generator, n_vertices: int, center=(0.5, 0.5), radius=0.35) -> np.ndarray:
    """Counterclockwise polygon, star-shaped w.r.t. a disk around `center`"""
    gaps = rng.uniform(0.8, 1.2, n_vertices)
    theta = np.cumsum(gaps) / np.sum(gaps) * 2.0 * np.pi + rng.uniform(0.0, 2.0 * np.pi)
    r = radius * rng.uniform(0.6, 1.0, n_vertices)
    return np.asarray(center) + np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def random_convex_polygon(rng: np.random.Generator, n_vertices: int, center=(0.5, 0.5), radius=0.35) -> np.ndarray:
    theta = np.sort(rng.uniform(0.0, 2.0 * np.pi, n_vertices))
    return np.asarray(center) + radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1)


@pytest.fixture(autouse=True)
def clean_settings(monkeypatch, tmp_path):
    """Each test sees the default settings, whatever the shell or a .env exports"""
    import os

    for key in list(os.environ):
        if key.startswith("SURFVEM_"):
            monkeypatch.delenv(key, raising=False)
    monkeypatch.chdir(tmp_path)
    reset_settings()
    yield
    reset_settings()


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def flat_chart():
    return make_chart("flat")


@pytest.fixture
def flat_quarter_chart():
    return make_chart("flat", domain=DomainKind.QUARTER_DISK)


@pytest.fixture
def unit_square_cell():
    return ElementGeometry.from_vertices([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


@pytest.fixture
def pentagon_cell():
    theta = np.pi / 2.0 + 2.0 * np.pi * np.arange(5) / 5.0
    return ElementGeometry.from_vertices(0.5 + 0.4 * np.stack([np.cos(theta), np.sin(theta)], axis=-1))
