"""Shared fixtures for the test suite."""

import logging

import pytest

from config import get_settings
from models import ModelSpec, PicardOptions, PotentialSpec, DiffusionSpec
from services.coefficient_service import build_bundle
from utils.grid import build_grid

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)


@pytest.fixture(autouse=True)
def _isolated_settings(monkeypatch, tmp_path):
    """Fresh cached settings per test with a small worker pool."""
    monkeypatch.setenv("ELECTROLYSER_MAX_WORKERS", "2")
    monkeypatch.setenv("ELECTROLYSER_OUTPUT_DIR", str(tmp_path / "runs"))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def grid9():
    return build_grid(2, [9, 9])


@pytest.fixture
def grid13():
    return build_grid(2, [13, 13])


@pytest.fixture
def options():
    return PicardOptions(linear_tol=1e-11, fixed_point_tol=1e-10, pde_tol=1e-6)


@pytest.fixture
def affine_spec():
    """One charged species, affine potential, temperature-dependent diffusion."""
    return ModelSpec(
        species=1,
        charges=[1.0],
        potential=PotentialSpec(kind="affine", p_coefficients=[0.2], s_coefficient=1.0, x_coefficients=[0.1, 0.0]),
        diffusion=[DiffusionSpec(kind="affine", value=1.0, s_coefficient=0.1)],
        lam=0.5,
        upper=10.0,
    )


@pytest.fixture
def affine_bundle(affine_spec):
    return build_bundle(affine_spec, 2)


@pytest.fixture
def neutral_bundle():
    """Two uncharged species with constant diffusion."""
    spec = ModelSpec(
        species=2,
        charges=[0.0, 0.0],
        potential=PotentialSpec(kind="affine", p_coefficients=[0.1, 0.1], s_coefficient=1.0),
        diffusion=[DiffusionSpec(kind="constant", value=1.0)],
    )
    return build_bundle(spec, 2)
