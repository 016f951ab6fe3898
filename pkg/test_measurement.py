"""
Tests for the measurement service and the laboratory.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from models import BoundaryDataSpec, DiffusionSpec, NoiseSpec
from services.coefficient_service import build_bundle, interior_bump, interior_bump_bundle
from services.forward_service import eigen_source_bundle, forward_solve
from services.measurement_service import (
    Laboratory,
    MeasurementError,
    ProbeOutsideDomainError,
    boundary_data_from_spec,
    boundary_data_through,
    bump_profile,
    cauchy_record,
    interior_temperature,
    linearisation_rate,
    linearised_dn,
    probe_temperature_flux,
    voltage,
)
from utils.grid import BoundaryField, build_grid


def _data(grid):
    gamma = (BoundaryField.from_function(grid, lambda x: 1.0 + 0.2 * x[:, 0]),)
    tau = BoundaryField.from_function(grid, lambda x: 0.4 * x[:, 1])
    return gamma, tau


# ===== Boundary data =====

def test_bump_profile_is_nodal_delta(grid9):
    node = grid9.node_id([0, 4])
    profile = bump_profile(grid9, node, 1.0)
    assert profile[grid9.boundary_position[node]] == pytest.approx(1.0)
    assert np.count_nonzero(profile) == 1


def test_boundary_data_through_anchors(grid9):
    a, b = grid9.node_id([0, 2]), grid9.node_id([8, 6])
    gamma, tau = boundary_data_through(grid9, [(a, [2.0, 0.5]), (b, [3.0, -0.5])], [1.0, 0.0], radius=2.0)
    assert gamma[0].at(a) == pytest.approx(2.0)
    assert tau.at(b) == pytest.approx(-0.5)
    far = grid9.node_id([4, 0])
    assert gamma[0].at(far) == pytest.approx(1.0)
    assert tau.at(far) == pytest.approx(0.0)


def test_overlapping_bumps_rejected(grid9):
    a, b = grid9.node_id([0, 2]), grid9.node_id([0, 3])
    with pytest.raises(MeasurementError):
        boundary_data_through(grid9, [(a, [2.0, 0.5]), (b, [3.0, 0.5])], [1.0, 0.0], radius=2.0)


def test_anchor_must_be_boundary_node(grid9):
    with pytest.raises(MeasurementError):
        boundary_data_through(grid9, [(grid9.node_id([4, 4]), [2.0, 0.5])], [1.0, 0.0])


def test_boundary_data_from_spec(grid9):
    spec = BoundaryDataSpec(gamma=[1.5, "1 + x2"], tau="0.5*x1", label="mixed")
    gamma, tau = boundary_data_from_spec(grid9, spec, 2)
    node = grid9.node_id([8, 4])
    assert gamma[0].at(node) == pytest.approx(1.5)
    assert gamma[1].at(node) == pytest.approx(1.5)
    assert tau.at(node) == pytest.approx(0.5)
    with pytest.raises(MeasurementError):
        boundary_data_from_spec(grid9, spec, 1)


# ===== Measurements of a state =====

def test_constant_concentrations_have_zero_species_flux(neutral_bundle, grid9, options):
    gamma = (BoundaryField.constant(grid9, 1.0), BoundaryField.constant(grid9, 0.7))
    tau = BoundaryField.from_function(grid9, lambda x: x[:, 0])
    state = forward_solve(neutral_bundle, gamma, tau, options, max_workers=2)
    record = cauchy_record(state, neutral_bundle)
    for flux in record.species_flux:
        assert_allclose(flux.values, 0.0, atol=1e-9)
    # Neutral species: T is the harmonic extension of tau = x1.
    assert_allclose(record.temperature_flux.values, grid9.normals[:, 0], atol=1e-7)
    assert record.reduced().temperature_flux is None


def test_voltage_and_probes(affine_bundle, grid9, options):
    gamma, tau = _data(grid9)
    state = forward_solve(affine_bundle, gamma, tau, options, max_workers=2)
    a, b = int(grid9.boundary_ids[0]), int(grid9.boundary_ids[-1])
    assert voltage(state, a, b) == pytest.approx(-voltage(state, b, a))
    assert voltage(state, a, b, affine_bundle.potential) == pytest.approx(voltage(state, a, b), abs=1e-9)
    with pytest.raises(MeasurementError):
        voltage(state, grid9.node_id([4, 4]), b)

    centre = grid9.coordinates[grid9.node_id([4, 4])]
    assert interior_temperature(state, centre[None, :])[0] == pytest.approx(state.temperature.values[grid9.node_id([4, 4])])
    with pytest.raises(ProbeOutsideDomainError):
        interior_temperature(state, np.array([[1.2, 0.5]]))

    probed = probe_temperature_flux(state, grid9.spacing[0])
    assert probed.values.shape == (grid9.boundary_ids.size,)
    with pytest.raises(MeasurementError):
        probe_temperature_flux(state, 0.0)


# ===== Laboratory =====

def test_laboratory_caches_and_records(affine_bundle, grid9, options):
    lab = Laboratory(affine_bundle, grid9, options, max_workers=2)
    gamma, tau = _data(grid9)
    first = lab.cauchy(gamma, tau, label="one")
    second = lab.cauchy(gamma, tau, label="one")
    assert np.array_equal(first.species_flux[0].values, second.species_flux[0].values)
    assert len(lab.experiment_id(gamma, tau)) == 12
    families = sorted({r.family for r in lab.records})
    assert families == ["species_flux", "temperature_flux"]
    assert all(r.noise_seed is None for r in lab.records)


def test_laboratory_cache_is_bounded(affine_bundle, grid9, options):
    lab = Laboratory(affine_bundle, grid9, options, max_workers=2, cache_size=1, keep_records=False)
    gamma, tau = _data(grid9)
    first = lab.cauchy(gamma, tau)
    lab.cauchy(gamma, BoundaryField.constant(grid9, 0.1))
    assert lab.cached_experiments == 1
    assert lab.records == []
    again = lab.cauchy(gamma, tau)
    assert_allclose(again.species_flux[0].values, first.species_flux[0].values, atol=1e-12)
    lab.clear()
    assert lab.cached_experiments == 0
    with pytest.raises(MeasurementError):
        Laboratory(affine_bundle, grid9, options, cache_size=0)


def test_interior_bump_leaves_boundary_record_unchanged(affine_bundle, grid9, options):
    bumped = interior_bump_bundle(affine_bundle, interior_bump([0.5, 0.5], 0.2), 0.05)
    plain = Laboratory(affine_bundle, grid9, options, max_workers=2)
    other = Laboratory(bumped, grid9, options, max_workers=2)
    gamma, tau = _data(grid9)
    reference = int(grid9.boundary_ids[0])

    first, second = plain.cauchy(gamma, tau), other.cauchy(gamma, tau)
    assert_allclose(second.species_flux[0].values, first.species_flux[0].values, atol=1e-6)
    assert_allclose(second.temperature_flux.values, first.temperature_flux.values, atol=1e-6)
    assert_allclose(other.voltages(gamma, tau, reference).values, plain.voltages(gamma, tau, reference).values, atol=1e-6)

    centre = np.array([[0.5, 0.5]])
    shift = other.temperatures(gamma, tau, centre)[0] - plain.temperatures(gamma, tau, centre)[0]
    # phi has unit s coefficient, so T moves by the bump amplitude at its centre.
    assert abs(shift) == pytest.approx(0.05, abs=1e-6)


def test_laboratory_voltages_vanish_at_reference(affine_bundle, grid9, options):
    lab = Laboratory(affine_bundle, grid9, options, max_workers=2)
    gamma, tau = _data(grid9)
    reference = int(grid9.boundary_ids[3])
    voltages = lab.voltages(gamma, tau, reference)
    assert voltages.at(reference) == 0.0
    assert lab.voltage(gamma, tau, int(grid9.boundary_ids[0]), reference) == pytest.approx(
        voltages.at(int(grid9.boundary_ids[0]))
    )
    with pytest.raises(MeasurementError):
        lab.voltages(gamma, tau, grid9.node_id([4, 4]))


def test_noise_is_seeded(affine_bundle, grid9, options):
    noise = NoiseSpec(flux_std=1e-3, voltage_std=1e-3, temperature_std=1e-3)
    gamma, tau = _data(grid9)
    exact = Laboratory(affine_bundle, grid9, options, max_workers=2).cauchy(gamma, tau)
    one = Laboratory(affine_bundle, grid9, options, noise=noise, seed=5, max_workers=2).cauchy(gamma, tau)
    two = Laboratory(affine_bundle, grid9, options, noise=noise, seed=5, max_workers=2).cauchy(gamma, tau)
    other = Laboratory(affine_bundle, grid9, options, noise=noise, seed=6, max_workers=2).cauchy(gamma, tau)
    assert np.array_equal(one.species_flux[0].values, two.species_flux[0].values)
    assert not np.array_equal(one.species_flux[0].values, other.species_flux[0].values)
    deviation = one.species_flux[0].values - exact.species_flux[0].values
    assert 1e-4 < np.std(deviation) < 1e-2


def test_laboratory_dimension_mismatch(affine_bundle):
    with pytest.raises(MeasurementError):
        Laboratory(affine_bundle, build_grid(3, [5, 5, 5]))


def test_public_data_hides_coefficients(affine_bundle, grid9):
    public = Laboratory(affine_bundle, grid9).public
    assert public.species == 1
    assert public.lam == affine_bundle.lam
    assert not hasattr(public, "potential")
    assert not hasattr(public, "diffusion")


# ===== Linearisation =====

def test_linearised_map_for_constant_diffusion(neutral_bundle, grid9):
    """With D = 1 the linearised map is the Laplace DN map; x1 has flux N_1."""
    eta0 = BoundaryField.constant(grid9, 0.0)
    f = [BoundaryField.from_function(grid9, lambda x: x[:, 0])] * 2
    fluxes = linearised_dn(neutral_bundle, [1.0, 1.0], eta0, f, tol=1e-12)
    for flux in fluxes:
        assert_allclose(flux.values, grid9.normals[:, 0], atol=1e-8)


def test_linearisation_rate_is_first_order(affine_bundle, grid9):
    f = [BoundaryField.from_function(grid9, lambda x: x[:, 0])]
    report = linearisation_rate(affine_bundle, [1.0], f, [2.0 ** -k for k in range(1, 7)], max_workers=2)
    assert all(report.converged)
    assert report.fit_points == 4
    assert 0.8 < report.slope < 1.3
    assert report.bound_constant > 0
    t = 2.0 ** -3
    assert report.errors[report.t_values.index(t)] <= report.bound_constant * t


def test_linearisation_is_exact_for_constant_diffusion(affine_spec, grid9):
    spec = affine_spec.model_copy(update={"diffusion": [DiffusionSpec(kind="constant", value=1.3)]})
    bundle = build_bundle(spec, 2)
    f = [BoundaryField.from_function(grid9, lambda x: x[:, 0])]
    report = linearisation_rate(bundle, [1.0], f, [2.0 ** -k for k in range(1, 7)], max_workers=2)
    assert all(report.converged)
    assert max(report.errors) <= 1e-8


def test_linearisation_rejects_sources_and_bad_steps(affine_bundle, grid9):
    f = [BoundaryField.from_function(grid9, lambda x: x[:, 0])]
    with pytest.raises(MeasurementError):
        linearisation_rate(eigen_source_bundle(2), [0.0], f)
    with pytest.raises(MeasurementError):
        linearisation_rate(affine_bundle, [1.0], f, [0.5, 0.5, 0.25])
