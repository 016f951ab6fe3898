"""
Tests for the reconstruction service.
"""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from services.coefficient_service import DiffusionFamily
from services.measurement_service import Laboratory
from services.reconstruction_service import (
    BOUNDARY_VOLTAGE,
    INTERIOR_TEMPERATURE,
    DiffusionFitProblem,
    IdentifiabilityError,
    ReconstructionError,
    ReconstructionTable,
    TableRangeError,
    collect_fit_dataset,
    default_fit_experiments,
    fit_affine_potential,
    fit_diffusion,
    reconstruct_phi_boundary,
    reconstruct_phi_gradients_boundary,
    reconstruct_phi_interior,
    recover_normal_x_gradient,
)

Z0 = [1.0, 0.0]
S_GRID = [-1.0, -0.5, 0.0, 0.5, 1.0]


@pytest.fixture
def lab(affine_bundle, grid9, options):
    return Laboratory(affine_bundle, grid9, options, max_workers=2)


@pytest.fixture
def reference(grid9):
    return (Z0, grid9.node_id([0, 0]))


@pytest.fixture
def boundary_table(lab, reference):
    return reconstruct_phi_boundary(lab, [[1.0, s] for s in S_GRID], reference, max_workers=2)


# ===== Table =====

def test_table_rejects_duplicates_and_nan():
    rows = [
        {"p1": 1.0, "s_or_t": 0.0, "x": 0.0, "y": 0.0, "value": 0.1, "provenance": BOUNDARY_VOLTAGE, "node_id": 0},
        {"p1": 1.0, "s_or_t": 0.0, "x": 0.0, "y": 0.0, "value": 0.2, "provenance": BOUNDARY_VOLTAGE, "node_id": 0},
    ]
    with pytest.raises(ReconstructionError):
        ReconstructionTable.from_rows(1, 2, Z0, [0.0, 0.0], rows)
    rows[1].update({"x": 1.0, "value": float("nan")})
    with pytest.raises(ReconstructionError):
        ReconstructionTable.from_rows(1, 2, Z0, [0.0, 0.0], rows)


def test_table_merge_requires_same_reference():
    row = {"p1": 1.0, "s_or_t": 0.0, "x": 0.0, "y": 0.0, "value": 0.1, "provenance": BOUNDARY_VOLTAGE, "node_id": 0}
    first = ReconstructionTable.from_rows(1, 2, Z0, [0.0, 0.0], [row])
    other = ReconstructionTable.from_rows(1, 2, [2.0, 0.0], [0.0, 0.0], [dict(row, x=1.0)])
    with pytest.raises(ReconstructionError):
        first.merge(other)
    merged = first.merge(ReconstructionTable.from_rows(1, 2, Z0, [0.0, 0.0], [dict(row, x=1.0)]))
    assert len(merged) == 2
    assert list(merged.to_frame().columns) == ["p1", "s_or_t", "x", "y", "value", "provenance"]


# ===== Boundary reconstruction =====

def test_boundary_reconstruction_up_to_constant(boundary_table, affine_bundle, grid9):
    assert len(boundary_table) == len(S_GRID) * grid9.boundary_ids.size
    assert boundary_table.skipped == []
    stats = boundary_table.offset_statistics(affine_bundle.potential)
    assert stats.std < 1e-9
    # phi_hat(z0, x0) = 0, so the common offset is phi(z0, x0).
    assert stats.mean == pytest.approx(float(affine_bundle.potential.value([[1.0]], [0.0], [[0.0, 0.0]])[0]), abs=1e-9)
    assert boundary_table.lookup(Z0, grid9.node_id([0, 0])) == pytest.approx(0.0, abs=1e-12)


def test_boundary_reconstruction_is_gauge_invariant(affine_bundle, grid9, options, reference, boundary_table):
    shifted = affine_bundle.with_potential(affine_bundle.potential.shifted(7.0))
    lab = Laboratory(shifted, grid9, options, max_workers=2)
    again = reconstruct_phi_boundary(lab, [[1.0, s] for s in S_GRID], reference, max_workers=2)
    assert_allclose(again.frame["value"].to_numpy(), boundary_table.frame["value"].to_numpy(), atol=1e-9)


def test_boundary_reconstruction_checks_sample_size(lab, reference):
    with pytest.raises(ReconstructionError):
        reconstruct_phi_boundary(lab, [[1.0, 0.0, 0.0]], reference)


def test_boundary_gradients(lab, reference, grid9):
    node = grid9.node_id([0, 4])
    estimate = reconstruct_phi_gradients_boundary(lab, [1.2, 0.3], node, reference, delta=1e-3, max_workers=2)
    assert_allclose(estimate.state_partials, [0.2, 1.0], atol=1e-6)
    assert estimate.normal_axis == 0
    assert estimate.tangential[1] == pytest.approx(0.0, abs=1e-8)
    assert not estimate.flagged


def test_boundary_gradient_at_corner_is_flagged(lab, reference, grid9):
    corner = grid9.node_id([8, 8])
    estimate = reconstruct_phi_gradients_boundary(lab, [1.0, 0.2], corner, reference, max_workers=2)
    assert estimate.flagged


def test_normal_gradient_recovery(lab, reference, grid9):
    """phi has x-gradient (0.1, 0); the normal at the left face is (-1, 0)."""
    node = grid9.node_id([0, 4])
    normal = recover_normal_x_gradient(lab, lab.public, [1.0, 0.2], node, reference, partial_s=1.0)
    assert normal == pytest.approx(-0.1, abs=1e-5)


def test_affine_potential_from_table(lab, reference):
    samples = [[p, s] for p in (1.0, 1.25) for s in S_GRID]
    table = reconstruct_phi_boundary(lab, samples, reference, max_workers=2)
    potential, report = fit_affine_potential(table, BOUNDARY_VOLTAGE)
    assert report.samples == len(table)
    assert report.p_coefficients == pytest.approx([0.2], abs=1e-8)
    assert report.s_coefficient == pytest.approx(1.0, abs=1e-8)
    assert report.x_coefficients == pytest.approx([0.1, 0.0], abs=1e-8)
    # phi_hat vanishes at (z0, x0), so the gauge constant is -phi(z0, x0).
    assert report.offset == pytest.approx(-0.2, abs=1e-8)
    assert report.max_residual < 1e-8
    assert float(potential.value([[1.0]], [0.0], [[0.0, 0.0]])[0]) == pytest.approx(0.0, abs=1e-8)


def test_affine_potential_needs_varying_pressure(boundary_table):
    with pytest.raises(ReconstructionError):
        fit_affine_potential(boundary_table)


# ===== Interior reconstruction =====

def test_interior_reconstruction_shares_offset(lab, boundary_table, affine_bundle):
    interior = reconstruct_phi_interior(lab, boundary_table, [1.0], [-0.3, 0.0, 0.3], [0.5, 0.5], max_workers=2)
    assert len(interior) == 3
    boundary_offset = boundary_table.offset_statistics(affine_bundle.potential).mean
    offsets = interior.offsets(affine_bundle.potential, INTERIOR_TEMPERATURE)
    assert_allclose(offsets, boundary_offset, atol=1e-6)

    merged = boundary_table.merge(interior)
    assert merged.offset_statistics(affine_bundle.potential).std < 1e-6


def test_full_table_is_gauge_invariant(lab, affine_bundle, grid9, options, reference, boundary_table):
    interior = reconstruct_phi_interior(lab, boundary_table, [1.0], [-0.3, 0.3], [0.5, 0.5], max_workers=2)
    table = boundary_table.merge(interior)

    shifted = affine_bundle.with_potential(affine_bundle.potential.shifted(7.0))
    shifted_lab = Laboratory(shifted, grid9, options, max_workers=2)
    shifted_boundary = reconstruct_phi_boundary(shifted_lab, [[1.0, s] for s in S_GRID], reference, max_workers=2)
    shifted_interior = reconstruct_phi_interior(
        shifted_lab, shifted_boundary, [1.0], [-0.3, 0.3], [0.5, 0.5], max_workers=2
    )
    again = shifted_boundary.merge(shifted_interior)

    assert len(again) == len(table)
    assert table.max_difference(again) < 1e-8
    with pytest.raises(ReconstructionError):
        table.max_difference(boundary_table)


def test_interior_reconstruction_skips_uncovered_values(lab, boundary_table):
    interior = reconstruct_phi_interior(lab, boundary_table, [1.0], [0.0, 5.0], [0.5, 0.5], max_workers=2)
    assert len(interior) == 1
    assert interior.skipped[0]["s"] == 5.0


def test_interior_reconstruction_needs_tabulated_concentration(lab, boundary_table):
    with pytest.raises(TableRangeError):
        reconstruct_phi_interior(lab, boundary_table, [3.0], [0.0], [0.5, 0.5])


# ===== Diffusion fit =====

def _fit_specs(count):
    return default_fit_experiments(1, 2)[:count]


def test_diffusion_fit_recovers_parameters(affine_bundle, grid9, options):
    family = DiffusionFamily("theta1 + theta2*s", 1, 2, 2, affine_bundle.lam, affine_bundle.upper)
    truth = affine_bundle.with_diffusion([family.build([1.0, 0.3])])
    lab = Laboratory(truth, grid9, options, max_workers=2)
    experiments = collect_fit_dataset(lab, _fit_specs(5))
    problem = DiffusionFitProblem(
        family=family,
        theta_init=np.array([0.8, 0.1]),
        lower=np.array([0.5, 0.0]),
        upper=np.array([2.0, 0.5]),
        potential=affine_bundle.potential,
        public=lab.public,
        grid=grid9,
        experiments=tuple(experiments),
        options=options,
    )
    theta, report = fit_diffusion(lab, problem, max_iterations=30, max_workers=2)
    assert_allclose(theta, [1.0, 0.3], rtol=1e-4)
    assert report.converged
    assert report.jacobian_rank == 2
    assert report.trace[0].note == "initial"
    assert pd.Series([r.loss for r in report.trace if r.accepted]).is_monotonic_decreasing


def test_unidentifiable_family(affine_bundle, grid9, options):
    family = DiffusionFamily("theta1 + theta2", 1, 2, 2, affine_bundle.lam, affine_bundle.upper)
    lab = Laboratory(affine_bundle, grid9, options, max_workers=2)
    problem = DiffusionFitProblem(
        family=family,
        theta_init=np.array([0.5, 0.5]),
        lower=np.array([0.25, 0.25]),
        upper=np.array([2.0, 2.0]),
        potential=affine_bundle.potential,
        public=lab.public,
        grid=grid9,
        experiments=tuple(collect_fit_dataset(lab, _fit_specs(4))),
        options=options,
    )
    with pytest.raises(IdentifiabilityError) as info:
        fit_diffusion(lab, problem, max_workers=2)
    direction = info.value.direction
    assert abs(abs(direction[0]) - abs(direction[1])) < 1e-6


def test_fit_needs_enough_experiments(affine_bundle, grid9, options):
    family = DiffusionFamily("theta1 + theta2*s", 1, 2, 2, affine_bundle.lam, affine_bundle.upper)
    lab = Laboratory(affine_bundle, grid9, options, max_workers=2)
    with pytest.raises(ReconstructionError):
        DiffusionFitProblem(
            family=family,
            theta_init=np.array([0.8, 0.1]),
            lower=np.array([0.5, 0.0]),
            upper=np.array([2.0, 0.5]),
            potential=affine_bundle.potential,
            public=lab.public,
            grid=grid9,
            experiments=tuple(collect_fit_dataset(lab, _fit_specs(3))),
            options=options,
        )


def test_default_fit_experiments():
    specs = default_fit_experiments(2, 2)
    assert len(specs) == 5
    assert specs[0].gamma == ["1 + 0.5*x1"] * 2
    assert [spec.tau for spec in specs] == [-0.5, 0.0, 0.5, 0.25, 0.75]
    assert specs[3].gamma == ["1 + 0.0625*(x1)"] * 2
    assert [spec.label for spec in specs[3:]] == ["probe-0", "probe-1"]
    with pytest.raises(ReconstructionError):
        default_fit_experiments(2, 2, mu=[1.0])


def test_fit_leaves_loss_floor_on_inconsistent_data(affine_bundle, grid9, options):
    """Fluxes measured under two different diffusions cannot be matched by one theta."""
    family = DiffusionFamily("theta1 + theta2*s", 1, 2, 2, affine_bundle.lam, affine_bundle.upper)
    specs = default_fit_experiments(1, 2)
    experiments = []
    for theta in ([1.0, 0.3], [1.4, 0.1]):
        truth = affine_bundle.with_diffusion([family.build(theta)])
        lab = Laboratory(truth, grid9, options, max_workers=2)
        experiments.extend(collect_fit_dataset(lab, specs))
    problem = DiffusionFitProblem(
        family=family,
        theta_init=np.array([1.2, 0.2]),
        lower=np.array([0.5, 0.0]),
        upper=np.array([2.0, 0.5]),
        potential=affine_bundle.potential,
        public=lab.public,
        grid=grid9,
        experiments=tuple(experiments),
        options=options,
    )
    _, report = fit_diffusion(lab, problem, max_iterations=15, max_workers=2)
    assert report.final_loss > 1e-6
    assert report.final_loss <= report.trace[0].loss
