"""
Tests for the linear elliptic solver service.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from config import get_settings
from services.elliptic_service import (
    EllipticSolveError,
    LinearEllipticProblem,
    OracleSizeError,
    SolverConvergenceError,
    assemble_operator,
    boundary_flux,
    dn_map,
    harmonic_extension,
    interior_residual,
    l_eps_inverse,
    manufactured_convergence_study,
    manufactured_problem,
    solve_dirichlet,
    solve_dirichlet_dense,
)
from utils.grid import BoundaryField, ScalarField, build_grid


def _variable_problem(grid):
    """a = 2 + sin(3 x1) x2 with smooth data, used for solver comparisons."""
    x, y = grid.coordinates[:, 0], grid.coordinates[:, 1]
    a = ScalarField(grid, 2.0 + np.sin(3 * x) * y)
    f = ScalarField(grid, np.cos(2 * x) + y)
    g = BoundaryField.from_function(grid, lambda p: 1.0 + p[:, 0] ** 2 - p[:, 1])
    return LinearEllipticProblem(grid, a, f, g, lam=1.0)


def test_operator_rows_sum_to_zero(grid9):
    a = ScalarField.from_function(grid9, lambda x: 1.0 + x[:, 0])
    K = assemble_operator(a)
    assert_allclose(np.asarray(K.sum(axis=1)).ravel(), 0.0, atol=1e-9)
    assert abs(K - K.T).max() < 1e-12


def test_boundary_values_are_exact(grid9):
    problem = _variable_problem(grid9)
    solution, report = solve_dirichlet(problem, tol=1e-10)
    assert report.converged
    assert np.array_equal(solution.values[grid9.boundary_ids], problem.g.values)


def test_linear_solution_reproduced_exactly(grid9):
    """-div((1 + x1) grad x1) = -1 is solved exactly by u = x1."""
    a = ScalarField.from_function(grid9, lambda x: 1.0 + x[:, 0])
    f = ScalarField.constant(grid9, -1.0)
    g = BoundaryField.from_function(grid9, lambda x: x[:, 0])
    solution, _ = solve_dirichlet(LinearEllipticProblem(grid9, a, f, g, lam=1.0), tol=1e-12)
    assert_allclose(solution.values, grid9.coordinates[:, 0], atol=1e-10)


def test_cg_matches_dense_oracle(grid13):
    problem = _variable_problem(grid13)
    iterative, _ = solve_dirichlet(problem, tol=1e-12)
    direct = solve_dirichlet_dense(problem)
    assert_allclose(iterative.values, direct.values, atol=1e-9)


def test_dense_oracle_size_limit(monkeypatch, grid13):
    monkeypatch.setenv("ELECTROLYSER_DENSE_ORACLE_MAX_NODES", "100")
    get_settings.cache_clear()
    with pytest.raises(OracleSizeError):
        solve_dirichlet_dense(_variable_problem(grid13))


def test_warm_start_keeps_solution(grid9):
    problem = _variable_problem(grid9)
    solution, _ = solve_dirichlet(problem, tol=1e-12)
    again, report = solve_dirichlet(problem, tol=1e-8, initial=solution)
    assert report.converged
    assert_allclose(again.values, solution.values, atol=1e-10)


def test_iteration_limit_raises_with_report():
    grid = build_grid(2, [17, 17])
    with pytest.raises(SolverConvergenceError) as info:
        solve_dirichlet(_variable_problem(grid), tol=1e-14, max_iter=1)
    assert not info.value.report.converged
    assert info.value.report.iterations <= 3


def test_residual_of_solution_is_small(grid9):
    problem = _variable_problem(grid9)
    solution, _ = solve_dirichlet(problem, tol=1e-12)
    residual, scale = interior_residual(problem.a, solution, problem.f)
    assert np.linalg.norm(residual) <= 1e-9 * scale


@pytest.mark.parametrize("value", [0.0, -2.5, 40.0])
def test_harmonic_extension_of_constant(grid9, value):
    extension = harmonic_extension(BoundaryField.constant(grid9, value))
    assert_allclose(extension.values, value, atol=1e-12)


def test_dn_map_of_linear_data(grid9):
    """u = x1 is a-harmonic for a = 1, so its flux is the x1 component of the normal."""
    a = ScalarField.constant(grid9, 1.0)
    flux = dn_map(a, BoundaryField.from_function(grid9, lambda x: x[:, 0]), tol=1e-12)
    assert_allclose(flux.values, grid9.normals[:, 0], atol=1e-8)


def test_boundary_flux_scales_with_coefficient(grid9):
    u = ScalarField.from_function(grid9, lambda x: x[:, 1])
    flux = boundary_flux(ScalarField.constant(grid9, 3.0), u)
    assert_allclose(flux.values, 3.0 * grid9.normals[:, 1], atol=1e-12)


def test_l_eps_inverse_quadratic(grid9):
    """div(grad w) = 4 with w = |x|^2 on the boundary; second differences are exact for quadratics."""
    eps = ScalarField.constant(grid9, 1.0)
    exact = grid9.coordinates[:, 0] ** 2 + grid9.coordinates[:, 1] ** 2
    eta0 = BoundaryField(grid9, exact[grid9.boundary_ids])
    w = l_eps_inverse(eps, ScalarField.constant(grid9, 4.0), eta0, tol=1e-12)
    assert_allclose(w.values, exact, atol=1e-10)


def test_problem_validation(grid9):
    other = build_grid(2, [9, 9])
    a = ScalarField.constant(grid9, 0.2)
    f = ScalarField.constant(grid9, 0.0)
    g = BoundaryField.constant(grid9, 0.0)
    with pytest.raises(EllipticSolveError):
        LinearEllipticProblem(grid9, a, f, g, lam=0.5)
    with pytest.raises(EllipticSolveError):
        LinearEllipticProblem(grid9, ScalarField.constant(other, 1.0), f, g, lam=0.5)
    with pytest.raises(EllipticSolveError):
        LinearEllipticProblem(grid9, a, f, g, lam=0.0)


def test_manufactured_solution_error(grid13):
    problem, exact = manufactured_problem(grid13)
    solution, _ = solve_dirichlet(problem, tol=1e-12)
    assert np.max(np.abs(solution.values - exact.values)) < 5e-3


def test_second_order_convergence():
    study = manufactured_convergence_study([9, 17, 33], tol=1e-12)
    assert len(study.orders) == 2
    assert all(1.8 < order < 2.3 for order in study.orders)
    assert all(ratio > 3.0 for ratio in study.ratios)
