"""
Tests for grids, fields, expressions and root finding.
"""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from utils.expression_parser import ExpressionError, compile_expression, coordinate_function, standard_variables
from utils.grid import (
    BoundaryField,
    GridError,
    ScalarField,
    boundary_integral,
    build_grid,
    gradient,
    interpolate,
    normal_trace,
    volume_integral,
)
from utils.root_finding import RootFindingError, solve_increasing


# ===== Grid =====

@pytest.mark.parametrize("dim,n", [(2, [5, 5]), (2, [4, 7]), (3, [4, 4, 5])])
def test_node_partition(dim, n):
    """Interior and boundary ids partition every node exactly once."""
    grid = build_grid(dim, n)
    interior = int(np.prod([k - 2 for k in n]))
    assert grid.node_count == int(np.prod(n))
    assert grid.interior_ids.size == interior
    assert grid.boundary_ids.size == grid.node_count - interior
    merged = np.sort(np.concatenate([grid.interior_ids, grid.boundary_ids]))
    assert_allclose(merged, np.arange(grid.node_count))


@pytest.mark.parametrize(
    "dim,n,extent,area",
    [
        (2, [5, 5], None, 4.0),
        (2, [5, 9], [[0.0, 2.0], [0.0, 1.0]], 6.0),
        (3, [4, 4, 4], None, 6.0),
    ],
)
def test_quadrature_weights(dim, n, extent, area):
    """Volume weights integrate 1 to the box volume, boundary weights to its surface area."""
    grid = build_grid(dim, n, extent)
    volume = float(np.prod([hi - lo for lo, hi in grid.extent]))
    assert volume_integral(ScalarField.constant(grid, 1.0)) == pytest.approx(volume)
    assert boundary_integral(BoundaryField.constant(grid, 1.0)) == pytest.approx(area)


def test_normals_are_outward_unit_vectors():
    grid = build_grid(2, [5, 5])
    assert_allclose(np.linalg.norm(grid.normals, axis=1), 1.0)
    points = grid.coordinates[grid.boundary_ids]
    centre = np.array([0.5, 0.5])
    assert np.all(np.sum(grid.normals * (points - centre), axis=1) > 0)


def test_gradient_exact_for_quadratics():
    grid = build_grid(2, [7, 9])
    u = ScalarField.from_function(grid, lambda x: x[:, 0] ** 2 + 3 * x[:, 0] * x[:, 1] - x[:, 1])
    expected = np.stack([2 * grid.coordinates[:, 0] + 3 * grid.coordinates[:, 1], 3 * grid.coordinates[:, 0] - 1], axis=1)
    assert_allclose(gradient(u), expected, atol=1e-10)


def test_normal_trace_of_constant_field():
    """Corner nodes take the normal of the first axis they touch."""
    grid = build_grid(2, [5, 5])
    field = np.tile([1.0, 0.0], (grid.node_count, 1))
    trace = normal_trace(grid, field)
    x = grid.coordinates[grid.boundary_ids, 0]
    expected = np.where(np.isclose(x, 1.0), 1.0, np.where(np.isclose(x, 0.0), -1.0, 0.0))
    assert_allclose(trace.values, expected)


def test_interpolation_reproduces_bilinear_functions():
    grid = build_grid(2, [5, 5])
    u = ScalarField.from_function(grid, lambda x: 1 + x[:, 0] * x[:, 1] - 2 * x[:, 1])
    points = np.array([[0.1, 0.7], [0.33, 0.52], [1.0, 1.0]])
    assert_allclose(interpolate(u, points), 1 + points[:, 0] * points[:, 1] - 2 * points[:, 1], atol=1e-12)


def test_interpolation_outside_domain():
    grid = build_grid(2, [5, 5])
    with pytest.raises(GridError):
        interpolate(ScalarField.constant(grid, 1.0), np.array([[1.5, 0.5]]))


def test_refined_grid_contains_coarse_nodes():
    grid = build_grid(2, [5, 5])
    fine = grid.refined()
    assert fine.n_per_axis == (9, 9)
    ids = fine.locate_nodes(grid.coordinates)
    assert_allclose(fine.coordinates[ids], grid.coordinates)


def test_descriptor_round_trip():
    grid = build_grid(3, [4, 5, 6], [[0, 1], [0, 2], [-1, 1]])
    copy = type(grid).from_descriptor(grid.to_descriptor())
    assert copy.n_per_axis == grid.n_per_axis
    assert copy.extent == grid.extent


@pytest.mark.parametrize(
    "dim,n,extent",
    [
        (1, [5], None),
        (2, [5], None),
        (2, [2, 5], None),
        (2, [5, 5], [[0.0, 1.0], [1.0, 1.0]]),
    ],
)
def test_invalid_grids(dim, n, extent):
    with pytest.raises(GridError):
        build_grid(dim, n, extent)


def test_fields_reject_wrong_sizes_and_nan():
    grid = build_grid(2, [5, 5])
    with pytest.raises(GridError):
        ScalarField(grid, np.zeros(grid.node_count - 1))
    with pytest.raises(GridError):
        BoundaryField(grid, np.full(grid.boundary_ids.size, np.nan))


def test_boundary_field_lookup():
    grid = build_grid(2, [5, 5])
    field = BoundaryField.from_function(grid, lambda x: x[:, 0] + 10 * x[:, 1])
    node = grid.node_id([4, 2])
    assert field.at(node) == pytest.approx(1.0 + 5.0)
    with pytest.raises(GridError):
        field.at(grid.node_id([2, 2]))


# ===== Expressions =====

def test_expression_evaluation():
    compiled = compile_expression("1 + 0.5*sin(pi*x1)^2 + exp(s) - p1", standard_variables(1, 2))
    env = {"p1": np.array([0.5]), "s": np.array([0.0]), "x1": np.array([0.5]), "x2": np.array([0.0])}
    assert_allclose(compiled(env), [2.0])
    assert compiled.uses_any(["s"])
    assert not compiled.uses_any(["x2"])


def test_caret_is_power_with_power_precedence():
    compiled = compile_expression("1 + x1^2", ["x1"])
    assert_allclose(compiled({"x1": np.array([3.0])}), [10.0])


@pytest.mark.parametrize("text", ["__import__('os')", "x1.real", "q + 1", "lambda: 1", "x1 if s else 2", ""])
def test_expression_rejects_unsafe_or_unknown(text):
    with pytest.raises(ExpressionError):
        compile_expression(text, standard_variables(1, 2))


def test_coordinate_function_constant_and_expression():
    points = np.array([[0.0, 0.0], [1.0, 0.5]])
    assert_allclose(coordinate_function(2.5, 2)(points), [2.5, 2.5])
    assert_allclose(coordinate_function("1 + x1 - x2", 2)(points), [1.0, 1.5])


# ===== Root finding =====

def test_solve_increasing_vectorized():
    targets = np.array([-50.0, -1.0, 0.0, 3.0, 1e3])
    roots, _ = solve_increasing(
        lambda t: t ** 3 + t - targets,
        lambda t: 3 * t ** 2 + 1,
        np.zeros_like(targets),
        tol=1e-12,
        max_doublings=200,
        max_iterations=200,
    )
    assert_allclose(roots ** 3 + roots - targets, 0.0, atol=1e-9)


def test_solve_increasing_unbracketable():
    with pytest.raises(RootFindingError):
        solve_increasing(
            lambda t: np.arctan(t) - 2.0,
            lambda t: 1 / (1 + t ** 2),
            np.zeros(1),
            tol=1e-12,
            max_doublings=20,
            max_iterations=50,
        )
