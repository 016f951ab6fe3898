"""
Elliptic Dirichlet solver service.

Assembles the finite-difference operator of -div(a grad u) on a structured
grid, solves Dirichlet problems with Jacobi-preconditioned conjugate
gradients, and provides the operators built on top of it: the
permittivity inverse, boundary fluxes and the Dirichlet-to-Neumann map.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from config import get_settings
from models import ConvergenceStudy, SolveReport
from utils.grid import (
    BoundaryField,
    Grid,
    ScalarField,
    build_grid,
    gradient,
    l2_norm,
    normal_trace,
)

logger = logging.getLogger(__name__)

# Residual floor in units of the rounding level of b - A x.
ROUNDING_FACTOR = 16.0


# ===== Exceptions =====

class EllipticSolveError(Exception):
    """Base exception for elliptic solve errors."""
    pass


class SolverConvergenceError(EllipticSolveError):
    """Raised when the iterative solver misses its tolerance."""

    def __init__(self, message: str, report: SolveReport):
        super().__init__(message)
        self.report = report


class OracleSizeError(EllipticSolveError):
    """Raised when the dense oracle is asked to solve a grid that is too large."""
    pass


# ===== Problem =====

@dataclass(frozen=True, eq=False)
class LinearEllipticProblem:
    """-div(a grad u) = f in the interior, u = g on the boundary."""

    grid: Grid
    a: ScalarField
    f: ScalarField
    g: BoundaryField
    lam: float

    def __post_init__(self) -> None:
        if self.lam <= 0:
            raise EllipticSolveError(f"Ellipticity constant must be positive, got {self.lam}")
        for name, item in (("a", self.a), ("f", self.f), ("g", self.g)):
            if item.grid is not self.grid:
                raise EllipticSolveError(f"Field '{name}' lives on a different grid")
        a_min = float(self.a.values.min())
        if a_min < self.lam * (1.0 - 1e-12):
            raise EllipticSolveError(f"Coefficient minimum {a_min:.6g} is below lambda={self.lam:.6g}")


def assemble_operator(a: ScalarField) -> sp.csr_matrix:
    """
    Full nodal matrix of -div(a grad .) with arithmetic face averages of a.

    Every grid edge (p, q) along axis k contributes w = (a_p + a_q) / (2 h_k^2)
    to K[p, p], K[q, q] and -w to K[p, q], K[q, p]. Rows sum to zero.
    """
    grid = a.grid
    ids = np.arange(grid.node_count).reshape(grid.shape)
    rows, cols, vals = [], [], []
    for axis, h in enumerate(grid.spacing):
        n = grid.shape[axis]
        left = ids.take(np.arange(n - 1), axis=axis).ravel()
        right = ids.take(np.arange(1, n), axis=axis).ravel()
        w = 0.5 * (a.values[left] + a.values[right]) / h ** 2
        rows += [left, right, left, right]
        cols += [left, right, right, left]
        vals += [w, w, -w, -w]
    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.node_count, grid.node_count),
    )
    return matrix.tocsr()


def _partition(problem: LinearEllipticProblem, shift: float) -> tuple[sp.csr_matrix, np.ndarray]:
    """Interior matrix and right-hand side for the unknown u - shift."""
    grid = problem.grid
    K = assemble_operator(problem.a)
    interior, boundary = grid.interior_ids, grid.boundary_ids
    K_rows = K[interior]
    A = K_rows[:, interior].tocsr()
    b = problem.f.values[interior] - K_rows[:, boundary] @ (problem.g.values - shift)
    return A, b


def _data_shift(g: BoundaryField) -> float:
    # Constants lie in the kernel; solving for u - shift keeps b proportional to the data variation.
    return 0.5 * (float(g.values.min()) + float(g.values.max()))


def _assemble_solution(problem: LinearEllipticProblem, interior_values: np.ndarray, shift: float) -> ScalarField:
    grid = problem.grid
    u = np.empty(grid.node_count)
    u[grid.boundary_ids] = problem.g.values
    u[grid.interior_ids] = interior_values + shift
    return ScalarField(grid, u)


def solve_dirichlet(
    problem: LinearEllipticProblem,
    tol: Optional[float] = None,
    initial: Optional[ScalarField] = None,
    max_iter: Optional[int] = None
) -> tuple[ScalarField, SolveReport]:
    """
    Solve a linear Dirichlet problem with Jacobi-preconditioned CG.

    Args:
        problem: The Dirichlet problem
        tol: Residual tolerance relative to the initial residual (settings default)
        initial: Warm start; the mid-range of the boundary data if omitted
        max_iter: CG iteration limit per pass (20 x unknowns by default)

    Returns:
        (solution, report); the solution equals g exactly on the boundary

    Raises:
        SolverConvergenceError: If the tolerance is not reached
    """
    settings = get_settings()
    tol = settings.linear_tol if tol is None else tol
    grid = problem.grid
    shift = _data_shift(problem.g)
    A, b = _partition(problem, shift)
    unknowns = grid.interior_ids.size
    max_iter = max_iter or settings.linear_max_iter_factor * unknowns

    if initial is None:
        x = np.zeros(unknowns)
    else:
        x = initial.values[grid.interior_ids] - shift

    residual = b - A @ x
    r0_norm = float(np.linalg.norm(residual))
    floor = ROUNDING_FACTOR * np.finfo(float).eps * (
        float(np.linalg.norm(abs(A) @ np.abs(x))) + float(np.linalg.norm(b))
    )
    target = max(tol * r0_norm, floor)

    iterations = 0
    residual_norm = r0_norm
    if residual_norm > target:
        preconditioner = sp.diags(1.0 / A.diagonal())
        counter = {"n": 0}

        def count(_xk: np.ndarray) -> None:
            counter["n"] += 1

        for _ in range(3):
            correction, info = cg(
                A, residual, rtol=0.0, atol=target, maxiter=max_iter, M=preconditioner, callback=count
            )
            x = x + correction
            residual = b - A @ x
            residual_norm = float(np.linalg.norm(residual))
            if residual_norm <= target or info != 0:
                break
        iterations = counter["n"]

    reference = target / tol
    final = residual_norm / reference if reference > 0 else 0.0
    converged = residual_norm <= target
    report = SolveReport(iterations=iterations, final_residual=final, tolerance=tol, converged=converged)
    logger.debug(f"CG solve: {unknowns} unknowns, {iterations} iterations, residual {final:.3e}")

    if not converged:
        logger.error(f"❌ CG did not reach tolerance {tol:.1e} (residual {final:.3e})")
        raise SolverConvergenceError(
            f"Linear solve stalled at relative residual {final:.3e} after {iterations} iterations", report
        )
    return _assemble_solution(problem, x, shift), report


def solve_dirichlet_dense(problem: LinearEllipticProblem) -> ScalarField:
    """
    Direct dense solve used as an oracle for small grids.

    Raises:
        OracleSizeError: If the grid has more nodes than the oracle allows
    """
    limit = get_settings().dense_oracle_max_nodes
    if problem.grid.node_count > limit:
        raise OracleSizeError(f"Dense oracle limited to {limit} nodes, grid has {problem.grid.node_count}")
    shift = _data_shift(problem.g)
    A, b = _partition(problem, shift)
    x = scipy.linalg.solve(A.toarray(), b, assume_a="pos")
    return _assemble_solution(problem, x, shift)


def interior_residual(a: ScalarField, u: ScalarField, f: ScalarField) -> tuple[np.ndarray, float]:
    """
    Discrete residual of -div(a grad u) - f at interior nodes.

    Returns:
        (residual vector, scale) where scale = |f_I| + |diag(K)_I u_I|
    """
    K = assemble_operator(a)
    interior = a.grid.interior_ids
    residual = (K @ u.values)[interior] - f.values[interior]
    scale = float(np.linalg.norm(f.values[interior]) + np.linalg.norm(K.diagonal()[interior] * u.values[interior]))
    return residual, scale


def l_eps_inverse(
    eps: ScalarField,
    v: ScalarField,
    eta0: BoundaryField,
    lam: Optional[float] = None,
    tol: Optional[float] = None,
    initial: Optional[ScalarField] = None
) -> ScalarField:
    """
    Solve div(eps grad w) = v with w = eta0 on the boundary.

    Args:
        eps: Permittivity field
        v: Right-hand side
        eta0: Dirichlet data
        lam: Ellipticity constant, min(eps) if omitted
    """
    lam = float(eps.values.min()) if lam is None else lam
    negated = ScalarField(v.grid, -v.values)
    problem = LinearEllipticProblem(grid=eps.grid, a=eps, f=negated, g=eta0, lam=lam)
    solution, _ = solve_dirichlet(problem, tol=tol, initial=initial)
    return solution


def boundary_flux(a: ScalarField, u: ScalarField) -> BoundaryField:
    """Normal flux a (N . grad u) at every boundary node."""
    return normal_trace(u.grid, a.values[:, None] * gradient(u))


def dn_map(a: ScalarField, f: BoundaryField, lam: Optional[float] = None, tol: Optional[float] = None) -> BoundaryField:
    """Dirichlet-to-Neumann map of -div(a grad .) applied to boundary data f."""
    lam = float(a.values.min()) if lam is None else lam
    zero = ScalarField.constant(a.grid, 0.0)
    solution, _ = solve_dirichlet(LinearEllipticProblem(a.grid, a, zero, f, lam), tol=tol)
    return boundary_flux(a, solution)


def harmonic_extension(g: BoundaryField, tol: Optional[float] = None) -> ScalarField:
    """Discrete harmonic function with boundary values g."""
    grid = g.grid
    problem = LinearEllipticProblem(
        grid, ScalarField.constant(grid, 1.0), ScalarField.constant(grid, 0.0), g, 1.0
    )
    solution, _ = solve_dirichlet(problem, tol=tol)
    return solution


# ===== Manufactured solution =====

def manufactured_problem(grid: Grid) -> tuple[LinearEllipticProblem, ScalarField]:
    """
    a = 1 + x1, u* = x1 (1 - x1) x2 (1 - x2) on the unit square, u* = 0 on the boundary.

    Returns:
        (problem, exact solution)
    """
    if grid.dim != 2:
        raise EllipticSolveError("The manufactured problem is defined on the unit square")
    x, y = grid.coordinates[:, 0], grid.coordinates[:, 1]
    a = ScalarField(grid, 1.0 + x)
    exact = ScalarField(grid, x * (1 - x) * y * (1 - y))
    f = ScalarField(grid, (1 + 4 * x) * y * (1 - y) + 2 * (1 + x) * x * (1 - x))
    problem = LinearEllipticProblem(grid, a, f, BoundaryField.constant(grid, 0.0), lam=1.0)
    return problem, exact


def manufactured_convergence_study(n_values: Sequence[int], tol: Optional[float] = None) -> ConvergenceStudy:
    """
    L2 error of the manufactured problem under h-refinement.

    Args:
        n_values: Increasing nodes-per-axis counts

    Returns:
        ConvergenceStudy with successive error ratios and observed orders
    """
    h_values, errors = [], []
    for n in n_values:
        grid = build_grid(2, [n, n])
        problem, exact = manufactured_problem(grid)
        solution, _ = solve_dirichlet(problem, tol=tol)
        error = l2_norm(ScalarField(grid, solution.values - exact.values))
        h_values.append(grid.spacing[0])
        errors.append(error)
        logger.info(f"📊 Manufactured solution n={n}: L2 error {error:.3e}")

    ratios = [errors[k] / errors[k + 1] for k in range(len(errors) - 1)]
    orders = [
        float(np.log(errors[k] / errors[k + 1]) / np.log(h_values[k] / h_values[k + 1]))
        for k in range(len(errors) - 1)
    ]
    return ConvergenceStudy(
        n_values=list(n_values), h_values=h_values, errors=errors, ratios=ratios, orders=orders
    )


__all__ = [
    "EllipticSolveError",
    "SolverConvergenceError",
    "OracleSizeError",
    "LinearEllipticProblem",
    "assemble_operator",
    "solve_dirichlet",
    "solve_dirichlet_dense",
    "interior_residual",
    "l_eps_inverse",
    "boundary_flux",
    "dn_map",
    "harmonic_extension",
    "manufactured_problem",
    "manufactured_convergence_study",
]
