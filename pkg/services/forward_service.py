"""
Forward solver service.

Solves the coupled transport system for concentrations c_1..c_M and
temperature T through the substituted variable sigma = phi(c, T, x).
Each Picard step freezes the coefficients at the current iterate and solves
M + 1 linear Dirichlet problems concurrently; the temperature is recovered
pointwise by inverting phi in its temperature argument.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from config import get_settings
from models import PicardOptions, PicardReport, ResidualStudy
from services.coefficient_service import (
    ModelBundle,
    PermittivityField,
    affine_potential,
    constant_diffusion,
    eigen_bump_source,
    invert_temperature,
)
from services.elliptic_service import (
    LinearEllipticProblem,
    harmonic_extension,
    interior_residual,
    l_eps_inverse,
    solve_dirichlet,
)
from utils.grid import BoundaryField, Grid, ScalarField, build_grid

logger = logging.getLogger(__name__)


# ===== Exceptions =====

class ForwardSolveError(Exception):
    """Base exception for forward solve errors."""
    pass


class PicardDivergenceError(ForwardSolveError):
    """Raised when the Picard iteration does not converge."""

    def __init__(self, message: str, report: PicardReport):
        super().__init__(message)
        self.report = report


class SourceModelError(ForwardSolveError):
    """Raised when a source-free construction is applied to a bundle with sources."""
    pass


# ===== State =====

@dataclass(frozen=True, eq=False)
class SystemState:
    """Converged solution of the forward problem."""

    concentrations: tuple[ScalarField, ...]
    temperature: ScalarField
    substituted: ScalarField
    gamma: tuple[BoundaryField, ...]
    tau: BoundaryField
    eta0: BoundaryField
    report: PicardReport

    @property
    def grid(self) -> Grid:
        return self.temperature.grid

    @property
    def species(self) -> int:
        return len(self.concentrations)

    def concentration_matrix(self) -> np.ndarray:
        """(N, M) nodal concentrations."""
        return np.stack([c.values for c in self.concentrations], axis=1)


def _coordinates(grid: Grid, ids: Optional[np.ndarray] = None) -> np.ndarray:
    return grid.coordinates if ids is None else grid.coordinates[ids]


def boundary_substituted(bundle: ModelBundle, gamma: Sequence[BoundaryField], tau: BoundaryField) -> BoundaryField:
    """eta0 = phi(gamma, tau, x) at every boundary node."""
    grid = tau.grid
    P = np.stack([g.values for g in gamma], axis=1)
    values = bundle.potential.value(P, tau.values, _coordinates(grid, grid.boundary_ids))
    return BoundaryField(grid, values)


def _check_boundary_data(bundle: ModelBundle, gamma: Sequence[BoundaryField], other: BoundaryField) -> None:
    if len(gamma) != bundle.species:
        raise ForwardSolveError(f"Expected {bundle.species} concentration boundary fields, got {len(gamma)}")
    if any(g.grid is not other.grid for g in gamma):
        raise ForwardSolveError("All boundary data must live on the same grid")
    if other.grid.dim != bundle.dim:
        raise ForwardSolveError(f"Grid dimension {other.grid.dim} does not match model dimension {bundle.dim}")


def _relative_change(new: Sequence[ScalarField], old: Sequence[ScalarField]) -> float:
    diff = np.sqrt(sum(float(np.sum((a.values - b.values) ** 2)) for a, b in zip(new, old)))
    scale = np.sqrt(sum(float(np.sum(a.values ** 2)) for a in new))
    return float(diff / scale) if scale > 0 else float(diff)


def pde_residual(bundle: ModelBundle, state: SystemState) -> float:
    """Largest relative discrete residual over the species equations and the sigma equation."""
    grid = state.grid
    C = state.concentration_matrix()
    T = state.temperature.values
    X = grid.coordinates
    worst = 0.0
    for i in range(bundle.species):
        nu = ScalarField(grid, bundle.diffusion[i].value(C, T, X))
        source = ScalarField(grid, bundle.sources[i].value(C, T, X))
        residual, scale = interior_residual(nu, state.concentrations[i], source)
        worst = max(worst, _scaled(residual, scale))
    eps = bundle.permittivity.on_grid(grid)
    charge = ScalarField(grid, -(C @ bundle.charge_vector))
    residual, scale = interior_residual(eps, state.substituted, charge)
    return max(worst, _scaled(residual, scale))


def _scaled(residual: np.ndarray, scale: float) -> float:
    norm = float(np.linalg.norm(residual))
    return norm / scale if scale > 0 else norm


def species_residual_norm(bundle: ModelBundle, state: SystemState) -> float:
    """Volume-weighted L2 norm of -div(D_i grad c_i) - g_i over interior nodes, summed over species."""
    grid = state.grid
    C = state.concentration_matrix()
    T = state.temperature.values
    X = grid.coordinates
    weights = grid.volume_weights[grid.interior_ids]
    total = 0.0
    for i in range(bundle.species):
        nu = ScalarField(grid, bundle.diffusion[i].value(C, T, X))
        source = ScalarField(grid, bundle.sources[i].value(C, T, X))
        residual, _ = interior_residual(nu, state.concentrations[i], source)
        total += float(np.dot(weights, residual ** 2))
    return float(np.sqrt(total))


# ===== Picard iteration =====

class PicardSolver:
    """
    Damped Picard iteration for the substituted system.

    Responsibilities:
    - Freeze coefficients at the current iterate (temperature by inversion)
    - Solve the M + 1 linear problems concurrently
    - Control damping from the fixed-point residual
    - Check the discrete PDE residual of the final state
    """

    def __init__(
        self,
        bundle: ModelBundle,
        options: Optional[PicardOptions] = None,
        max_workers: Optional[int] = None
    ):
        """
        Initialize Picard solver.

        Args:
            bundle: Model coefficients
            options: Iteration options (defaults from settings)
            max_workers: Thread-pool size for the concurrent linear solves
        """
        settings = get_settings()
        self.bundle = bundle
        self.options = options or PicardOptions(
            max_outer_iterations=settings.picard_max_outer_iterations,
            fixed_point_tol=settings.picard_fixed_point_tol,
            damping=settings.picard_damping,
            linear_tol=settings.linear_tol,
            pde_tol=settings.picard_pde_tol,
            inversion_tol=settings.inversion_tol,
        )
        self.max_workers = max_workers or settings.max_workers
        self.logger = logger

    def temperature_of(self, v: Sequence[ScalarField], hint: Optional[np.ndarray] = None) -> np.ndarray:
        """T = h(c, sigma, x) at every node for the iterate v = (c_1..c_M, sigma)."""
        grid = v[0].grid
        C = np.stack([c.values for c in v[:-1]], axis=1)
        return invert_temperature(
            self.bundle.potential, C, v[-1].values, grid.coordinates,
            tol=self.options.inversion_tol, initial=hint,
        )

    def frozen_problems(
        self,
        v: Sequence[ScalarField],
        gamma: Sequence[BoundaryField],
        eta0: BoundaryField,
        hint: Optional[np.ndarray] = None
    ) -> tuple[list[LinearEllipticProblem], np.ndarray]:
        """Linear problems with coefficients evaluated at v, and the temperature of v."""
        bundle = self.bundle
        grid = eta0.grid
        X = grid.coordinates
        C = np.stack([c.values for c in v[:-1]], axis=1)
        T = self.temperature_of(v, hint)
        problems = []
        for i in range(bundle.species):
            nu = ScalarField(grid, bundle.diffusion[i].value(C, T, X))
            source = ScalarField(grid, bundle.sources[i].value(C, T, X))
            problems.append(LinearEllipticProblem(grid, nu, source, gamma[i], bundle.lam))
        eps = bundle.permittivity.on_grid(grid)
        charge = ScalarField(grid, -(C @ bundle.charge_vector))
        problems.append(LinearEllipticProblem(grid, eps, charge, eta0, bundle.lam))
        return problems, T

    def step(
        self,
        v: Sequence[ScalarField],
        gamma: Sequence[BoundaryField],
        eta0: BoundaryField,
        hint: Optional[np.ndarray] = None
    ) -> tuple[list[ScalarField], np.ndarray]:
        """
        One undamped Picard map v -> w.

        Returns:
            (w, temperature of v)
        """
        problems, T = self.frozen_problems(v, gamma, eta0, hint)
        tol = self.options.linear_tol
        results: list[Optional[ScalarField]] = [None] * len(problems)

        if self.max_workers <= 1:
            for k, problem in enumerate(problems):
                results[k], _ = solve_dirichlet(problem, tol=tol, initial=v[k])
            return results, T

        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            future_to_index = {}
            for k, problem in enumerate(problems):
                future = executor.submit(solve_dirichlet, problem, tol, v[k])
                future_to_index[future] = k

            for future in as_completed(future_to_index):
                k = future_to_index[future]
                results[k], _ = future.result()

        return results, T

    def solve(
        self,
        gamma: Sequence[BoundaryField],
        eta0: BoundaryField,
        tau: Optional[BoundaryField] = None
    ) -> SystemState:
        """
        Iterate to a fixed point.

        Args:
            gamma: Concentration boundary data
            eta0: Boundary data of sigma
            tau: Temperature boundary data; h(gamma, eta0, x) if omitted

        Returns:
            SystemState with concentrations, temperature and sigma

        Raises:
            PicardDivergenceError: If the iteration limit is reached or the final PDE residual is too large
        """
        _check_boundary_data(self.bundle, gamma, eta0)
        opts = self.options
        boundary = list(gamma) + [eta0]

        v = [harmonic_extension(g, tol=opts.linear_tol) for g in boundary]
        w, T = self.step(v, gamma, eta0)
        change = _relative_change(w, v)
        theta = opts.damping
        history, dampings = [change], [theta]
        iterations = 1
        monotone = True

        while change > opts.fixed_point_tol:
            if iterations >= opts.max_outer_iterations:
                report = PicardReport(
                    converged=False, iterations=iterations, fixed_point_residual=change,
                    pde_residual=float("nan"), residual_history=history, damping_history=dampings,
                    monotone=monotone, message="iteration limit reached",
                )
                self.logger.error(f"❌ Picard iteration stalled at change {change:.3e} after {iterations} steps")
                raise PicardDivergenceError(
                    f"Picard iteration did not converge in {iterations} steps (last change {change:.3e})", report
                )

            trial = [ScalarField(a.grid, a.values + theta * (b.values - a.values)) for a, b in zip(v, w)]
            w_trial, T_trial = self.step(trial, gamma, eta0, hint=T)
            iterations += 1
            trial_change = _relative_change(w_trial, trial)

            if trial_change > change and theta > opts.min_damping:
                theta = max(0.5 * theta, opts.min_damping)
                self.logger.debug(f"Residual grew to {trial_change:.3e}, damping reduced to {theta:g}")
                continue
            if trial_change > change:
                monotone = False
                self.logger.warning(f"⚠️ Residual grew at minimum damping {theta:g}, accepting step anyway")

            v, w, T, change = trial, w_trial, T_trial, trial_change
            history.append(change)
            dampings.append(theta)
            self.logger.debug(f"Picard step {iterations}: change {change:.3e}, damping {theta:g}")

        grid = eta0.grid
        concentrations = tuple(w[:-1])
        sigma = w[-1]
        temperature = self.temperature_of(w, hint=T)
        if tau is None:
            tau = BoundaryField(grid, temperature[grid.boundary_ids])
        temperature = temperature.copy()
        temperature[grid.boundary_ids] = tau.values

        state = SystemState(
            concentrations=concentrations,
            temperature=ScalarField(grid, temperature),
            substituted=sigma,
            gamma=tuple(gamma),
            tau=tau,
            eta0=eta0,
            report=PicardReport(
                converged=True, iterations=iterations, fixed_point_residual=change, pde_residual=0.0,
                residual_history=history, damping_history=dampings, monotone=monotone,
            ),
        )
        residual = pde_residual(self.bundle, state)
        report = state.report.model_copy(update={"pde_residual": residual})
        if residual > opts.pde_tol:
            report = report.model_copy(update={"converged": False, "message": "PDE residual above tolerance"})
            raise PicardDivergenceError(f"Final PDE residual {residual:.3e} exceeds {opts.pde_tol:.1e}", report)

        self.logger.info(f"✅ Forward solve converged in {iterations} steps (change {change:.2e}, PDE {residual:.2e})")
        return _with_report(state, report)


def _with_report(state: SystemState, report: PicardReport) -> SystemState:
    return SystemState(
        concentrations=state.concentrations, temperature=state.temperature, substituted=state.substituted,
        gamma=state.gamma, tau=state.tau, eta0=state.eta0, report=report,
    )


# ===== Public operations =====

def picard_step(
    bundle: ModelBundle,
    v: Sequence[ScalarField],
    gamma: Sequence[BoundaryField],
    eta0: BoundaryField,
    options: Optional[PicardOptions] = None,
    max_workers: Optional[int] = None
) -> list[ScalarField]:
    """Apply the Picard map once to v = (c_1..c_M, sigma)."""
    if len(v) != bundle.species + 1:
        raise ForwardSolveError(f"Iterate must have {bundle.species + 1} components, got {len(v)}")
    w, _ = PicardSolver(bundle, options, max_workers).step(v, gamma, eta0)
    return w


def forward_solve_substituted(
    bundle: ModelBundle,
    gamma: Sequence[BoundaryField],
    eta0: BoundaryField,
    options: Optional[PicardOptions] = None,
    max_workers: Optional[int] = None
) -> SystemState:
    """Forward solve with sigma prescribed directly on the boundary."""
    return PicardSolver(bundle, options, max_workers).solve(gamma, eta0)


def forward_solve(
    bundle: ModelBundle,
    gamma: Sequence[BoundaryField],
    tau: BoundaryField,
    options: Optional[PicardOptions] = None,
    max_workers: Optional[int] = None
) -> SystemState:
    """
    Solve the forward problem for boundary data (gamma, tau).

    Args:
        bundle: Model coefficients
        gamma: Concentration boundary data, one field per species
        tau: Temperature boundary data
        options: Picard options
        max_workers: Thread-pool size

    Returns:
        SystemState with T = tau and c_i = gamma_i exactly on the boundary
    """
    _check_boundary_data(bundle, gamma, tau)
    eta0 = boundary_substituted(bundle, gamma, tau)
    return PicardSolver(bundle, options, max_workers).solve(gamma, eta0, tau=tau)


def forward_constant_bc(
    bundle: ModelBundle,
    gamma_values: Sequence[float],
    tau: BoundaryField,
    options: Optional[PicardOptions] = None
) -> SystemState:
    """
    Closed-form solution for constant concentration data in a source-free model.

    c_i = gamma_i everywhere, sigma = L_eps^-1(q . gamma; eta0), T = h(gamma, sigma, x).

    Raises:
        SourceModelError: If the bundle has non-zero sources
    """
    if not bundle.is_source_free:
        raise SourceModelError("Constant concentrations solve the species equations only without sources")
    if len(gamma_values) != bundle.species:
        raise ForwardSolveError(f"Expected {bundle.species} constant concentrations")
    options = options or PicardOptions()
    grid = tau.grid
    gamma = tuple(BoundaryField.constant(grid, value) for value in gamma_values)
    eta0 = boundary_substituted(bundle, gamma, tau)

    eps = bundle.permittivity.on_grid(grid)
    charge = float(np.dot(bundle.charge_vector, np.asarray(gamma_values, dtype=float)))
    sigma = l_eps_inverse(eps, ScalarField.constant(grid, charge), eta0, lam=bundle.lam, tol=options.linear_tol)

    C = np.tile(np.asarray(gamma_values, dtype=float), (grid.node_count, 1))
    temperature = invert_temperature(
        bundle.potential, C, sigma.values, grid.coordinates, tol=options.inversion_tol
    ).copy()
    temperature[grid.boundary_ids] = tau.values

    state = SystemState(
        concentrations=tuple(ScalarField.constant(grid, value) for value in gamma_values),
        temperature=ScalarField(grid, temperature),
        substituted=sigma,
        gamma=gamma,
        tau=tau,
        eta0=eta0,
        report=PicardReport(
            converged=True, iterations=0, fixed_point_residual=0.0, pde_residual=0.0, message="closed form"
        ),
    )
    report = state.report.model_copy(update={"pde_residual": pde_residual(bundle, state)})
    return _with_report(state, report)


# ===== Source non-uniqueness =====

def eigen_source_bundle(dim: int = 2) -> ModelBundle:
    """
    One neutral species, D = 1, phi = s, eps = 1 and g(p) = 2 pi^2 p cutoff(|p|).

    On the unit square sin(pi x1) sin(pi x2) and 0 both solve the system with zero boundary data.
    """
    rate = dim * np.pi ** 2
    return ModelBundle(
        species=1,
        charges=(0.0,),
        potential=affine_potential([0.0], 1.0, [0.0] * dim),
        diffusion=(constant_diffusion(1.0, 1, dim, 1.0, 1.0),),
        sources=(eigen_bump_source(1, dim, 0, rate),),
        permittivity=PermittivityField.constant(1.0, dim),
        lam=1.0,
        upper=1.0,
    )


def _state_from_fields(grid: Grid, concentration: np.ndarray, message: str) -> SystemState:
    zero = ScalarField.constant(grid, 0.0)
    c = concentration.copy()
    c[grid.boundary_ids] = 0.0
    zero_boundary = BoundaryField.constant(grid, 0.0)
    return SystemState(
        concentrations=(ScalarField(grid, c),),
        temperature=zero,
        substituted=zero,
        gamma=(zero_boundary,),
        tau=zero_boundary,
        eta0=zero_boundary,
        report=PicardReport(
            converged=True, iterations=0, fixed_point_residual=0.0, pde_residual=0.0, message=message
        ),
    )


def nonuniqueness_with_sources(grid: Grid) -> tuple[SystemState, SystemState]:
    """
    Two distinct states with identical boundary data and fluxes for the eigen-source bundle.

    Returns:
        (zero state, eigenfunction state), both with T = sigma = 0

    Raises:
        ForwardSolveError: If the grid is not the unit square
    """
    if grid.dim != 2 or any(e != (0.0, 1.0) for e in grid.extent):
        raise ForwardSolveError("The eigen-source construction needs the unit square")
    bundle = eigen_source_bundle(2)
    x, y = grid.coordinates[:, 0], grid.coordinates[:, 1]
    eigenfunction = np.sin(np.pi * x) * np.sin(np.pi * y)

    states = []
    for values, label in ((np.zeros(grid.node_count), "zero state"), (eigenfunction, "eigenfunction state")):
        state = _state_from_fields(grid, values, label)
        report = state.report.model_copy(update={"pde_residual": pde_residual(bundle, state)})
        states.append(_with_report(state, report))
    return states[0], states[1]


def source_nonuniqueness_study(n_values: Sequence[int]) -> ResidualStudy:
    """Residuals of both source non-uniqueness states under refinement, with the fitted order."""
    bundle = eigen_source_bundle(2)
    h_values, zero_res, eigen_res, eigenvalues = [], [], [], []
    for n in n_values:
        grid = build_grid(2, [n, n])
        state_zero, state_eigen = nonuniqueness_with_sources(grid)
        h = grid.spacing[0]
        h_values.append(h)
        zero_res.append(species_residual_norm(bundle, state_zero))
        eigen_res.append(species_residual_norm(bundle, state_eigen))
        eigenvalues.append(float(8.0 / h ** 2 * np.sin(np.pi * h / 2) ** 2))
        logger.info(f"📊 Source non-uniqueness n={n}: residual {eigen_res[-1]:.3e}")
    order = float(np.polyfit(np.log(h_values), np.log(eigen_res), 1)[0]) if len(n_values) > 1 else float("nan")
    return ResidualStudy(
        n_values=list(n_values), h_values=h_values, residual_zero=zero_res, residual_eigen=eigen_res,
        discrete_eigenvalues=eigenvalues, fitted_order=order,
    )


__all__ = [
    "ForwardSolveError",
    "PicardDivergenceError",
    "SourceModelError",
    "SystemState",
    "PicardSolver",
    "boundary_substituted",
    "pde_residual",
    "species_residual_norm",
    "picard_step",
    "forward_solve_substituted",
    "forward_solve",
    "forward_constant_bc",
    "eigen_source_bundle",
    "nonuniqueness_with_sources",
    "source_nonuniqueness_study",
]
