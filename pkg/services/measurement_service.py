"""
Measurement service.

Simulates boundary and interior measurements of an electrolyser whose
coefficients are hidden inside a Laboratory: Cauchy data, voltage
differences, interior temperature probes, and the linearised
Dirichlet-to-Neumann experiment.
"""

import hashlib
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from config import get_settings
from models import BoundaryDataSpec, MeasurementRecord, NoiseSpec, PicardOptions, RateReport
from services.coefficient_service import (
    ModelBundle,
    PermittivityField,
    estimate_lipschitz,
    invert_temperature,
    inverse_lipschitz,
)
from services.elliptic_service import (
    LinearEllipticProblem,
    boundary_flux,
    dn_map,
    l_eps_inverse,
    solve_dirichlet,
)
from services.forward_service import (
    ForwardSolveError,
    SystemState,
    forward_solve,
    forward_solve_substituted,
)
from utils.expression_parser import coordinate_function
from utils.grid import (
    BoundaryField,
    Grid,
    ScalarField,
    boundary_integral,
    boundary_norm,
    gradient,
    interpolate,
    normal_trace,
)

logger = logging.getLogger(__name__)

FAMILY_CODES = {"species_flux": 1, "temperature_flux": 2, "voltage": 3, "temperature": 4}


# ===== Exceptions =====

class MeasurementError(Exception):
    """Base exception for measurement errors."""
    pass


class ProbeOutsideDomainError(MeasurementError):
    """Raised when an interior probe lies outside the domain."""
    pass


# ===== Records =====

@dataclass(frozen=True, eq=False)
class CauchyRecord:
    """Boundary values and normal fluxes of one experiment."""

    gamma: tuple[BoundaryField, ...]
    tau: BoundaryField
    species_flux: tuple[BoundaryField, ...]
    temperature_flux: Optional[BoundaryField] = None

    def __post_init__(self) -> None:
        grid = self.tau.grid
        fields = list(self.gamma) + list(self.species_flux)
        if self.temperature_flux is not None:
            fields.append(self.temperature_flux)
        if any(f.grid is not grid for f in fields):
            raise MeasurementError("Cauchy record fields must share one grid")
        if len(self.species_flux) != len(self.gamma):
            raise MeasurementError("Need one flux field per species")

    def reduced(self) -> "CauchyRecord":
        """The record without the temperature flux."""
        return CauchyRecord(self.gamma, self.tau, self.species_flux, None)


@dataclass(frozen=True)
class PublicData:
    """What an inverse-problem caller may know about the laboratory's model."""

    species: int
    dim: int
    charges: tuple[float, ...]
    permittivity: PermittivityField
    lam: float

    @property
    def charge_vector(self) -> np.ndarray:
        return np.asarray(self.charges, dtype=float)


def cauchy_record(state: SystemState, bundle: ModelBundle) -> CauchyRecord:
    """Species fluxes N.(D_i grad c_i) and the temperature flux N.grad T of a converged state."""
    grid = state.grid
    C = state.concentration_matrix()
    X = grid.coordinates
    fluxes = tuple(
        boundary_flux(ScalarField(grid, bundle.diffusion[i].value(C, state.temperature.values, X)), c)
        for i, c in enumerate(state.concentrations)
    )
    temperature_flux = normal_trace(grid, gradient(state.temperature))
    return CauchyRecord(state.gamma, state.tau, fluxes, temperature_flux)


def _check_boundary_node(grid: Grid, node: int) -> None:
    if not 0 <= node < grid.node_count or grid.boundary_position[node] < 0:
        raise MeasurementError(f"Node {node} is not a boundary node")


def voltage(state: SystemState, x: int, y: int, potential=None) -> float:
    """
    Voltage difference between two boundary nodes.

    sigma(x) - sigma(y) by default; phi(c, T, .) evaluated directly when a potential is given.
    """
    grid = state.grid
    _check_boundary_node(grid, x)
    _check_boundary_node(grid, y)
    if potential is None:
        return float(state.substituted.values[x] - state.substituted.values[y])
    nodes = np.array([x, y])
    values = potential.value(
        state.concentration_matrix()[nodes], state.temperature.values[nodes], grid.coordinates[nodes]
    )
    return float(values[0] - values[1])


def interior_temperature(
    state: SystemState,
    points: np.ndarray,
    noise_std: float = 0.0,
    rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """
    Temperatures at arbitrary points by multilinear interpolation.

    Raises:
        ProbeOutsideDomainError: If any point lies outside the grid extent
    """
    grid = state.grid
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != grid.dim:
        raise MeasurementError(f"Probe points need {grid.dim} coordinates")
    outside = ~grid.contains(points)
    if outside.any():
        raise ProbeOutsideDomainError(f"Probe point {points[np.argmax(outside)].tolist()} lies outside the domain")
    values = interpolate(state.temperature, points)
    if noise_std > 0:
        rng = rng or np.random.default_rng()
        values = values + rng.normal(0.0, noise_std, size=values.shape)
    return values


def probe_temperature_flux(state: SystemState, r: float) -> BoundaryField:
    """(T(x) - T(x - r N(x))) / r at every boundary node; approximates N.grad T to O(r)."""
    grid = state.grid
    if not 0 < r < min(hi - lo for lo, hi in grid.extent):
        raise MeasurementError(f"Probe offset r={r} must be positive and smaller than the domain")
    boundary_points = grid.coordinates[grid.boundary_ids]
    inner = boundary_points - r * grid.normals
    inner_values = interpolate(state.temperature, inner)
    return BoundaryField(grid, (state.temperature.values[grid.boundary_ids] - inner_values) / r)


# ===== Boundary data construction =====

def bump_profile(grid: Grid, node: int, radius: float = 1.0) -> np.ndarray:
    """
    Multilinear hat at a boundary node, sampled at every boundary node.

    radius is in grid spacings per axis; radius 1 gives exactly 1 at the node and 0 at every other node.
    """
    if radius <= 0:
        raise MeasurementError(f"Bump radius must be positive, got {radius}")
    points = grid.coordinates[grid.boundary_ids]
    scaled = np.abs(points - grid.coordinates[node]) / (radius * np.array(grid.spacing))
    return np.prod(np.maximum(0.0, 1.0 - scaled), axis=1)


def boundary_data_through(
    grid: Grid,
    anchors: Sequence[tuple[int, Sequence[float]]],
    base: Sequence[float],
    radius: float = 1.0
) -> tuple[tuple[BoundaryField, ...], BoundaryField]:
    """
    Boundary data (gamma_1..gamma_M, tau) equal to base away from the anchors and to z at each anchor node.

    Args:
        grid: Target grid
        anchors: (boundary node, z = (p_1..p_M, s)) pairs
        base: Background value z of length M + 1
        radius: Bump radius in grid spacings

    Raises:
        MeasurementError: If anchors are not boundary nodes or their bumps overlap
    """
    base = np.asarray(base, dtype=float)
    values = np.tile(base, (grid.boundary_ids.size, 1))
    profiles = []
    for node, z in anchors:
        _check_boundary_node(grid, node)
        z = np.asarray(z, dtype=float)
        if z.shape != base.shape:
            raise MeasurementError(f"Anchor value has {z.size} components, expected {base.size}")
        profile = bump_profile(grid, node, radius)
        profiles.append((node, profile))
        values += profile[:, None] * (z - base)[None, :]
    for node_a, _ in profiles:
        for node_b, profile_b in profiles:
            if node_a != node_b and profile_b[grid.boundary_position[node_a]] > 0:
                raise MeasurementError(f"Bumps at nodes {node_a} and {node_b} overlap")
    gamma = tuple(BoundaryField(grid, values[:, i]) for i in range(base.size - 1))
    return gamma, BoundaryField(grid, values[:, -1])


def boundary_data_from_spec(
    grid: Grid,
    spec: BoundaryDataSpec,
    species: int
) -> tuple[tuple[BoundaryField, ...], BoundaryField]:
    """Evaluate configured constant or expression boundary data on a grid."""
    if len(spec.gamma) != species:
        raise MeasurementError(f"Boundary data '{spec.label}' lists {len(spec.gamma)} concentrations, expected {species}")
    gamma = tuple(BoundaryField.from_function(grid, coordinate_function(g, grid.dim)) for g in spec.gamma)
    tau = BoundaryField.from_function(grid, coordinate_function(spec.tau, grid.dim))
    return gamma, tau


# ===== Laboratory =====

class Laboratory:
    """
    Experiment interface over a hidden model.

    Callers prescribe Dirichlet data and receive measurements; the model
    bundle itself stays private. Forward solves are kept in a bounded
    least-recently-used cache keyed by experiment.
    """

    def __init__(
        self,
        bundle: ModelBundle,
        grid: Grid,
        options: Optional[PicardOptions] = None,
        noise: Optional[NoiseSpec] = None,
        seed: int = 0,
        max_workers: Optional[int] = None,
        cache_size: Optional[int] = None,
        keep_records: bool = True
    ):
        """
        Initialize laboratory.

        Args:
            bundle: The true model (kept private)
            grid: Grid experiments are solved on
            options: Picard options for forward solves
            noise: Measurement noise per family, off by default
            seed: Run seed for noise generation
            max_workers: Thread-pool size of each forward solve
            cache_size: Solved experiments kept in memory (settings default)
            keep_records: Keep a MeasurementRecord per measurement for serialization
        """
        if grid.dim != bundle.dim:
            raise MeasurementError(f"Grid dimension {grid.dim} does not match model dimension {bundle.dim}")
        settings = get_settings()
        self._bundle = bundle
        self._grid = grid
        self._options = options or PicardOptions()
        self._noise = noise or NoiseSpec()
        self._seed = seed
        self._max_workers = max_workers or settings.max_workers
        self._cache_size = settings.laboratory_cache_size if cache_size is None else cache_size
        if self._cache_size < 1:
            raise MeasurementError(f"Cache size must be at least 1, got {self._cache_size}")
        self._keep_records = keep_records
        self._cache: OrderedDict[str, SystemState] = OrderedDict()
        self._records: list[MeasurementRecord] = []
        self._lock = threading.Lock()
        self.logger = logger

    @property
    def grid(self) -> Grid:
        return self._grid

    @property
    def public(self) -> PublicData:
        bundle = self._bundle
        return PublicData(bundle.species, bundle.dim, bundle.charges, bundle.permittivity, bundle.lam)

    @property
    def records(self) -> list[MeasurementRecord]:
        with self._lock:
            return list(self._records)

    @property
    def cached_experiments(self) -> int:
        with self._lock:
            return len(self._cache)

    def clear(self) -> None:
        """Drop cached forward solves and kept measurement records."""
        with self._lock:
            self._cache.clear()
            self._records.clear()

    @staticmethod
    def digest(gamma: Sequence[BoundaryField], tau: BoundaryField) -> str:
        hasher = hashlib.md5()
        for field in list(gamma) + [tau]:
            hasher.update(np.ascontiguousarray(field.values).tobytes())
        return hasher.hexdigest()

    def experiment_id(self, gamma: Sequence[BoundaryField], tau: BoundaryField) -> str:
        return self.digest(gamma, tau)[:12]

    def _state(self, gamma: Sequence[BoundaryField], tau: BoundaryField) -> SystemState:
        key = self.digest(gamma, tau)
        with self._lock:
            cached = self._cache.get(key)
            if cached is not None:
                self._cache.move_to_end(key)
                return cached
        state = forward_solve(self._bundle, gamma, tau, self._options, self._max_workers)
        with self._lock:
            self._cache.setdefault(key, state)
            self._cache.move_to_end(key)
            while len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        self.logger.debug(f"Experiment {key[:12]} solved in {state.report.iterations} Picard steps")
        return state

    def _noisy(self, values: np.ndarray, family: str, std: float, key: str, stream: int = 0):
        if std <= 0:
            return values, None
        seed = [self._seed, int(key[:8], 16), FAMILY_CODES[family], stream]
        rng = np.random.default_rng(seed)
        return values + rng.normal(0.0, std, size=values.shape), seed

    def _record(self, key: str, label: str, family: str, values: np.ndarray, std: float, seed) -> None:
        if not self._keep_records:
            return
        record = MeasurementRecord(
            experiment_id=key[:12],
            boundary={"label": label, "digest": key},
            family=family,
            values=np.asarray(values).tolist(),
            noise_std=std,
            noise_seed=seed,
        )
        with self._lock:
            self._records.append(record)

    def cauchy(
        self,
        gamma: Sequence[BoundaryField],
        tau: BoundaryField,
        reduced: bool = False,
        label: str = ""
    ) -> CauchyRecord:
        """Cauchy data (or reduced Cauchy data) of one experiment."""
        key = self.digest(gamma, tau)
        record = cauchy_record(self._state(gamma, tau), self._bundle)
        fluxes = []
        for i, flux in enumerate(record.species_flux):
            values, seed = self._noisy(flux.values, "species_flux", self._noise.flux_std, key, i)
            self._record(key, label, "species_flux", values, self._noise.flux_std, seed)
            fluxes.append(BoundaryField(self._grid, values))
        temperature_flux = None
        if not reduced:
            values, seed = self._noisy(record.temperature_flux.values, "temperature_flux", self._noise.flux_std, key)
            self._record(key, label, "temperature_flux", values, self._noise.flux_std, seed)
            temperature_flux = BoundaryField(self._grid, values)
        return CauchyRecord(record.gamma, record.tau, tuple(fluxes), temperature_flux)

    def voltages(
        self,
        gamma: Sequence[BoundaryField],
        tau: BoundaryField,
        reference: int,
        label: str = ""
    ) -> BoundaryField:
        """Voltage differences sigma(x) - sigma(reference) for every boundary node x."""
        _check_boundary_node(self._grid, reference)
        key = self.digest(gamma, tau)
        sigma = self._state(gamma, tau).substituted.values
        values = sigma[self._grid.boundary_ids] - sigma[reference]
        values, seed = self._noisy(values, "voltage", self._noise.voltage_std, key, reference)
        self._record(key, label, "voltage", values, self._noise.voltage_std, seed)
        return BoundaryField(self._grid, values)

    def voltage(self, gamma: Sequence[BoundaryField], tau: BoundaryField, x: int, y: int) -> float:
        return float(self.voltages(gamma, tau, reference=y).at(x))

    def temperatures(
        self,
        gamma: Sequence[BoundaryField],
        tau: BoundaryField,
        points: np.ndarray,
        label: str = ""
    ) -> np.ndarray:
        """Interior temperature probes."""
        key = self.digest(gamma, tau)
        values = interior_temperature(self._state(gamma, tau), points)
        values, seed = self._noisy(values, "temperature", self._noise.temperature_std, key)
        self._record(key, label, "temperature", values, self._noise.temperature_std, seed)
        return values

# ===== Linearisation =====

def _background(bundle: ModelBundle, mu: np.ndarray, eta0: BoundaryField, tol: Optional[float]):
    grid = eta0.grid
    eps = bundle.permittivity.on_grid(grid)
    charge = ScalarField.constant(grid, float(np.dot(bundle.charge_vector, mu)))
    sigma0 = l_eps_inverse(eps, charge, eta0, lam=bundle.lam, tol=tol)
    C = np.tile(mu, (grid.node_count, 1))
    T0 = invert_temperature(bundle.potential, C, sigma0.values, grid.coordinates)
    return sigma0, C, T0


def linearised_dn(
    bundle: ModelBundle,
    mu: Sequence[float],
    eta0: BoundaryField,
    f: Sequence[BoundaryField],
    tol: Optional[float] = None
) -> list[BoundaryField]:
    """
    Dirichlet-to-Neumann maps of the coefficients frozen at the constant background mu.

    Raises:
        MeasurementError: If the bundle has sources
    """
    if not bundle.is_source_free:
        raise MeasurementError("The linearised map is defined for source-free models")
    mu = np.asarray(mu, dtype=float)
    if mu.size != bundle.species or len(f) != bundle.species:
        raise MeasurementError(f"Need {bundle.species} background values and directions")
    grid = eta0.grid
    _, C, T0 = _background(bundle, mu, eta0, tol)
    return [
        dn_map(ScalarField(grid, bundle.diffusion[i].value(C, T0, grid.coordinates)), f[i], lam=bundle.lam, tol=tol)
        for i in range(bundle.species)
    ]


def linearisation_bound(
    bundle: ModelBundle,
    mu: np.ndarray,
    eta0: BoundaryField,
    f: Sequence[BoundaryField],
    tol: Optional[float] = None
) -> float:
    """
    Constant C with |flux(t)/t - linearised flux| <= C t, from declared model bounds.

    Uses Lipschitz constants of D_i and h, the ellipticity ratio and the size of the
    harmonic-type extensions u_i of the directions f_i.
    """
    grid = eta0.grid
    sigma0, C, T0 = _background(bundle, mu, eta0, tol)
    p_ranges = [(m - 1.0, m + 1.0) for m in mu]
    s_range = (float(sigma0.values.min()) - 1.0, float(sigma0.values.max()) + 1.0)
    lipschitz_d = max(estimate_lipschitz(d, p_ranges, s_range, grid.extent) for d in bundle.diffusion)
    lipschitz_h = inverse_lipschitz(bundle.potential)
    if lipschitz_h is None:
        dp = bundle.potential.partial_p(C, T0, grid.coordinates)
        lipschitz_h = max(1.0, float(np.abs(dp).max())) / max(bundle.potential.lower_bound, bundle.lam)

    eps = bundle.permittivity.on_grid(grid)
    omega = l_eps_inverse(eps, ScalarField.constant(grid, 1.0), BoundaryField.constant(grid, 0.0), lam=bundle.lam)
    coupling = 1.0 + float(np.abs(bundle.charge_vector).sum()) * float(np.abs(omega.values).max())

    size = 0.0
    for i in range(bundle.species):
        nu = ScalarField(grid, bundle.diffusion[i].value(C, T0, grid.coordinates))
        u = _extension(nu, f[i], bundle.lam, tol)
        size = max(size, float(np.abs(u.values).max()) * float(np.abs(gradient(u)).max()))

    perimeter = boundary_integral(BoundaryField.constant(grid, 1.0))
    ratio = 1.0 + bundle.upper / bundle.lam
    return 2.0 * lipschitz_d * (1.0 + lipschitz_h) * coupling * ratio * size * np.sqrt(perimeter)


def _extension(nu: ScalarField, f: BoundaryField, lam: float, tol: Optional[float]) -> ScalarField:
    problem = LinearEllipticProblem(nu.grid, nu, ScalarField.constant(nu.grid, 0.0), f, lam)
    solution, _ = solve_dirichlet(problem, tol=tol)
    return solution


def linearisation_rate(
    bundle: ModelBundle,
    mu: Sequence[float],
    f: Sequence[BoundaryField],
    t_values: Optional[Sequence[float]] = None,
    eta0: Optional[BoundaryField] = None,
    options: Optional[PicardOptions] = None,
    max_workers: Optional[int] = None
) -> RateReport:
    """
    Error of flux(t) / t against the linearised flux for boundary data mu + t f.

    Args:
        bundle: Source-free model
        mu: Constant background concentrations
        f: Direction per species
        t_values: Positive, strictly decreasing; 2^-1 .. 2^-8 by default
        eta0: Fixed sigma boundary data; phi(mu, 0, x) by default
        options: Picard options; tolerances are tightened for this experiment

    Returns:
        RateReport with per-t errors and the slope fitted on the last four converged points
    """
    if not bundle.is_source_free:
        raise MeasurementError("The linearisation experiment needs a source-free model")
    mu = np.asarray(mu, dtype=float)
    grid = f[0].grid
    t_values = list(t_values) if t_values is not None else [2.0 ** -k for k in range(1, 9)]
    if any(t <= 0 for t in t_values) or any(b >= a for a, b in zip(t_values, t_values[1:])):
        raise MeasurementError("t values must be positive and strictly decreasing")
    if eta0 is None:
        points = grid.coordinates[grid.boundary_ids]
        eta0 = BoundaryField(grid, bundle.potential.value(np.tile(mu, (points.shape[0], 1)), 0.0, points))

    base = options or PicardOptions()
    options = base.model_copy(update={
        "linear_tol": min(base.linear_tol, 1e-12),
        "fixed_point_tol": min(base.fixed_point_tol, 1e-11),
    })
    reference = linearised_dn(bundle, mu, eta0, f, tol=options.linear_tol)

    errors: list[Optional[float]] = []
    converged: list[bool] = []
    for t in t_values:
        gamma = [BoundaryField(grid, mu[i] + t * f[i].values) for i in range(bundle.species)]
        try:
            state = forward_solve_substituted(bundle, gamma, eta0, options, max_workers)
        except ForwardSolveError as e:
            logger.warning(f"⚠️ Forward solve failed at t={t:g}: {e}")
            errors.append(None)
            converged.append(False)
            continue
        record = cauchy_record(state, bundle)
        squared = 0.0
        for flux, linear in zip(record.species_flux, reference):
            squared += boundary_norm(BoundaryField(grid, flux.values / t - linear.values)) ** 2
        errors.append(float(np.sqrt(squared)))
        converged.append(True)
        logger.debug(f"Linearisation t={t:g}: error {errors[-1]:.3e}")

    usable = [(t, e) for t, e in zip(t_values, errors) if e is not None and e > 0][-4:]
    slope = None
    if len(usable) >= 2:
        ts, es = zip(*usable)
        slope = float(np.polyfit(np.log(ts), np.log(es), 1)[0])

    bound = linearisation_bound(bundle, mu, eta0, f, tol=options.linear_tol)
    logger.info(f"📊 Linearisation rate: slope {slope}, bound constant {bound:.3e}")
    return RateReport(
        t_values=t_values, errors=errors, converged=converged, slope=slope,
        fit_points=len(usable), bound_constant=bound,
    )


__all__ = [
    "MeasurementError",
    "ProbeOutsideDomainError",
    "CauchyRecord",
    "PublicData",
    "Laboratory",
    "cauchy_record",
    "voltage",
    "interior_temperature",
    "probe_temperature_flux",
    "bump_profile",
    "boundary_data_through",
    "boundary_data_from_spec",
    "linearised_dn",
    "linearisation_bound",
    "linearisation_rate",
]
