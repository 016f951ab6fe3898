"""
Coefficient models service.

Defines the potential phi(p, s, x), diffusion coefficients D_i(p, s, x),
sources g_i(p, s, x) and the permittivity eps(x), the catalogue that builds
them from run configuration, sampled ellipticity checks and the pointwise
inversion s -> h(p, s, x) of the potential in its temperature argument.

All model callables are vectorized: p is (K, M), s is (K,), x is (K, dim).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from config import get_settings
from models import (
    DiffusionSpec,
    EllipticityReport,
    EllipticityViolation,
    ModelSpec,
    PermittivitySpec,
    PotentialSpec,
    SourceSpec,
)
from utils.expression_parser import ExpressionError, compile_expression, standard_variables
from utils.grid import Grid, ScalarField
from utils.root_finding import RootFindingError, solve_increasing

logger = logging.getLogger(__name__)

FD_STEP = 1e-6

StateFunction = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
SpaceFunction = Callable[[np.ndarray], np.ndarray]


# ===== Exceptions =====

class CoefficientError(Exception):
    """Base exception for coefficient model errors."""
    pass


class EllipticityError(CoefficientError):
    """Raised when a sampled coefficient violates the ellipticity bounds."""

    def __init__(self, message: str, report: EllipticityReport):
        super().__init__(message)
        self.report = report


class InversionError(CoefficientError):
    """Raised when phi(p, ., x) = s cannot be solved."""
    pass


# ===== Helpers =====

def prepare_arguments(p, s, x, species: int, dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Broadcast (p, s, x) to shapes (K, M), (K,), (K, dim)."""
    s = np.atleast_1d(np.asarray(s, dtype=float)).ravel()
    p = np.asarray(p, dtype=float).reshape(-1, species)
    x = np.asarray(x, dtype=float).reshape(-1, dim)
    k = max(s.shape[0], p.shape[0], x.shape[0])
    try:
        return (
            np.broadcast_to(p, (k, species)),
            np.broadcast_to(s, (k,)),
            np.broadcast_to(x, (k, dim)),
        )
    except ValueError as e:
        raise CoefficientError(f"Incompatible argument lengths {p.shape[0]}, {s.shape[0]}, {x.shape[0]}") from e


def _is_scalar_call(p, s, x) -> bool:
    return np.ndim(s) == 0 and np.ndim(p) <= 1 and np.ndim(x) <= 1


def _expression_env(P: np.ndarray, S: np.ndarray, X: np.ndarray) -> dict[str, np.ndarray]:
    env = {f"p{i + 1}": P[:, i] for i in range(P.shape[1])}
    env["s"] = S
    env.update({f"x{j + 1}": X[:, j] for j in range(X.shape[1])})
    return env


def _compile(text: str, species: int, dim: int, parameters: int = 0):
    try:
        return compile_expression(text, standard_variables(species, dim, parameters))
    except ExpressionError as e:
        raise CoefficientError(str(e)) from e


# ===== Potential =====

class PotentialModel:
    """
    Electrochemical potential phi(p, s, x), strictly increasing in s.

    Partials are analytic when supplied, otherwise centred finite differences.
    """

    def __init__(
        self,
        func: StateFunction,
        species: int,
        dim: int,
        lower_bound: float,
        gradient_bound: Optional[float] = None,
        ds: Optional[StateFunction] = None,
        dp: Optional[StateFunction] = None,
        dx: Optional[StateFunction] = None,
        name: str = "potential"
    ):
        """
        Args:
            func: Vectorized phi
            species: Number of concentration arguments M
            dim: Spatial dimension
            lower_bound: Declared lower bound of d_s phi
            gradient_bound: Declared bound on all first partials
            ds, dp, dx: Optional analytic partials; dp returns (K, M), dx returns (K, dim)
            name: Label for logs
        """
        if lower_bound < 0:
            raise CoefficientError(f"Lower bound of d_s phi must be non-negative, got {lower_bound}")
        self._func = func
        self.species = species
        self.dim = dim
        self.lower_bound = float(lower_bound)
        self.gradient_bound = gradient_bound
        self._ds = ds
        self._dp = dp
        self._dx = dx
        self.name = name

    def _args(self, p, s, x):
        return prepare_arguments(p, s, x, self.species, self.dim)

    def value(self, p, s, x) -> np.ndarray:
        P, S, X = self._args(p, s, x)
        return np.broadcast_to(self._func(P, S, X), S.shape).astype(float)

    def partial_s(self, p, s, x) -> np.ndarray:
        P, S, X = self._args(p, s, x)
        if self._ds is not None:
            return np.broadcast_to(self._ds(P, S, X), S.shape).astype(float)
        return (self._func(P, S + FD_STEP, X) - self._func(P, S - FD_STEP, X)) / (2 * FD_STEP)

    def partial_p(self, p, s, x) -> np.ndarray:
        P, S, X = self._args(p, s, x)
        if self._dp is not None:
            return np.broadcast_to(self._dp(P, S, X), P.shape).astype(float)
        columns = []
        for i in range(self.species):
            step = np.zeros(self.species)
            step[i] = FD_STEP
            columns.append((self._func(P + step, S, X) - self._func(P - step, S, X)) / (2 * FD_STEP))
        return np.stack(columns, axis=1)

    def partial_x(self, p, s, x) -> np.ndarray:
        P, S, X = self._args(p, s, x)
        if self._dx is not None:
            return np.broadcast_to(self._dx(P, S, X), X.shape).astype(float)
        columns = []
        for j in range(self.dim):
            step = np.zeros(self.dim)
            step[j] = FD_STEP
            columns.append((self._func(P, S, X + step) - self._func(P, S, X - step)) / (2 * FD_STEP))
        return np.stack(columns, axis=1)

    def shifted(self, r: float) -> "PotentialModel":
        """phi + r (the gauge freedom of voltage data)."""
        func = self._func
        return PotentialModel(
            lambda P, S, X: func(P, S, X) + r,
            self.species, self.dim, self.lower_bound, self.gradient_bound,
            self._ds, self._dp, self._dx, name=f"{self.name}+{r:g}",
        )

    def with_interior_bump(self, bump: SpaceFunction, other: "PotentialModel") -> "PotentialModel":
        """
        phi + bump(x) * other(p, s, x) with bump compactly supported inside the domain.

        bump must take values in [0, 1]; d_s stays above lower_bound when other is
        non-decreasing in s.
        """
        if other.species != self.species or other.dim != self.dim:
            raise CoefficientError("Bump potential must share species count and dimension")
        func = self._func

        def modified(P, S, X):
            return func(P, S, X) + bump(X) * other._func(P, S, X)

        return PotentialModel(modified, self.species, self.dim, self.lower_bound, name=f"{self.name}+bump")


def affine_potential(
    p_coefficients: Sequence[float],
    s_coefficient: float,
    x_coefficients: Sequence[float],
    offset: float = 0.0,
    amplitude: float = 0.0,
    frequency: float = 1.0
) -> PotentialModel:
    """a.p + b s + c.x + d, optionally plus amplitude * sin(frequency * s)."""
    a = np.asarray(p_coefficients, dtype=float)
    c = np.asarray(x_coefficients, dtype=float)
    b = float(s_coefficient)
    wiggle = abs(amplitude * frequency)

    def func(P, S, X):
        return P @ a + b * S + X @ c + offset + amplitude * np.sin(frequency * S)

    def ds(P, S, X):
        return b + amplitude * frequency * np.cos(frequency * S)

    bound = float(max(np.max(np.abs(a), initial=0.0), np.max(np.abs(c), initial=0.0), b + wiggle))
    name = "sinusoidal" if amplitude else "affine"
    return PotentialModel(
        func, a.size, c.size, lower_bound=max(b - wiggle, 0.0), gradient_bound=bound,
        ds=ds,
        dp=lambda P, S, X: np.broadcast_to(a, P.shape),
        dx=lambda P, S, X: np.broadcast_to(c, X.shape),
        name=name,
    )


def product_potential(
    base: float,
    p_coefficients: Sequence[float],
    x_coefficients: Sequence[float],
    offset: float = 0.0,
    lower_bound: Optional[float] = None
) -> PotentialModel:
    """(base + a.p) * s + c.x + d; increasing in s only where base + a.p > 0."""
    a = np.asarray(p_coefficients, dtype=float)
    c = np.asarray(x_coefficients, dtype=float)

    def func(P, S, X):
        return (base + P @ a) * S + X @ c + offset

    return PotentialModel(
        func, a.size, c.size,
        lower_bound=base if lower_bound is None else lower_bound,
        ds=lambda P, S, X: base + P @ a,
        dp=lambda P, S, X: S[:, None] * a[None, :],
        dx=lambda P, S, X: np.broadcast_to(c, X.shape),
        name="product",
    )


def expression_potential(
    text: str,
    species: int,
    dim: int,
    lower_bound: float,
    gradient_bound: Optional[float] = None
) -> PotentialModel:
    compiled = _compile(text, species, dim)
    return PotentialModel(
        lambda P, S, X: compiled(_expression_env(P, S, X)),
        species, dim, lower_bound, gradient_bound, name=text,
    )


# ===== Diffusion =====

class DiffusionModel:
    """Diffusion coefficient D(p, s, x) with declared bounds lower <= D <= upper."""

    def __init__(
        self,
        func: StateFunction,
        species: int,
        dim: int,
        lower: float,
        upper: float,
        lipschitz: Optional[float] = None,
        state_dependent: bool = True,
        name: str = "diffusion"
    ):
        if not 0 < lower <= upper:
            raise CoefficientError(f"Diffusion bounds must satisfy 0 < lower <= upper, got {lower}, {upper}")
        self._func = func
        self.species = species
        self.dim = dim
        self.lower = float(lower)
        self.upper = float(upper)
        self.lipschitz = lipschitz
        self.state_dependent = state_dependent
        self.name = name

    def value(self, p, s, x) -> np.ndarray:
        P, S, X = prepare_arguments(p, s, x, self.species, self.dim)
        return np.broadcast_to(self._func(P, S, X), S.shape).astype(float)


def constant_diffusion(value: float, species: int, dim: int, lower: float, upper: float) -> DiffusionModel:
    return DiffusionModel(
        lambda P, S, X: np.full(S.shape, float(value)), species, dim, lower, upper,
        lipschitz=0.0, state_dependent=False, name=f"const {value:g}",
    )


def affine_diffusion(
    value: float,
    p_coefficients: Sequence[float],
    s_coefficient: float,
    x_coefficients: Sequence[float],
    lower: float,
    upper: float
) -> DiffusionModel:
    a = np.asarray(p_coefficients, dtype=float)
    c = np.asarray(x_coefficients, dtype=float)
    b = float(s_coefficient)
    lipschitz = float(np.sqrt(np.sum(a ** 2) + b ** 2))
    return DiffusionModel(
        lambda P, S, X: value + P @ a + b * S + X @ c, a.size, c.size, lower, upper,
        lipschitz=lipschitz, state_dependent=lipschitz > 0, name="affine",
    )


def expression_diffusion(
    text: str,
    species: int,
    dim: int,
    lower: float,
    upper: float,
    lipschitz: Optional[float] = None
) -> DiffusionModel:
    compiled = _compile(text, species, dim)
    state_names = [f"p{i + 1}" for i in range(species)] + ["s"]
    return DiffusionModel(
        lambda P, S, X: compiled(_expression_env(P, S, X)), species, dim, lower, upper,
        lipschitz=lipschitz, state_dependent=compiled.uses_any(state_names), name=text,
    )


@dataclass(frozen=True)
class DiffusionFamily:
    """Parametrized diffusion coefficients D_theta given by an expression in theta1..thetaK."""

    expression: str
    species: int
    dim: int
    parameter_count: int
    lower: float
    upper: float
    _compiled: object = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not 1 <= self.parameter_count <= 8:
            raise CoefficientError(f"Families take 1 to 8 parameters, got {self.parameter_count}")
        compiled = _compile(self.expression, self.species, self.dim, self.parameter_count)
        object.__setattr__(self, "_compiled", compiled)

    @property
    def parameter_names(self) -> list[str]:
        return [f"theta{k + 1}" for k in range(self.parameter_count)]

    def build(self, theta: Sequence[float]) -> DiffusionModel:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.parameter_count,):
            raise CoefficientError(f"Expected {self.parameter_count} parameters, got {theta.shape}")
        compiled = self._compiled
        bound = {name: float(v) for name, v in zip(self.parameter_names, theta)}

        def func(P, S, X):
            env = _expression_env(P, S, X)
            env.update(bound)
            return compiled(env)

        state_names = [f"p{i + 1}" for i in range(self.species)] + ["s"]
        return DiffusionModel(
            func, self.species, self.dim, self.lower, self.upper,
            state_dependent=compiled.uses_any(state_names), name=f"{self.expression} @ {theta.tolist()}",
        )


# ===== Sources =====

class SourceModel:
    """Source term g(p, s, x) with growth |g| <= C1 + C2 |(p, s)|."""

    def __init__(
        self,
        func: StateFunction,
        species: int,
        dim: int,
        growth: tuple[float, float] = (0.0, 0.0),
        is_zero: bool = False,
        name: str = "source"
    ):
        self._func = func
        self.species = species
        self.dim = dim
        self.growth = growth
        self.is_zero = is_zero
        self.name = name

    def value(self, p, s, x) -> np.ndarray:
        P, S, X = prepare_arguments(p, s, x, self.species, self.dim)
        return np.broadcast_to(self._func(P, S, X), S.shape).astype(float)

    @classmethod
    def zero(cls, species: int, dim: int) -> "SourceModel":
        return cls(lambda P, S, X: np.zeros(S.shape), species, dim, is_zero=True, name="zero")


def smooth_cutoff(r: np.ndarray) -> np.ndarray:
    """C-infinity function equal to 1 for r <= 1 and 0 for r >= 2."""
    r = np.asarray(r, dtype=float)

    def ramp(t):
        safe = np.where(t > 0, t, 1.0)
        return np.where(t > 0, np.exp(-1.0 / safe), 0.0)

    outer = ramp(2.0 - r)
    return outer / (outer + ramp(r - 1.0))


def eigen_bump_source(species: int, dim: int, index: int, rate: float) -> SourceModel:
    """g = rate * p_index * cutoff(|p_index|): linear near the origin, bounded overall."""

    def func(P, S, X):
        p = P[:, index]
        return rate * p * smooth_cutoff(np.abs(p))

    return SourceModel(func, species, dim, growth=(2.0 * abs(rate), 0.0), name=f"eigen-bump {rate:g}")


def expression_source(text: str, species: int, dim: int, growth: tuple[float, float]) -> SourceModel:
    compiled = _compile(text, species, dim)
    return SourceModel(lambda P, S, X: compiled(_expression_env(P, S, X)), species, dim, growth, name=text)


# ===== Permittivity =====

class PermittivityField:
    """Known permittivity eps(x)."""

    def __init__(self, func: SpaceFunction, dim: int, name: str = "permittivity"):
        self._func = func
        self.dim = dim
        self.name = name

    def value(self, x) -> np.ndarray:
        X = np.asarray(x, dtype=float).reshape(-1, self.dim)
        return np.broadcast_to(self._func(X), (X.shape[0],)).astype(float)

    def on_grid(self, grid: Grid) -> ScalarField:
        return ScalarField(grid, self.value(grid.coordinates))

    @classmethod
    def constant(cls, value: float, dim: int) -> "PermittivityField":
        return cls(lambda X: np.full(X.shape[0], float(value)), dim, name=f"const {value:g}")

    @classmethod
    def layered(cls, breakpoints: Sequence[float], values: Sequence[float], dim: int) -> "PermittivityField":
        """Piecewise constant over slabs along x1."""
        edges = np.asarray(breakpoints, dtype=float)
        levels = np.asarray(values, dtype=float)
        if levels.size != edges.size + 1 or np.any(np.diff(edges) <= 0):
            raise CoefficientError("Layered permittivity needs increasing breakpoints and one more value")
        return cls(lambda X: levels[np.searchsorted(edges, X[:, 0], side="right")], dim, name="layered")

    @classmethod
    def expression(cls, text: str, dim: int) -> "PermittivityField":
        compiled = _compile(text, 0, dim)

        def func(X):
            return compiled({f"x{j + 1}": X[:, j] for j in range(dim)})

        return cls(func, dim, name=text)


# ===== Bundle =====

@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Complete set of coefficients for one electrolyser model."""

    species: int
    charges: tuple[float, ...]
    potential: PotentialModel
    diffusion: tuple[DiffusionModel, ...]
    sources: tuple[SourceModel, ...]
    permittivity: PermittivityField
    lam: float
    upper: float = 10.0

    def __post_init__(self) -> None:
        if len(self.charges) != self.species:
            raise CoefficientError(f"Expected {self.species} charges, got {len(self.charges)}")
        if len(self.diffusion) != self.species or len(self.sources) != self.species:
            raise CoefficientError("Need one diffusion model and one source per species")
        if self.lam <= 0:
            raise CoefficientError(f"lambda must be positive, got {self.lam}")

    @property
    def dim(self) -> int:
        return self.potential.dim

    @property
    def charge_vector(self) -> np.ndarray:
        return np.asarray(self.charges, dtype=float)

    @property
    def is_source_free(self) -> bool:
        return all(source.is_zero for source in self.sources)

    def with_potential(self, potential: PotentialModel) -> "ModelBundle":
        return replace(self, potential=potential)

    def with_diffusion(self, diffusion: Sequence[DiffusionModel]) -> "ModelBundle":
        return replace(self, diffusion=tuple(diffusion))


def _vector(values: Sequence[float], length: int, label: str) -> list[float]:
    if not values:
        return [0.0] * length
    if len(values) != length:
        raise CoefficientError(f"{label} needs {length} entries, got {len(values)}")
    return list(values)


def build_potential(spec: PotentialSpec, species: int, dim: int) -> PotentialModel:
    """Catalogue lookup for the potential."""
    a = _vector(spec.p_coefficients, species, "p_coefficients")
    c = _vector(spec.x_coefficients, dim, "x_coefficients")
    if spec.kind == "affine":
        model = affine_potential(a, spec.s_coefficient, c, spec.offset)
    elif spec.kind == "sinusoidal":
        model = affine_potential(a, spec.s_coefficient, c, spec.offset, spec.amplitude, spec.frequency)
    elif spec.kind == "product":
        model = product_potential(spec.base, a, c, spec.offset, spec.lower_bound)
    else:
        if spec.lower_bound is None:
            raise CoefficientError("Expression potentials need a declared lower_bound")
        model = expression_potential(spec.expression, species, dim, spec.lower_bound, spec.gradient_bound)
    if spec.lower_bound is not None:
        model.lower_bound = spec.lower_bound
    if spec.gradient_bound is not None:
        model.gradient_bound = spec.gradient_bound
    return model


def build_diffusion(spec: DiffusionSpec, species: int, dim: int, lower: float, upper: float) -> DiffusionModel:
    if spec.kind == "constant":
        return constant_diffusion(spec.value, species, dim, lower, upper)
    if spec.kind == "affine":
        return affine_diffusion(
            spec.value,
            _vector(spec.p_coefficients, species, "p_coefficients"),
            spec.s_coefficient,
            _vector(spec.x_coefficients, dim, "x_coefficients"),
            lower, upper,
        )
    return expression_diffusion(spec.expression, species, dim, lower, upper, spec.lipschitz)


def build_source(spec: SourceSpec, species: int, dim: int, index: int) -> SourceModel:
    if spec.kind == "zero":
        return SourceModel.zero(species, dim)
    if spec.kind == "eigen_bump":
        rate = spec.eigenvalue if spec.eigenvalue is not None else 2.0 * np.pi ** 2
        return eigen_bump_source(species, dim, index, rate)
    if not spec.expression:
        raise CoefficientError("Expression sources need an expression string")
    return expression_source(spec.expression, species, dim, (spec.growth_c1, spec.growth_c2))


def build_permittivity(spec: PermittivitySpec, dim: int) -> PermittivityField:
    if spec.kind == "constant":
        return PermittivityField.constant(spec.value, dim)
    if spec.kind == "layered":
        return PermittivityField.layered(spec.breakpoints, spec.values, dim)
    return PermittivityField.expression(spec.expression, dim)


def build_bundle(spec: ModelSpec, dim: int) -> ModelBundle:
    """
    Build a ModelBundle from its configuration.

    Single diffusion or source entries are applied to every species.

    Raises:
        CoefficientError: On malformed expressions or inconsistent sizes
    """
    M = spec.species
    diffusion_specs = spec.diffusion * M if len(spec.diffusion) == 1 else spec.diffusion
    source_specs = spec.sources * M if len(spec.sources) == 1 else (spec.sources or [SourceSpec()] * M)
    bundle = ModelBundle(
        species=M,
        charges=tuple(spec.charges),
        potential=build_potential(spec.potential, M, dim),
        diffusion=tuple(build_diffusion(d, M, dim, spec.lam, spec.upper) for d in diffusion_specs),
        sources=tuple(build_source(g, M, dim, i) for i, g in enumerate(source_specs)),
        permittivity=build_permittivity(spec.permittivity, dim),
        lam=spec.lam,
        upper=spec.upper,
    )
    logger.info(f"✅ Built model bundle: M={M}, potential={bundle.potential.name}, source-free={bundle.is_source_free}")
    return bundle


def interior_bump(center: Sequence[float], radius: float) -> SpaceFunction:
    """C-infinity bump exp(1 - 1 / (1 - |x - center|^2 / radius^2)), equal to 1 at the centre."""
    center = np.asarray(center, dtype=float)

    def bump(X):
        r2 = np.sum((np.asarray(X, dtype=float) - center) ** 2, axis=1) / radius ** 2
        inside = r2 < 1.0
        safe = np.where(inside, r2, 0.0)
        return np.where(inside, np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)

    return bump


def interior_bump_bundle(bundle: ModelBundle, bump: SpaceFunction, amplitude: float) -> ModelBundle:
    """
    Bundle with potential phi + amplitude * bump(x) and compensated D_i, g_i.

    D_i and g_i are rewritten so that, as functions of (c, sigma, x), they are unchanged:
    D~(p, t, x) = D(p, h(p, Phi(p, t, x), x), x). The boundary record is therefore
    identical while interior temperatures differ where the bump is non-zero.
    """
    phi = bundle.potential
    constant = PotentialModel(
        lambda P, S, X: np.full(S.shape, float(amplitude)), phi.species, phi.dim, lower_bound=0.0,
        ds=lambda P, S, X: np.zeros(S.shape),
    )
    modified = phi.with_interior_bump(bump, constant)

    def original_temperature(P, S, X):
        return invert_temperature(phi, P, modified.value(P, S, X), X)

    def compensate(model_func):
        return lambda P, S, X: model_func(P, original_temperature(P, S, X), X)

    diffusion = tuple(
        DiffusionModel(
            compensate(d.value) if d.state_dependent else d._func, d.species, d.dim, d.lower, d.upper,
            d.lipschitz, d.state_dependent, name=f"{d.name} (compensated)",
        )
        for d in bundle.diffusion
    )
    sources = tuple(
        g if g.is_zero else SourceModel(compensate(g.value), g.species, g.dim, g.growth, name=f"{g.name} (compensated)")
        for g in bundle.sources
    )
    return replace(bundle, potential=modified, diffusion=diffusion, sources=sources)


# ===== Ellipticity =====

def _sample_points(
    p_ranges: Sequence[tuple[float, float]],
    s_range: tuple[float, float],
    extent: Sequence[tuple[float, float]],
    points_per_axis: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = [np.linspace(lo, hi, points_per_axis) for lo, hi in list(p_ranges) + [s_range] + list(extent)]
    mesh = np.meshgrid(*axes, indexing="ij")
    flat = np.stack([m.ravel() for m in mesh], axis=1)
    M = len(p_ranges)
    return flat[:, :M], flat[:, M], flat[:, M + 1:]


def validate_ellipticity(
    bundle: ModelBundle,
    p_ranges: Sequence[tuple[float, float]],
    s_range: tuple[float, float],
    extent: Sequence[tuple[float, float]],
    points_per_axis: int = 5
) -> EllipticityReport:
    """
    Check eps >= lambda, lambda <= D_i <= upper and d_s phi >= lambda on a sample lattice.

    Only the sampled ranges are checked.

    Returns:
        EllipticityReport naming the first violation, if any
    """
    if len(p_ranges) != bundle.species:
        raise CoefficientError(f"Expected {bundle.species} concentration ranges")
    P, S, X = _sample_points(p_ranges, s_range, extent, points_per_axis)
    eps = bundle.permittivity.value(X)
    diffusion = [model.value(P, S, X) for model in bundle.diffusion]
    ds_phi = bundle.potential.partial_s(P, S, X)

    candidates = [("permittivity", eps, True)]
    candidates += [(f"D{i + 1}", values, True) for i, values in enumerate(diffusion)]
    candidates += [(f"D{i + 1} (upper)", values, False) for i, values in enumerate(diffusion)]
    candidates += [("ds_phi", ds_phi, True)]

    violation = None
    for label, values, is_lower in candidates:
        bad = values < bundle.lam if is_lower else values > bundle.upper
        if np.any(bad):
            k = int(np.argmax(bad))
            violation = EllipticityViolation(
                coefficient=label, value=float(values[k]),
                p=P[k].tolist(), s=float(S[k]), x=X[k].tolist(),
            )
            break

    report = EllipticityReport(
        passed=violation is None,
        lam=bundle.lam,
        min_permittivity=float(eps.min()),
        min_diffusion=[float(v.min()) for v in diffusion],
        max_diffusion=[float(v.max()) for v in diffusion],
        min_ds_phi=float(ds_phi.min()),
        sample_count=int(S.size),
        violation=violation,
    )
    if violation:
        logger.warning(f"⚠️ Ellipticity violated by {violation.coefficient}={violation.value:.4g} at s={violation.s:.4g}")
    return report


def ensure_elliptic(
    bundle: ModelBundle,
    p_ranges: Sequence[tuple[float, float]],
    s_range: tuple[float, float],
    extent: Sequence[tuple[float, float]],
    points_per_axis: int = 5
) -> EllipticityReport:
    """validate_ellipticity that raises EllipticityError on failure."""
    report = validate_ellipticity(bundle, p_ranges, s_range, extent, points_per_axis)
    if not report.passed:
        v = report.violation
        raise EllipticityError(
            f"{v.coefficient} = {v.value:.6g} violates lambda = {bundle.lam:.6g} at p={v.p}, s={v.s:.6g}, x={v.x}",
            report,
        )
    return report


def estimate_lipschitz(
    model: DiffusionModel,
    p_ranges: Sequence[tuple[float, float]],
    s_range: tuple[float, float],
    extent: Sequence[tuple[float, float]],
    points_per_axis: int = 5
) -> float:
    """Sampled bound of |grad_(p,s) D| by centred differences; the declared value when present."""
    if model.lipschitz is not None:
        return float(model.lipschitz)
    P, S, X = _sample_points(p_ranges, s_range, extent, points_per_axis)
    squares = ((model.value(P, S + FD_STEP, X) - model.value(P, S - FD_STEP, X)) / (2 * FD_STEP)) ** 2
    for i in range(model.species):
        step = np.zeros(model.species)
        step[i] = FD_STEP
        squares += ((model.value(P + step, S, X) - model.value(P - step, S, X)) / (2 * FD_STEP)) ** 2
    return float(np.sqrt(squares.max()))


# ===== Temperature inversion =====

def invert_temperature(
    phi: PotentialModel,
    p,
    s,
    x,
    tol: Optional[float] = None,
    initial=None
):
    """
    Solve phi(p, h, x) = s for h.

    Args:
        phi: Potential, strictly increasing in its temperature argument
        p, s, x: Concentrations (K, M), target values (K,), positions (K, dim); scalars allowed
        tol: Residual tolerance |phi(p, h, x) - s|
        initial: Warm start; s / lower_bound if omitted

    Returns:
        h with the shape of s (a float for scalar input)

    Raises:
        InversionError: If the root cannot be bracketed or refined
    """
    settings = get_settings()
    tol = settings.inversion_tol if tol is None else tol
    scalar = _is_scalar_call(p, s, x)
    P, S, X = prepare_arguments(p, s, x, phi.species, phi.dim)
    if initial is None:
        guess = S / (phi.lower_bound if phi.lower_bound > 0 else 1.0)
    else:
        guess = np.broadcast_to(np.asarray(initial, dtype=float), S.shape)

    try:
        roots, iterations = solve_increasing(
            lambda t: phi.value(P, t, X) - S,
            lambda t: phi.partial_s(P, t, X),
            guess,
            tol=tol,
            max_doublings=settings.inversion_max_doublings,
            max_iterations=settings.inversion_max_iterations,
        )
    except RootFindingError as e:
        logger.error(f"❌ Temperature inversion failed: {e}")
        raise InversionError(str(e)) from e

    logger.debug(f"Inverted {S.size} potential values in {iterations} iterations")
    return float(roots[0]) if scalar else roots


def h_partial_s(phi: PotentialModel, p, s, x, tol: Optional[float] = None):
    """d_s h(p, s, x) = 1 / d_s phi(p, h(p, s, x), x)."""
    scalar = _is_scalar_call(p, s, x)
    P, S, X = prepare_arguments(p, s, x, phi.species, phi.dim)
    h = invert_temperature(phi, P, S, X, tol=tol)
    derivative = 1.0 / phi.partial_s(P, h, X)
    return float(derivative[0]) if scalar else derivative


def inverse_lipschitz(phi: PotentialModel) -> Optional[float]:
    """Lipschitz bound max(1, G) / lambda of h in (p, s), if phi declares its gradient bound."""
    if phi.gradient_bound is None or phi.lower_bound <= 0:
        return None
    return max(1.0, phi.gradient_bound) / phi.lower_bound


__all__ = [
    "CoefficientError",
    "EllipticityError",
    "InversionError",
    "PotentialModel",
    "DiffusionModel",
    "DiffusionFamily",
    "SourceModel",
    "PermittivityField",
    "ModelBundle",
    "prepare_arguments",
    "affine_potential",
    "product_potential",
    "expression_potential",
    "constant_diffusion",
    "affine_diffusion",
    "expression_diffusion",
    "smooth_cutoff",
    "eigen_bump_source",
    "expression_source",
    "build_potential",
    "build_diffusion",
    "build_source",
    "build_permittivity",
    "build_bundle",
    "interior_bump",
    "interior_bump_bundle",
    "validate_ellipticity",
    "ensure_elliptic",
    "estimate_lipschitz",
    "invert_temperature",
    "h_partial_s",
    "inverse_lipschitz",
]
