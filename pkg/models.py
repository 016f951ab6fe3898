"""
Pydantic models for configuration, solver options and reports.

Defines all data structures read from run configuration files and written
to run artifacts.
"""

from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    """Base for configuration sections: unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")


# ===== Grid =====

class GridSpec(StrictModel):
    """Structured box grid descriptor."""
    dim: int = Field(2, description="Spatial dimension (2 or 3)")
    n: list[int] = Field(default_factory=lambda: [17, 17], description="Nodes per axis")
    extent: Optional[list[list[float]]] = Field(None, description="Per-axis [low, high]; unit box if omitted")

    @model_validator(mode="after")
    def check_shape(self) -> "GridSpec":
        if self.dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {self.dim}")
        if len(self.n) != self.dim:
            raise ValueError(f"n must list {self.dim} node counts")
        if any(v < 3 for v in self.n):
            raise ValueError("every axis needs at least 3 nodes")
        if self.extent is not None:
            if len(self.extent) != self.dim or any(len(e) != 2 or e[1] <= e[0] for e in self.extent):
                raise ValueError("extent must hold one increasing [low, high] pair per axis")
        return self


# ===== Coefficient models =====

class PotentialSpec(StrictModel):
    """Potential phi(p, s, x) from the built-in catalogue or an expression."""
    kind: Literal["affine", "sinusoidal", "product", "expression"] = "affine"
    p_coefficients: list[float] = Field(default_factory=list, description="Linear weights of p1..pM")
    s_coefficient: float = Field(1.0, description="Weight of s (affine, sinusoidal)")
    x_coefficients: list[float] = Field(default_factory=list, description="Linear weights of x1..x3")
    offset: float = 0.0
    amplitude: float = Field(0.0, description="Sinusoidal perturbation amplitude")
    frequency: float = Field(1.0, description="Sinusoidal perturbation frequency in s")
    base: float = Field(1.0, description="Product form: (base + sum a_i p_i) * s + c.x")
    expression: Optional[str] = Field(None, description="Expression in p1..pM, s, x1..x3")
    lower_bound: Optional[float] = Field(None, description="Declared lower bound of d_s phi")
    gradient_bound: Optional[float] = Field(None, description="Declared bound on all first partials")

    @model_validator(mode="after")
    def check_expression(self) -> "PotentialSpec":
        if self.kind == "expression" and not self.expression:
            raise ValueError("expression potentials need an expression string")
        return self


class DiffusionSpec(StrictModel):
    """Diffusion coefficient D_i(p, s, x)."""
    kind: Literal["constant", "affine", "expression"] = "constant"
    value: float = Field(1.0, description="Constant value, or intercept of the affine form")
    p_coefficients: list[float] = Field(default_factory=list)
    s_coefficient: float = 0.0
    x_coefficients: list[float] = Field(default_factory=list)
    expression: Optional[str] = None
    lipschitz: Optional[float] = Field(None, description="Declared Lipschitz constant in (p, s)")

    @model_validator(mode="after")
    def check_expression(self) -> "DiffusionSpec":
        if self.kind == "expression" and not self.expression:
            raise ValueError("expression diffusion models need an expression string")
        return self


class SourceSpec(StrictModel):
    """Source term g_i(p, s, x)."""
    kind: Literal["zero", "expression", "eigen_bump"] = "zero"
    expression: Optional[str] = None
    growth_c1: float = 0.0
    growth_c2: float = 0.0
    eigenvalue: Optional[float] = Field(None, description="eigen_bump rate, 2*pi^2 by default")


class PermittivitySpec(StrictModel):
    """Known permittivity epsilon(x)."""
    kind: Literal["constant", "expression", "layered"] = "constant"
    value: float = 1.0
    expression: Optional[str] = None
    breakpoints: list[float] = Field(default_factory=list, description="Layer interfaces along x1")
    values: list[float] = Field(default_factory=list, description="Layer values, one more than breakpoints")

    @model_validator(mode="after")
    def check_layers(self) -> "PermittivitySpec":
        if self.kind == "layered" and len(self.values) != len(self.breakpoints) + 1:
            raise ValueError("layered permittivity needs len(values) == len(breakpoints) + 1")
        if self.kind == "expression" and not self.expression:
            raise ValueError("expression permittivity needs an expression string")
        return self


class ModelSpec(StrictModel):
    """Full coefficient bundle."""
    species: int = Field(1, ge=1, description="Number of species M")
    charges: list[float] = Field(default_factory=lambda: [0.0], description="Species charges q")
    potential: PotentialSpec = Field(default_factory=PotentialSpec)
    diffusion: list[DiffusionSpec] = Field(default_factory=lambda: [DiffusionSpec()])
    sources: list[SourceSpec] = Field(default_factory=list, description="Empty means source-free")
    permittivity: PermittivitySpec = Field(default_factory=PermittivitySpec)
    lam: float = Field(0.5, gt=0, description="Ellipticity lower bound lambda")
    upper: float = Field(10.0, gt=0, description="Upper bound Lambda on D_i")

    @model_validator(mode="after")
    def check_lengths(self) -> "ModelSpec":
        if len(self.charges) != self.species:
            raise ValueError(f"charges must have {self.species} entries")
        if len(self.diffusion) not in (1, self.species):
            raise ValueError(f"diffusion must list 1 or {self.species} models")
        if len(self.sources) not in (0, 1, self.species):
            raise ValueError(f"sources must list 0, 1 or {self.species} models")
        return self


# ===== Solver options =====

class SolverSpec(StrictModel):
    """Numerical tolerances shared by all workflows."""
    linear_tol: float = Field(1e-10, gt=0)
    max_outer_iterations: int = Field(200, ge=1)
    fixed_point_tol: float = Field(1e-8, gt=0)
    damping: float = Field(1.0, gt=0, le=1)
    pde_tol: float = Field(1e-6, gt=0)
    inversion_tol: float = Field(1e-12, gt=0)


class PicardOptions(BaseModel):
    """Options of the damped Picard iteration."""
    max_outer_iterations: int = Field(200, ge=1)
    fixed_point_tol: float = Field(1e-8, gt=0, description="Relative successive-iterate change")
    damping: float = Field(1.0, gt=0, le=1)
    min_damping: float = Field(1.0 / 16.0, gt=0, le=1)
    linear_tol: float = Field(1e-10, gt=0)
    pde_tol: float = Field(1e-6, gt=0, description="Relative discrete PDE residual of the final state")
    inversion_tol: float = Field(1e-12, gt=0, description="Tolerance of the temperature inversion")

    @classmethod
    def from_spec(cls, spec: SolverSpec) -> "PicardOptions":
        return cls(
            max_outer_iterations=spec.max_outer_iterations,
            fixed_point_tol=spec.fixed_point_tol,
            damping=spec.damping,
            linear_tol=spec.linear_tol,
            pde_tol=spec.pde_tol,
            inversion_tol=spec.inversion_tol,
        )


# ===== Experiments =====

BoundaryValue = Union[float, str]


class BoundaryDataSpec(StrictModel):
    """Dirichlet data (gamma_1..gamma_M, tau) as constants or expressions in x1..x3."""
    gamma: list[BoundaryValue]
    tau: BoundaryValue = 0.0
    label: str = ""


class NoiseSpec(StrictModel):
    """Additive Gaussian measurement noise, off by default."""
    flux_std: float = Field(0.0, ge=0)
    voltage_std: float = Field(0.0, ge=0)
    temperature_std: float = Field(0.0, ge=0)


class ReconstructionSpec(StrictModel):
    """Potential reconstruction sample design."""
    boundary_s_samples: list[float] = Field(
        default_factory=lambda: [-1.0 + 0.25 * k for k in range(17)],
        description="Temperature grid of the boundary table"
    )
    boundary_p_samples: list[list[float]] = Field(default_factory=list, description="Concentration tuples; mu if empty")
    mu: list[float] = Field(default_factory=lambda: [1.0])
    s_samples: list[float] = Field(default_factory=lambda: [-0.5 + 0.25 * k for k in range(5)])
    interior_points: list[list[float]] = Field(default_factory=lambda: [[0.5, 0.5]])
    reference_z: list[float] = Field(default_factory=lambda: [1.0, 0.0])
    reference_point: list[float] = Field(default_factory=lambda: [0.0, 0.0])
    bump_radius: float = Field(1.0, gt=0, description="Bump support radius in grid spacings")
    delta: float = Field(1e-3, gt=0, description="State step of boundary gradient differences")
    gradient_samples: int = Field(4, ge=0, description="Boundary nodes for gradient reconstruction")
    spread_tolerance: float = Field(5e-3, gt=0)
    gauge_shift: Optional[float] = Field(7.0, description="Rerun with phi + shift to check gauge covariance")


class LinearisationSpec(StrictModel):
    """Linearisation-rate experiment."""
    mu: list[float] = Field(default_factory=lambda: [1.0])
    directions: list[BoundaryValue] = Field(default_factory=lambda: ["x1"], description="f_i per species")
    t_values: list[float] = Field(default_factory=lambda: [2.0 ** -k for k in range(1, 9)])
    eta0: Optional[BoundaryValue] = Field(None, description="Fixed sigma boundary data; phi(mu, 0, x) if omitted")

    @field_validator("t_values")
    @classmethod
    def check_decreasing(cls, v: list[float]) -> list[float]:
        if any(t <= 0 for t in v) or any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("t_values must be positive and strictly decreasing")
        return v


class FitSpec(StrictModel):
    """Parametrized diffusion fit."""
    expression: str = Field("theta1 + theta2*s", description="D_theta in theta1..thetaK, p1..pM, s, x1..x3")
    truth: list[float] = Field(default_factory=lambda: [1.0, 0.3])
    initial: list[float] = Field(default_factory=lambda: [0.8, 0.1])
    lower: list[float] = Field(default_factory=lambda: [0.5, 0.0])
    upper: list[float] = Field(default_factory=lambda: [2.0, 0.5])
    max_iterations: int = Field(25, ge=0)
    data_refinement: int = Field(1, ge=0, description="Refinement levels of the data grid over the inversion grid")
    potential: Literal["reconstructed", "known"] = Field(
        "reconstructed",
        description="Affine phi fitted to a boundary voltage table, or the configured model potential"
    )
    probe_step: float = Field(0.0625, gt=0, description="Step t of the constant-mu linearisation probes")

    @model_validator(mode="after")
    def check_lengths(self) -> "FitSpec":
        k = len(self.truth)
        if not 1 <= k <= 8 or any(len(v) != k for v in (self.initial, self.lower, self.upper)):
            raise ValueError("truth, initial, lower and upper must share a length between 1 and 8")
        return self


class BoundaryDemoSpec(StrictModel):
    """Interior-bump potential modification."""
    bump_center: Optional[list[float]] = None
    bump_radius: float = Field(0.3, gt=0)
    amplitude: float = Field(0.05, gt=0)
    boundary_tolerance: float = Field(1e-6, gt=0, description="Largest accepted boundary-record difference")
    interior_threshold: float = Field(1e-2, gt=0, description="Smallest accepted temperature difference at the centre")


class ConvergenceSpec(StrictModel):
    """h-refinement study."""
    n_values: list[int] = Field(default_factory=lambda: [17, 33, 65])


class ExperimentSpec(StrictModel):
    """Experiment design for every subcommand."""
    boundary_data: list[BoundaryDataSpec] = Field(default_factory=list)
    probe_points: list[list[float]] = Field(default_factory=list)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    reconstruction: ReconstructionSpec = Field(default_factory=ReconstructionSpec)
    linearisation: LinearisationSpec = Field(default_factory=LinearisationSpec)
    fit: FitSpec = Field(default_factory=FitSpec)
    boundary_demo: BoundaryDemoSpec = Field(default_factory=BoundaryDemoSpec)
    convergence: ConvergenceSpec = Field(default_factory=ConvergenceSpec)


class RunConfig(StrictModel):
    """Top-level run configuration."""
    grid: GridSpec = Field(default_factory=GridSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    solver: SolverSpec = Field(default_factory=SolverSpec)
    experiment: ExperimentSpec = Field(default_factory=ExperimentSpec)
    output_dir: str = Field("runs", description="Artifact directory")
    seed: int = Field(0, ge=0)


# ===== Reports =====

class SolveReport(BaseModel):
    """Outcome of one linear Dirichlet solve."""
    iterations: int
    final_residual: float = Field(..., description="Residual relative to the warm-start residual")
    tolerance: float
    converged: bool
    method: str = "cg-jacobi"


class EllipticityViolation(BaseModel):
    """First sampled point where a coefficient drops below lambda."""
    coefficient: str
    value: float
    p: list[float]
    s: float
    x: list[float]


class EllipticityReport(BaseModel):
    """Sampled ellipticity check."""
    passed: bool
    lam: float
    min_permittivity: float
    min_diffusion: list[float]
    max_diffusion: list[float]
    min_ds_phi: float
    sample_count: int
    violation: Optional[EllipticityViolation] = None
    note: str = "Checked on bounded sample ranges only; the global hypothesis cannot be verified numerically."


class PicardReport(BaseModel):
    """Convergence record of a forward solve."""
    converged: bool
    iterations: int
    fixed_point_residual: float
    pde_residual: float
    residual_history: list[float] = Field(default_factory=list)
    damping_history: list[float] = Field(default_factory=list)
    monotone: bool = True
    message: str = ""


class ConvergenceStudy(BaseModel):
    """Manufactured-solution refinement study."""
    n_values: list[int]
    h_values: list[float]
    errors: list[float]
    ratios: list[float]
    orders: list[float]


class ResidualStudy(BaseModel):
    """Residual pair of the source non-uniqueness demonstration under refinement."""
    n_values: list[int]
    h_values: list[float]
    residual_zero: list[float]
    residual_eigen: list[float]
    discrete_eigenvalues: list[float]
    fitted_order: float


class RateReport(BaseModel):
    """Flux linearisation error against t."""
    t_values: list[float]
    errors: list[Optional[float]]
    converged: list[bool]
    slope: Optional[float]
    fit_points: int
    bound_constant: Optional[float] = None


class FitIterationRecord(BaseModel):
    """One Levenberg-Marquardt trial."""
    iteration: int
    theta: list[float]
    loss: float
    damping: float
    accepted: bool
    note: str = ""


class FitReport(BaseModel):
    """Outcome of the diffusion fit."""
    parameter_names: list[str]
    theta_hat: list[float]
    final_loss: float
    iterations: int
    converged: bool
    reason: str
    jacobian_rank: int
    jacobian_condition: float
    trace: list[FitIterationRecord] = Field(default_factory=list)


class PotentialFitReport(BaseModel):
    """Affine potential fitted to a reconstruction table (offset is gauge-dependent)."""
    p_coefficients: list[float]
    s_coefficient: float
    x_coefficients: list[float]
    offset: float
    samples: int
    max_residual: float


class BoundaryDemoRow(BaseModel):
    """Record differences of one experiment between the original and the bumped potential."""
    label: str
    species_flux_difference: float
    temperature_flux_difference: float
    voltage_difference: float
    interior_temperature_difference_l2: float
    center_temperature_difference: float


class BoundaryDemoReport(BaseModel):
    """Interior-bump non-uniqueness check."""
    center: list[float]
    bump_radius: float
    amplitude: float
    rows: list[BoundaryDemoRow]
    max_boundary_difference: float
    min_center_difference: float
    boundary_tolerance: float
    interior_threshold: float
    verified: bool


class OffsetStatistics(BaseModel):
    """Spread of reconstructed-minus-true potential values."""
    count: int
    mean: float
    std: float
    max_abs_deviation: float


class MeasurementRecord(BaseModel):
    """One JSON-lines measurement entry."""
    experiment_id: str
    boundary: dict[str, Any]
    family: Literal["species_flux", "temperature_flux", "voltage", "temperature"]
    values: list[Any]
    noise_std: float = 0.0
    noise_seed: Optional[list[int]] = None


class RunManifest(BaseModel):
    """Reproducibility manifest written by every run."""
    app_name: str
    app_version: str
    subcommand: str
    config_sha256: str
    seed: int
    started_at: str
    finished_at: str
    timings: dict[str, float] = Field(default_factory=dict)
    versions: dict[str, str] = Field(default_factory=dict)
    exit_code: int = 0
