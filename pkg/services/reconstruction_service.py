"""
Reconstruction service.

Recovers the potential phi (up to one global constant) on the boundary and
at interior points from laboratory measurements, its boundary gradients,
and parametrized diffusion coefficients by damped Gauss-Newton fitting.
"""

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator
from scipy.spatial import cKDTree

from config import get_settings
from models import (
    BoundaryDataSpec,
    FitIterationRecord,
    FitReport,
    OffsetStatistics,
    PicardOptions,
    PotentialFitReport,
)
from services.coefficient_service import (
    CoefficientError,
    DiffusionFamily,
    ModelBundle,
    PotentialModel,
    SourceModel,
    affine_potential,
)
from services.elliptic_service import EllipticSolveError, boundary_flux, l_eps_inverse
from services.forward_service import ForwardSolveError, forward_solve
from services.measurement_service import (
    Laboratory,
    MeasurementError,
    PublicData,
    boundary_data_from_spec,
    boundary_data_through,
    bump_profile,
    cauchy_record,
)
from utils.grid import AXIS_NAMES, BoundaryField, Grid, ScalarField, interpolate

logger = logging.getLogger(__name__)

BOUNDARY_VOLTAGE = "boundary-voltage"
INTERIOR_TEMPERATURE = "interior-temperature"

NUMERICAL_ERRORS = (ForwardSolveError, EllipticSolveError, CoefficientError, MeasurementError)


# ===== Exceptions =====

class ReconstructionError(Exception):
    """Base exception for reconstruction errors."""
    pass


class IdentifiabilityError(ReconstructionError):
    """Raised when the fit Jacobian is rank deficient."""

    def __init__(self, message: str, direction: np.ndarray):
        super().__init__(message)
        self.direction = direction


class TableRangeError(ReconstructionError):
    """Raised when a reconstruction needs values outside the tabulated range."""
    pass


# ===== Table =====

class ReconstructionTable:
    """
    Reconstructed samples phi_hat(p, t, x) with provenance.

    Values are normalized so that phi_hat(z0, x0) = 0 for the recorded reference.
    """

    def __init__(
        self,
        species: int,
        dim: int,
        reference_z: Sequence[float],
        reference_point: Sequence[float],
        frame: Optional[pd.DataFrame] = None,
        skipped: Optional[list[dict]] = None
    ):
        self.species = species
        self.dim = dim
        self.reference_z = tuple(float(v) for v in reference_z)
        self.reference_point = tuple(float(v) for v in reference_point)
        self.skipped = list(skipped or [])
        self._frame = self._validated(frame if frame is not None else pd.DataFrame(columns=self.columns))

    @property
    def key_columns(self) -> list[str]:
        return [f"p{i + 1}" for i in range(self.species)] + ["s_or_t"] + list(AXIS_NAMES[:self.dim])

    @property
    def columns(self) -> list[str]:
        return self.key_columns + ["value", "provenance", "node_id"]

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame.copy()

    def __len__(self) -> int:
        return len(self._frame)

    def _validated(self, frame: pd.DataFrame) -> pd.DataFrame:
        frame = frame.reindex(columns=self.columns).reset_index(drop=True)
        if len(frame) == 0:
            return frame
        frame["node_id"] = frame["node_id"].astype(int)
        if frame.duplicated(subset=self.key_columns).any():
            raise ReconstructionError("Duplicate sample keys in reconstruction table")
        if not np.all(np.isfinite(frame["value"].to_numpy(dtype=float))):
            raise ReconstructionError("Reconstruction table values must be finite")
        return frame

    @classmethod
    def from_rows(
        cls,
        species: int,
        dim: int,
        reference_z: Sequence[float],
        reference_point: Sequence[float],
        rows: list[dict],
        skipped: Optional[list[dict]] = None
    ) -> "ReconstructionTable":
        frame = pd.DataFrame(rows) if rows else None
        table = cls(species, dim, reference_z, reference_point, frame, skipped)
        return table.sorted()

    def sorted(self) -> "ReconstructionTable":
        frame = self._frame.sort_values(self.key_columns, kind="mergesort")
        return ReconstructionTable(self.species, self.dim, self.reference_z, self.reference_point, frame, self.skipped)

    def merge(self, other: "ReconstructionTable") -> "ReconstructionTable":
        """Union of two tables with the same reference; duplicate keys are rejected."""
        if (other.species, other.dim) != (self.species, self.dim):
            raise ReconstructionError("Cannot merge tables of different shape")
        if not np.allclose(other.reference_z, self.reference_z) or not np.allclose(other.reference_point, self.reference_point):
            raise ReconstructionError("Cannot merge tables normalized at different references")
        frame = pd.concat([self._frame, other._frame], ignore_index=True)
        return ReconstructionTable(
            self.species, self.dim, self.reference_z, self.reference_point, frame, self.skipped + other.skipped
        ).sorted()

    def sample_arrays(self, provenance: Optional[str] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(p (K, M), t (K,), x (K, dim), value (K,)) of the selected rows."""
        frame = self._frame if provenance is None else self._frame[self._frame["provenance"] == provenance]
        p = frame[[f"p{i + 1}" for i in range(self.species)]].to_numpy(dtype=float)
        t = frame["s_or_t"].to_numpy(dtype=float)
        x = frame[list(AXIS_NAMES[:self.dim])].to_numpy(dtype=float)
        return p, t, x, frame["value"].to_numpy(dtype=float)

    def offsets(self, potential: PotentialModel, provenance: Optional[str] = None) -> np.ndarray:
        """phi(p, t, x) - phi_hat for every selected row."""
        p, t, x, values = self.sample_arrays(provenance)
        if values.size == 0:
            return values
        return potential.value(p, t, x) - values

    def offset_statistics(self, potential: PotentialModel, provenance: Optional[str] = None) -> OffsetStatistics:
        offsets = self.offsets(potential, provenance)
        if offsets.size == 0:
            raise ReconstructionError("No samples to compare against")
        mean = float(offsets.mean())
        return OffsetStatistics(
            count=int(offsets.size),
            mean=mean,
            std=float(offsets.std()),
            max_abs_deviation=float(np.abs(offsets - mean).max()),
        )

    def lookup(self, z: Sequence[float], node_id: int) -> float:
        frame = self._frame
        mask = (frame["node_id"] == node_id) & (frame["s_or_t"] == float(z[-1]))
        for i in range(self.species):
            mask &= frame[f"p{i + 1}"] == float(z[i])
        if not mask.any():
            raise TableRangeError(f"No table entry for z={list(z)} at node {node_id}")
        return float(frame.loc[mask, "value"].iloc[0])

    def max_difference(self, other: "ReconstructionTable") -> float:
        """
        Largest change of any key or value between two tables of the same sample design.

        Rows are paired by provenance and key order; interior keys hold measured
        temperatures, so they are compared rather than joined on.
        """
        if (other.species, other.dim) != (self.species, self.dim) or len(other) != len(self):
            raise ReconstructionError(f"Tables hold different sample designs ({len(self)} vs {len(other)} entries)")
        order = ["provenance"] + self.key_columns
        mine = self._frame.sort_values(order, kind="mergesort")
        theirs = other._frame.sort_values(order, kind="mergesort")
        if not np.array_equal(mine["provenance"].to_numpy(), theirs["provenance"].to_numpy()):
            raise ReconstructionError("Tables differ in provenance")
        if len(mine) == 0:
            return 0.0
        numeric = self.key_columns + ["value"]
        return float(np.abs(mine[numeric].to_numpy(dtype=float) - theirs[numeric].to_numpy(dtype=float)).max())

    def to_frame(self) -> pd.DataFrame:
        """Serialization columns: p1..pM, s_or_t, coordinates, value, provenance."""
        return self._frame[self.key_columns + ["value", "provenance"]].copy()


def _row(species: int, dim: int, z: Sequence[float], point: np.ndarray, value: float, provenance: str, node_id: int) -> dict:
    row = {f"p{i + 1}": float(z[i]) for i in range(species)}
    row["s_or_t"] = float(z[species])
    for j in range(dim):
        row[AXIS_NAMES[j]] = float(point[j])
    row.update({"value": float(value), "provenance": provenance, "node_id": int(node_id)})
    return row


# ===== Boundary reconstruction =====

def _far_node(grid: Grid, node: int) -> int:
    points = grid.coordinates[grid.boundary_ids]
    return int(grid.boundary_ids[np.argmax(np.linalg.norm(points - grid.coordinates[node], axis=1))])


def boundary_sweep(
    lab: Laboratory,
    z: Sequence[float],
    reference: tuple[Sequence[float], int],
    nodes: np.ndarray,
    radius: float = 1.0
) -> np.ndarray:
    """
    phi_hat(z, x) = phi(z, x) - phi(z0, x0) at the given boundary nodes.

    One experiment with data z everywhere except a bump to z0 at x0 reads every node
    outside the bump. Nodes inside it are reached through a second experiment anchored
    at the boundary node farthest from x0, linked by a constant-z0 experiment.
    """
    grid = lab.grid
    z = np.asarray(z, dtype=float)
    z0 = np.asarray(reference[0], dtype=float)
    x0 = int(reference[1])
    nodes = np.asarray(nodes, dtype=int)
    positions = grid.boundary_position[nodes]
    if np.any(positions < 0):
        raise ReconstructionError("Boundary reconstruction needs boundary nodes")

    same = bool(np.array_equal(z, z0))
    gamma, tau = boundary_data_through(grid, [] if same else [(x0, z0)], z, radius)
    values = lab.voltages(gamma, tau, reference=x0, label=f"z={z.tolist()} bump@{x0}").values[positions].copy()
    if same:
        return values

    inside = bump_profile(grid, x0, radius)[positions] > 0
    if not inside.any():
        return values

    x1 = _far_node(grid, x0)
    if np.any(bump_profile(grid, x1, radius)[positions[inside]] > 0):
        raise ReconstructionError("Auxiliary node bump overlaps the reference bump; reduce the bump radius")
    gamma1, tau1 = boundary_data_through(grid, [(x1, z0)], z, radius)
    through_x1 = lab.voltages(gamma1, tau1, reference=x1, label=f"z={z.tolist()} bump@{x1}").values
    gamma_ref, tau_ref = boundary_data_through(grid, [], z0, radius)
    link = lab.voltage(gamma_ref, tau_ref, x1, x0)
    values[inside] = through_x1[positions[inside]] + link
    return values


def reconstruct_phi_boundary(
    lab: Laboratory,
    z_samples: Sequence[Sequence[float]],
    reference: tuple[Sequence[float], int],
    x_samples: Optional[Sequence[int]] = None,
    radius: float = 1.0,
    max_workers: Optional[int] = None
) -> ReconstructionTable:
    """
    Tabulate phi_hat(z, x) from voltage measurements.

    Args:
        lab: Laboratory
        z_samples: State samples (p_1..p_M, s)
        reference: (z0, x0 boundary node) fixing phi_hat(z0, x0) = 0
        x_samples: Boundary nodes, all of them by default
        radius: Bump radius in grid spacings
        max_workers: Concurrent experiments

    Returns:
        ReconstructionTable with boundary-voltage entries; failed experiments listed in skipped
    """
    grid = lab.grid
    public = lab.public
    M = public.species
    nodes = grid.boundary_ids if x_samples is None else np.asarray(x_samples, dtype=int)
    z_samples = [np.asarray(z, dtype=float) for z in z_samples]
    if any(z.size != M + 1 for z in z_samples) or len(reference[0]) != M + 1:
        raise ReconstructionError(f"State samples need {M + 1} components")
    max_workers = max_workers or get_settings().max_workers

    rows: list[dict] = []
    skipped: list[dict] = []
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_z = {}
        for k, z in enumerate(z_samples):
            future = executor.submit(boundary_sweep, lab, z, reference, nodes, radius)
            future_to_z[future] = k

        for future in as_completed(future_to_z):
            z = z_samples[future_to_z[future]]
            try:
                values = future.result()
            except NUMERICAL_ERRORS as e:
                logger.error(f"❌ Boundary sample z={z.tolist()} failed: {e}")
                skipped.append({"z": z.tolist(), "reason": str(e)})
                continue
            for node, value in zip(nodes, values):
                rows.append(_row(M, grid.dim, z, grid.coordinates[node], value, BOUNDARY_VOLTAGE, node))

    x0_point = grid.coordinates[int(reference[1])]
    table = ReconstructionTable.from_rows(M, grid.dim, reference[0], x0_point, rows, skipped)
    logger.info(f"✅ Boundary table: {len(table)} entries from {len(z_samples)} states ({len(skipped)} skipped)")
    return table


@dataclass(frozen=True)
class BoundaryGradientEstimate:
    """Reconstructed partials of phi at one boundary sample."""

    z: tuple[float, ...]
    node: int
    state_partials: np.ndarray
    tangential: np.ndarray
    normal_axis: int
    one_sided: tuple[bool, ...] = field(default=())

    @property
    def flagged(self) -> bool:
        return any(self.one_sided)


def reconstruct_phi_gradients_boundary(
    lab: Laboratory,
    z: Sequence[float],
    x: int,
    reference: tuple[Sequence[float], int],
    delta: Optional[float] = None,
    radius: float = 1.0,
    max_workers: Optional[int] = None
) -> BoundaryGradientEstimate:
    """
    Centred differences of phi_hat in z and along the boundary face at node x.

    Args:
        delta: Relative state step, scaled by max(1, |z_j|)

    Returns:
        BoundaryGradientEstimate; flagged when a one-sided tangential difference was needed
    """
    grid = lab.grid
    z = np.asarray(z, dtype=float)
    delta = get_settings().gradient_delta if delta is None else delta
    position = grid.boundary_position[x]
    if position < 0:
        raise ReconstructionError(f"Node {x} is not a boundary node")
    normal_axis = int(grid.boundary_axis[position])

    steps = delta * np.maximum(1.0, np.abs(z))
    shifted = []
    for j in range(z.size):
        for sign in (1.0, -1.0):
            zj = z.copy()
            zj[j] += sign * steps[j]
            shifted.append(zj)

    neighbours = {b: grid.face_neighbours(x, b) for b in range(grid.dim) if b != normal_axis}
    nodes = [x] + [n for pair in neighbours.values() for n in pair if n is not None]
    max_workers = max_workers or get_settings().max_workers

    samples: dict[int, np.ndarray] = {}
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_index = {executor.submit(boundary_sweep, lab, z, reference, np.array(nodes), radius): -1}
        for k, zk in enumerate(shifted):
            future_to_index[executor.submit(boundary_sweep, lab, zk, reference, np.array([x]), radius)] = k
        for future in as_completed(future_to_index):
            samples[future_to_index[future]] = future.result()

    partials = np.array([(samples[2 * j][0] - samples[2 * j + 1][0]) / (2 * steps[j]) for j in range(z.size)])

    at_z = dict(zip(nodes, samples[-1]))
    tangential = np.zeros(grid.dim)
    one_sided = [False] * grid.dim
    for b, (minus, plus) in neighbours.items():
        h = grid.spacing[b]
        if minus is not None and plus is not None:
            tangential[b] = (at_z[plus] - at_z[minus]) / (2 * h)
        elif plus is not None:
            tangential[b] = (at_z[plus] - at_z[x]) / h
            one_sided[b] = True
        else:
            tangential[b] = (at_z[x] - at_z[minus]) / h
            one_sided[b] = True
    if any(one_sided):
        logger.warning(f"⚠️ One-sided tangential difference at boundary node {x}")

    return BoundaryGradientEstimate(
        z=tuple(z.tolist()), node=int(x), state_partials=partials, tangential=tangential,
        normal_axis=normal_axis, one_sided=tuple(one_sided),
    )


def recover_normal_x_gradient(
    lab: Laboratory,
    public: PublicData,
    z: Sequence[float],
    x: int,
    reference: tuple[Sequence[float], int],
    partial_s: Optional[float] = None,
    tau_offset: float = 0.0,
    radius: float = 1.0
) -> float:
    """
    N . grad_x phi at (z, x) from N.grad sigma = d_s phi N.grad T + N.grad_x phi.

    Uses constant concentrations p = z[:M], so the concentration terms vanish. The
    temperature data equal z[M] at x and z[M] + tau_offset away from a bump around x.
    sigma is rebuilt from public data and the measured voltages.

    Args:
        partial_s: Reconstructed d_s phi at (z, x); reconstructed here when omitted
        tau_offset: Background temperature shift, giving a second admissible experiment
    """
    grid = lab.grid
    M = public.species
    z = np.asarray(z, dtype=float)
    p, s = z[:M], z[M]
    position = grid.boundary_position[x]
    if position < 0:
        raise ReconstructionError(f"Node {x} is not a boundary node")

    if tau_offset == 0.0:
        gamma, tau = boundary_data_through(grid, [], z, radius)
    else:
        background = np.append(p, s + tau_offset)
        gamma, tau = boundary_data_through(grid, [(x, z)], background, radius)

    if partial_s is None:
        partial_s = float(reconstruct_phi_gradients_boundary(lab, z, x, reference, radius=radius).state_partials[M])
    if partial_s < public.lam / 10.0:
        logger.warning(f"⚠️ Reconstructed d_s phi = {partial_s:.3g} at node {x} is below lambda/10; model assumptions violated")

    record = lab.cauchy(gamma, tau, label=f"normal gradient z={z.tolist()} node {x}")
    eta_hat = lab.voltages(gamma, tau, reference=int(reference[1]))
    eps = public.permittivity.on_grid(grid)
    charge = ScalarField.constant(grid, float(np.dot(public.charge_vector, p)))
    sigma_hat = l_eps_inverse(eps, charge, eta_hat, lam=public.lam)
    normal_sigma = boundary_flux(ScalarField.constant(grid, 1.0), sigma_hat).at(x)
    normal_temperature = record.temperature_flux.at(x)
    return float(normal_sigma - partial_s * normal_temperature)


# ===== Interior reconstruction =====

def _corners(values: Sequence[np.ndarray], mu: np.ndarray) -> list[tuple[np.ndarray, float]]:
    """Multilinear corner points and weights of mu in the tensor grid of tabulated p values."""
    per_axis = []
    for axis_values, m in zip(values, mu):
        axis_values = np.unique(axis_values)
        match = np.isclose(axis_values, m, rtol=0.0, atol=1e-12)
        if match.any():
            per_axis.append([(axis_values[np.argmax(match)], 1.0)])
            continue
        k = np.searchsorted(axis_values, m)
        if k == 0 or k == axis_values.size:
            raise TableRangeError(f"Concentration {m} outside tabulated range [{axis_values[0]}, {axis_values[-1]}]")
        lo, hi = axis_values[k - 1], axis_values[k]
        w = (m - lo) / (hi - lo)
        per_axis.append([(lo, 1.0 - w), (hi, w)])

    corners = [(np.zeros(0), 1.0)]
    for options in per_axis:
        corners = [(np.append(point, v), weight * w) for point, weight in corners for v, w in options]
    return corners


class BoundaryInverse:
    """
    h_hat(mu, s, x) at every boundary node, inverting the reconstructed boundary table.

    Monotone piecewise-cubic in s per node, multilinear in the concentrations.
    """

    def __init__(self, table: ReconstructionTable, mu: Sequence[float], grid: Grid, lam: float):
        frame = table.frame
        frame = frame[frame["provenance"] == BOUNDARY_VOLTAGE]
        M = table.species
        mu = np.asarray(mu, dtype=float)
        p_columns = [f"p{i + 1}" for i in range(M)]
        corners = _corners([frame[c].to_numpy(dtype=float) for c in p_columns], mu)

        combined = None
        s_grid = None
        for point, weight in corners:
            mask = np.ones(len(frame), dtype=bool)
            for i, c in enumerate(p_columns):
                mask &= np.isclose(frame[c].to_numpy(dtype=float), point[i], rtol=0.0, atol=1e-12)
            pivot = frame[mask].pivot_table(index="s_or_t", columns="node_id", values="value", aggfunc="first")
            pivot = pivot.reindex(columns=grid.boundary_ids)
            if pivot.isna().to_numpy().any() or len(pivot) < 2:
                raise TableRangeError(f"Boundary table does not cover every boundary node at p={point.tolist()}")
            if s_grid is None:
                s_grid = pivot.index.to_numpy(dtype=float)
            elif not np.array_equal(s_grid, pivot.index.to_numpy(dtype=float)):
                raise TableRangeError("Tabulated temperatures differ between concentration samples")
            contribution = weight * pivot.to_numpy(dtype=float)
            combined = contribution if combined is None else combined + contribution

        slopes = np.diff(combined, axis=0) / np.diff(s_grid)[:, None]
        if slopes.min() < lam / 2.0:
            raise ReconstructionError(
                f"Reconstructed d_s phi drops to {slopes.min():.3g} < lambda/2; table is not monotone enough to invert"
            )

        self.grid = grid
        self.s_grid = s_grid
        self.values = combined
        self.low = float(combined[0].max())
        self.high = float(combined[-1].min())
        self._interpolators = [PchipInterpolator(combined[:, b], s_grid) for b in range(combined.shape[1])]

    def covers(self, value: float) -> bool:
        return self.low <= value <= self.high

    def __call__(self, value: float) -> np.ndarray:
        if not self.covers(value):
            raise TableRangeError(f"Value {value:.6g} outside the invertible range [{self.low:.6g}, {self.high:.6g}]")
        return np.array([float(interp(value)) for interp in self._interpolators])


def reconstruct_phi_interior(
    lab: Laboratory,
    boundary_table: ReconstructionTable,
    mu: Sequence[float],
    s_samples: Sequence[float],
    y: Sequence[float],
    max_workers: Optional[int] = None
) -> ReconstructionTable:
    """
    Tabulate phi_hat(mu, t, y) at a point y from interior temperature probes.

    For each s the boundary temperature is set to h_hat(mu, s - omega0(y), .) with
    constant concentrations mu; the probed T(y) then satisfies phi_hat(mu, T(y), y) = s.

    Returns:
        ReconstructionTable with interior-temperature entries, skipped samples listed
    """
    grid = lab.grid
    public = lab.public
    mu = np.asarray(mu, dtype=float)
    y = np.asarray(y, dtype=float)
    if mu.size != public.species:
        raise ReconstructionError(f"mu needs {public.species} components")

    eps = public.permittivity.on_grid(grid)
    charge = ScalarField.constant(grid, float(np.dot(public.charge_vector, mu)))
    omega0 = l_eps_inverse(eps, charge, BoundaryField.constant(grid, 0.0), lam=public.lam)
    if not grid.contains(y[None, :])[0]:
        raise MeasurementError(f"Probe point {y.tolist()} lies outside the domain")
    omega_y = float(interpolate(omega0, y[None, :])[0])
    inverse = BoundaryInverse(boundary_table, mu, grid, public.lam)
    gamma = tuple(BoundaryField.constant(grid, m) for m in mu)

    def probe(s: float) -> float:
        tau = BoundaryField(grid, inverse(s - omega_y))
        return float(lab.temperatures(gamma, tau, y[None, :], label=f"interior s={s:g}")[0])

    rows: list[dict] = []
    skipped: list[dict] = []
    max_workers = max_workers or get_settings().max_workers
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        future_to_s = {}
        for s in s_samples:
            if not inverse.covers(s - omega_y):
                logger.warning(f"⚠️ s={s:g} shifted to {s - omega_y:.4g} is outside [{inverse.low:.4g}, {inverse.high:.4g}], skipped")
                skipped.append({"s": float(s), "reason": "outside boundary table range"})
                continue
            future_to_s[executor.submit(probe, s)] = float(s)

        for future in as_completed(future_to_s):
            s = future_to_s[future]
            try:
                temperature = future.result()
            except NUMERICAL_ERRORS as e:
                logger.error(f"❌ Interior sample s={s:g} failed: {e}")
                skipped.append({"s": s, "reason": str(e)})
                continue
            z = np.append(mu, temperature)
            rows.append(_row(public.species, grid.dim, z, y, s, INTERIOR_TEMPERATURE, -1))

    table = ReconstructionTable.from_rows(
        public.species, grid.dim, boundary_table.reference_z, boundary_table.reference_point, rows, skipped
    )
    logger.info(f"✅ Interior table at y={y.tolist()}: {len(table)} entries ({len(skipped)} skipped)")
    return table


def fit_affine_potential(
    table: ReconstructionTable,
    provenance: Optional[str] = None
) -> tuple[PotentialModel, PotentialFitReport]:
    """
    Least-squares a.p + b s + c.x + d through the table entries.

    Exact, up to the gauge constant, when the hidden potential is affine.
    max_residual in the report measures how far the table is from that form.

    Raises:
        ReconstructionError: If p, s and x do not vary enough or b is not positive
    """
    p, t, x, values = table.sample_arrays(provenance)
    design = np.column_stack([p, t, x, np.ones(t.size)])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise ReconstructionError(
            f"Table of {t.size} entries does not determine an affine potential; vary every p_i, s and x"
        )
    coefficients, *_ = np.linalg.lstsq(design, values, rcond=None)
    M = table.species
    a, b, c, d = coefficients[:M], float(coefficients[M]), coefficients[M + 1:-1], float(coefficients[-1])
    if b <= 0:
        raise ReconstructionError(f"Fitted s coefficient {b:.6g} is not positive")

    report = PotentialFitReport(
        p_coefficients=a.tolist(),
        s_coefficient=b,
        x_coefficients=c.tolist(),
        offset=d,
        samples=int(t.size),
        max_residual=float(np.abs(design @ coefficients - values).max()),
    )
    logger.info(f"✅ Affine potential from {t.size} entries, max residual {report.max_residual:.3e}")
    return affine_potential(a, b, c, offset=d), report


# ===== Diffusion fit =====

@dataclass(frozen=True, eq=False)
class FitExperiment:
    """Boundary data specification with the flux it produced in the laboratory."""

    spec: BoundaryDataSpec
    points: np.ndarray
    fluxes: np.ndarray


def default_fit_experiments(
    species: int,
    parameters: int,
    mu: Optional[Sequence[float]] = None,
    directions: Optional[Sequence[Union[float, str]]] = None,
    step: float = 0.0625
) -> list[BoundaryDataSpec]:
    """
    Generic ramps at several temperature levels plus constant-mu linearisation probes.

    The probes prescribe gamma_i = mu_i + step * f_i (f_i = x1 by default), so their fluxes sample
    D near the background state; together the dataset has at least 2K + 1 experiments.
    """
    mu = [1.0] * species if mu is None else list(mu)
    directions = ["x1"] * species if directions is None else list(directions)
    if len(mu) != species or len(directions) != species:
        raise ReconstructionError(f"Probe background and directions need {species} entries each")
    generic = [
        BoundaryDataSpec(gamma=[f"{1.0 + 0.1 * k:g} + 0.5*x1"] * species, tau=-0.5 + 0.5 * k, label=f"fit-{k}")
        for k in range(parameters + 1)
    ]
    probes = [
        BoundaryDataSpec(
            gamma=[f"{m:g} + {step:g}*({d})" for m, d in zip(mu, directions)],
            tau=0.25 + 0.5 * j,
            label=f"probe-{j}",
        )
        for j in range(max(parameters, 2))
    ]
    return generic + probes


def collect_fit_dataset(lab: Laboratory, specs: Sequence[BoundaryDataSpec]) -> list[FitExperiment]:
    """Run each configured experiment once and keep the measured species fluxes with their node coordinates."""
    grid = lab.grid
    species = lab.public.species
    experiments = []
    for spec in specs:
        gamma, tau = boundary_data_from_spec(grid, spec, species)
        record = lab.cauchy(gamma, tau, reduced=True, label=spec.label)
        experiments.append(FitExperiment(
            spec=spec,
            points=grid.coordinates[grid.boundary_ids].copy(),
            fluxes=np.stack([f.values for f in record.species_flux]),
        ))
    return experiments


@dataclass(frozen=True, eq=False)
class DiffusionFitProblem:
    """Parametrized diffusion fit against measured species fluxes."""

    family: DiffusionFamily
    theta_init: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    potential: PotentialModel
    public: PublicData
    grid: Grid
    experiments: tuple[FitExperiment, ...]
    options: PicardOptions = field(default_factory=PicardOptions)

    def __post_init__(self) -> None:
        k = self.family.parameter_count
        for name in ("theta_init", "lower", "upper"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != (k,):
                raise ReconstructionError(f"{name} must have {k} entries")
            object.__setattr__(self, name, value)
        if np.any(self.lower > self.upper) or np.any(self.theta_init < self.lower) or np.any(self.theta_init > self.upper):
            raise ReconstructionError("theta_init must lie inside [lower, upper]")
        if len(self.experiments) < 2 * k:
            raise ReconstructionError(f"Need at least {2 * k} experiments for {k} parameters, got {len(self.experiments)}")


class DiffusionFitter:
    """
    Levenberg-Marquardt fit of D_theta.

    Responsibilities:
    - Map measured fluxes onto the inversion grid
    - Predict fluxes by forward solves with the supplied potential
    - Build finite-difference Jacobians concurrently
    - Accept steps only when the loss decreases
    """

    def __init__(self, problem: DiffusionFitProblem, max_iterations: Optional[int] = None, max_workers: Optional[int] = None):
        """
        Initialize diffusion fitter.

        Args:
            problem: Fit problem
            max_iterations: Levenberg-Marquardt trial limit (settings default)
            max_workers: Concurrent Jacobian columns
        """
        settings = get_settings()
        self.problem = problem
        self.max_iterations = settings.fit_max_iterations if max_iterations is None else max_iterations
        self.max_workers = max_workers or settings.max_workers
        self.logger = logger
        self._targets = self._match_targets()
        self._sqrt_weights = np.sqrt(problem.grid.boundary_weights)

    def _match_targets(self) -> list[tuple[tuple[BoundaryField, ...], BoundaryField, np.ndarray]]:
        problem = self.problem
        grid = problem.grid
        coarse_points = grid.coordinates[grid.boundary_ids]
        prepared = []
        for experiment in problem.experiments:
            distance, index = cKDTree(experiment.points).query(coarse_points)
            if np.any(distance > 1e-9):
                raise ReconstructionError("Measurement grid does not contain every boundary node of the inversion grid")
            gamma, tau = boundary_data_from_spec(grid, experiment.spec, problem.public.species)
            prepared.append((gamma, tau, experiment.fluxes[:, index]))
        return prepared

    def bundle(self, theta: np.ndarray) -> ModelBundle:
        problem = self.problem
        public = problem.public
        diffusion = problem.family.build(theta)
        return ModelBundle(
            species=public.species,
            charges=public.charges,
            potential=problem.potential,
            diffusion=(diffusion,) * public.species,
            sources=(SourceModel.zero(public.species, public.dim),) * public.species,
            permittivity=public.permittivity,
            lam=public.lam,
            upper=problem.family.upper,
        )

    def residual(self, theta: np.ndarray) -> np.ndarray:
        """Area-weighted flux mismatch over all experiments and species."""
        bundle = self.bundle(theta)
        parts = []
        for gamma, tau, target in self._targets:
            state = forward_solve(bundle, gamma, tau, self.problem.options, max_workers=1)
            record = cauchy_record(state, bundle)
            for i, flux in enumerate(record.species_flux):
                parts.append(self._sqrt_weights * (flux.values - target[i]))
        return np.concatenate(parts)

    def jacobian(self, theta: np.ndarray, base: np.ndarray) -> np.ndarray:
        """Forward differences with step 1e-4 max(|theta_k|, 1), backward at the upper bound."""
        problem = self.problem
        columns: list[Optional[np.ndarray]] = [None] * theta.size

        def column(k: int) -> np.ndarray:
            step = 1e-4 * max(abs(theta[k]), 1.0)
            if theta[k] + step > problem.upper[k]:
                step = -step
            shifted = theta.copy()
            shifted[k] += step
            return (self.residual(shifted) - base) / step

        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            future_to_index = {executor.submit(column, k): k for k in range(theta.size)}
            for future in as_completed(future_to_index):
                columns[future_to_index[future]] = future.result()
        return np.stack(columns, axis=1)

    def _check_rank(self, jacobian: np.ndarray) -> tuple[int, float]:
        singular = np.linalg.svd(jacobian, compute_uv=False)
        rank = int(np.sum(singular > singular[0] * 1e-8)) if singular[0] > 0 else 0
        condition = float(singular[0] / singular[-1]) if singular[-1] > 0 else float("inf")
        if rank < jacobian.shape[1]:
            _, _, vt = np.linalg.svd(jacobian)
            direction = vt[-1]
            names = self.problem.family.parameter_names
            described = " + ".join(f"{w:.3f}*{n}" for w, n in zip(direction, names))
            raise IdentifiabilityError(
                f"Jacobian rank {rank} < {jacobian.shape[1]}; unidentifiable direction {described}", direction
            )
        return rank, condition

    def run(self) -> tuple[np.ndarray, FitReport]:
        """
        Fit theta.

        Returns:
            (theta_hat, FitReport)

        Raises:
            IdentifiabilityError: If the Jacobian at theta_init is rank deficient
        """
        problem = self.problem
        theta = np.clip(problem.theta_init.astype(float), problem.lower, problem.upper)
        r = self.residual(theta)
        loss = float(r @ r)
        J = self.jacobian(theta, r)
        rank, condition = self._check_rank(J)

        trace = [FitIterationRecord(iteration=0, theta=theta.tolist(), loss=loss, damping=0.0, accepted=True, note="initial")]
        damping = 1e-3
        iteration = 0
        converged = False
        reason = "iteration limit reached"

        while iteration < self.max_iterations:
            gradient = J.T @ r
            if loss == 0.0 or np.linalg.norm(gradient) < 1e-8:
                converged, reason = True, "gradient norm below 1e-8"
                break

            normal = J.T @ J
            diagonal = np.maximum(np.diag(normal), 1e-12 * max(float(np.diag(normal).max()), 1e-300))
            step = np.linalg.solve(normal + damping * np.diag(diagonal), -gradient)
            trial = np.clip(theta + step, problem.lower, problem.upper)
            iteration += 1

            try:
                r_trial = self.residual(trial)
            except NUMERICAL_ERRORS as e:
                trace.append(FitIterationRecord(
                    iteration=iteration, theta=trial.tolist(), loss=float("inf"), damping=damping,
                    accepted=False, note=f"forward failure: {e}",
                ))
                damping *= 4.0
                continue

            loss_trial = float(r_trial @ r_trial)
            if loss_trial < loss:
                decrease = (loss - loss_trial) / loss
                theta, r, loss = trial, r_trial, loss_trial
                damping /= 3.0
                trace.append(FitIterationRecord(iteration=iteration, theta=theta.tolist(), loss=loss, damping=damping, accepted=True))
                self.logger.debug(f"Fit step {iteration}: loss {loss:.6e}")
                if decrease < 1e-10:
                    converged, reason = True, "relative loss decrease below 1e-10"
                    break
                J = self.jacobian(theta, r)
            else:
                damping *= 4.0
                trace.append(FitIterationRecord(
                    iteration=iteration, theta=trial.tolist(), loss=loss_trial, damping=damping, accepted=False,
                ))
                if damping > 1e12:
                    converged, reason = True, "no decrease at maximal damping"
                    break

        singular = np.linalg.svd(J, compute_uv=False)
        condition = float(singular[0] / singular[-1]) if singular[-1] > 0 else float("inf")
        report = FitReport(
            parameter_names=problem.family.parameter_names,
            theta_hat=theta.tolist(),
            final_loss=loss,
            iterations=iteration,
            converged=converged,
            reason=reason,
            jacobian_rank=rank,
            jacobian_condition=condition,
            trace=trace,
        )
        status = "✅" if converged else "⚠️"
        self.logger.info(f"{status} Diffusion fit: theta={np.round(theta, 6).tolist()}, loss {loss:.3e} ({reason})")
        return theta, report


def fit_diffusion(
    lab: Laboratory,
    problem: DiffusionFitProblem,
    max_iterations: Optional[int] = None,
    max_workers: Optional[int] = None
) -> tuple[np.ndarray, FitReport]:
    """Fit D_theta to the measured fluxes stored in the problem's experiments."""
    if problem.public.species != lab.public.species:
        raise ReconstructionError("Fit problem and laboratory disagree on the species count")
    return DiffusionFitter(problem, max_iterations, max_workers).run()


__all__ = [
    "ReconstructionError",
    "IdentifiabilityError",
    "TableRangeError",
    "ReconstructionTable",
    "BOUNDARY_VOLTAGE",
    "INTERIOR_TEMPERATURE",
    "boundary_sweep",
    "reconstruct_phi_boundary",
    "BoundaryGradientEstimate",
    "reconstruct_phi_gradients_boundary",
    "recover_normal_x_gradient",
    "BoundaryInverse",
    "reconstruct_phi_interior",
    "fit_affine_potential",
    "FitExperiment",
    "default_fit_experiments",
    "collect_fit_dataset",
    "DiffusionFitProblem",
    "DiffusionFitter",
    "fit_diffusion",
]
