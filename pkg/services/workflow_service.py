"""
Workflow Service - runs one subcommand end to end.

Loads and validates the run configuration, builds grids, models and
laboratories, calls the numerical services and writes every artifact
through RunStorage.
"""

import hashlib
import logging
import platform
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd
import pydantic
import scipy
import yaml
from pydantic import ValidationError

from config import get_settings
from models import (
    BoundaryDataSpec,
    BoundaryDemoReport,
    BoundaryDemoRow,
    PicardOptions,
    RunConfig,
    RunManifest,
)
from services.coefficient_service import (
    DiffusionFamily,
    build_bundle,
    interior_bump,
    interior_bump_bundle,
    validate_ellipticity,
)
from services.elliptic_service import manufactured_convergence_study
from services.forward_service import (
    SystemState,
    forward_solve,
    nonuniqueness_with_sources,
    source_nonuniqueness_study,
)
from services.measurement_service import (
    Laboratory,
    boundary_data_from_spec,
    cauchy_record,
    linearisation_rate,
)
from services.reconstruction_service import (
    BOUNDARY_VOLTAGE,
    DiffusionFitProblem,
    ReconstructionTable,
    collect_fit_dataset,
    default_fit_experiments,
    fit_affine_potential,
    fit_diffusion,
    reconstruct_phi_boundary,
    reconstruct_phi_gradients_boundary,
    reconstruct_phi_interior,
    recover_normal_x_gradient,
)
from services.storage_service import RunStorage
from utils.expression_parser import coordinate_function
from utils.grid import AXIS_NAMES, BoundaryField, Grid, ScalarField, boundary_norm, build_grid, l2_norm

logger = logging.getLogger(__name__)

SUBCOMMANDS = (
    "forward",
    "measure",
    "verify-linearisation",
    "reconstruct-phi",
    "fit-d",
    "demo-boundary-nonuniqueness",
    "demo-source-nonuniqueness",
    "convergence",
)


class ConfigError(Exception):
    """Raised when the run configuration cannot be read or validated."""
    pass


class VerificationError(Exception):
    """Raised when a demonstration misses its own acceptance thresholds."""
    pass


def load_run_config(path: str) -> RunConfig:
    """
    Read a YAML run configuration.

    Raises:
        ConfigError: With the YAML line or the dotted field path of the problem
    """
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = yaml.safe_load(config_path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: invalid YAML at {where}: {getattr(e, 'problem', e)}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(f"{path}: field '{field}': {first['msg']} ({e.error_count()} error(s))") from e


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def state_frame(state: SystemState) -> pd.DataFrame:
    """Nodal state: node_id, coordinates, c1..cM, T, sigma."""
    grid = state.grid
    data: dict[str, Any] = {"node_id": np.arange(grid.node_count)}
    for j in range(grid.dim):
        data[AXIS_NAMES[j]] = grid.coordinates[:, j]
    for i, c in enumerate(state.concentrations):
        data[f"c{i + 1}"] = c.values
    data["T"] = state.temperature.values
    data["sigma"] = state.substituted.values
    return pd.DataFrame(data)


def cauchy_frame(grid: Grid, record) -> pd.DataFrame:
    """Boundary record: node_id, coordinates, gamma_i, tau, flux_i, temp_flux."""
    ids = grid.boundary_ids
    data: dict[str, Any] = {"node_id": ids}
    for j in range(grid.dim):
        data[AXIS_NAMES[j]] = grid.coordinates[ids, j]
    for i, g in enumerate(record.gamma):
        data[f"gamma{i + 1}"] = g.values
    data["tau"] = record.tau.values
    for i, flux in enumerate(record.species_flux):
        data[f"flux{i + 1}"] = flux.values
    if record.temperature_flux is not None:
        data["temp_flux"] = record.temperature_flux.values
    return pd.DataFrame(data)


class WorkflowService:
    """
    Service running one subcommand.

    Responsibilities:
    - Build grid, model bundle and solver options from RunConfig
    - Dispatch to the numerical services
    - Serialize reports, tables and the run manifest
    """

    def __init__(self, config: RunConfig, max_workers: Optional[int] = None):
        """
        Initialize workflow service.

        Args:
            config: Validated run configuration (CLI overrides already applied)
            max_workers: Thread-pool size for concurrent solves
        """
        self.config = config
        self.max_workers = max_workers or get_settings().max_workers
        self.storage = RunStorage(config.output_dir, seed=config.seed)
        self.timings: dict[str, float] = {}
        self.logger = logger

    # ----- setup -----

    def grid(self) -> Grid:
        spec = self.config.grid
        return build_grid(spec.dim, spec.n, spec.extent)

    def bundle(self):
        return build_bundle(self.config.model, self.config.grid.dim)

    def options(self) -> PicardOptions:
        return PicardOptions.from_spec(self.config.solver)

    def boundary_specs(self) -> list[BoundaryDataSpec]:
        specs = self.config.experiment.boundary_data
        if specs:
            return specs
        M = self.config.model.species
        return [BoundaryDataSpec(gamma=[1.0] * M, tau=0.0, label="default")]

    def laboratory(self, grid: Grid, bundle=None, noise: bool = True, keep_records: bool = False) -> Laboratory:
        return Laboratory(
            bundle or self.bundle(), grid, self.options(),
            noise=self.config.experiment.noise if noise else None,
            seed=self.config.seed, max_workers=self.max_workers, keep_records=keep_records,
        )

    def reference_node(self, grid: Grid) -> int:
        """Boundary node closest to the configured reconstruction reference point."""
        point = np.asarray(self.config.experiment.reconstruction.reference_point, dtype=float)
        if point.size != grid.dim:
            raise ConfigError(f"reconstruction.reference_point needs {grid.dim} coordinates")
        boundary = grid.boundary_ids
        return int(boundary[np.argmin(np.linalg.norm(grid.coordinates[boundary] - point, axis=1))])

    def write_state(self, directory: str, state: SystemState) -> None:
        """One CSV per field (node_id, coordinates, value), the grid descriptor and the Picard report."""
        for i, c in enumerate(state.concentrations):
            self.storage.write_csv(f"{directory}/c{i + 1}.csv", c.to_frame())
        self.storage.write_csv(f"{directory}/T.csv", state.temperature.to_frame())
        self.storage.write_csv(f"{directory}/sigma.csv", state.substituted.to_frame())
        self.storage.write_json(f"{directory}/grid.json", state.grid.to_descriptor())
        self.storage.write_json(f"{directory}/report.json", state.report)

    def _timed(self, label: str, func: Callable[[], Any]) -> Any:
        start = time.perf_counter()
        result = func()
        self.timings[label] = round(time.perf_counter() - start, 6)
        return result

    # ----- entry point -----

    def run(self, subcommand: str) -> dict[str, Any]:
        """
        Run a subcommand and write its artifacts plus the manifest.

        Returns:
            Summary dictionary printed by the CLI
        """
        handlers = {
            "forward": self.run_forward,
            "measure": self.run_measure,
            "verify-linearisation": self.run_linearisation,
            "reconstruct-phi": self.run_reconstruct_phi,
            "fit-d": self.run_fit,
            "demo-boundary-nonuniqueness": self.run_boundary_demo,
            "demo-source-nonuniqueness": self.run_source_demo,
            "convergence": self.run_convergence,
        }
        if subcommand not in handlers:
            raise ConfigError(f"Unknown subcommand '{subcommand}'")

        started = datetime.now(timezone.utc).isoformat()
        effective = dump_run_config(self.config)
        self.storage.write_yaml("effective_config.yaml", self.config)
        try:
            summary = self._timed(subcommand, handlers[subcommand])
        except VerificationError:
            # numerical-failure exit code
            self.write_manifest(subcommand, effective, started, exit_code=2)
            raise
        self.write_manifest(subcommand, effective, started)
        self.logger.info(f"✅ {subcommand} finished, artifacts in {self.storage.output_dir}")
        return summary

    def write_manifest(self, subcommand: str, effective: str, started: str, exit_code: int = 0) -> None:
        settings = get_settings()
        manifest = RunManifest(
            app_name=settings.app_name,
            app_version=settings.app_version,
            subcommand=subcommand,
            config_sha256=hashlib.sha256(effective.encode("utf-8")).hexdigest(),
            seed=self.config.seed,
            started_at=started,
            finished_at=datetime.now(timezone.utc).isoformat(),
            timings=self.timings,
            versions={
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pandas": pd.__version__,
                "pydantic": pydantic.VERSION,
            },
            exit_code=exit_code,
        )
        self.storage.write_json("manifest.json", manifest)

    # ----- subcommands -----

    def _ellipticity(self, bundle, grid: Grid, specs: list[BoundaryDataSpec]) -> None:
        gammas, taus = [], []
        for spec in specs:
            gamma, tau = boundary_data_from_spec(grid, spec, bundle.species)
            gammas.append(np.stack([g.values for g in gamma]))
            taus.append(tau.values)
        gamma_values = np.concatenate(gammas, axis=1)
        tau_values = np.concatenate(taus)
        p_ranges = [(float(row.min()), float(row.max())) for row in gamma_values]
        s_range = (float(tau_values.min()), float(tau_values.max()))
        report = validate_ellipticity(bundle, p_ranges, s_range, grid.extent)
        self.storage.write_json("ellipticity.json", report)
        if not report.passed:
            v = report.violation
            self.logger.warning(f"⚠️ Ellipticity check failed: {v.coefficient} = {v.value:.6g} at p={v.p}, s={v.s:.6g}")

    def run_forward(self) -> dict[str, Any]:
        grid, bundle, options = self.grid(), self.bundle(), self.options()
        specs = self.boundary_specs()
        self._ellipticity(bundle, grid, specs)

        self.storage.write_json("grid.json", grid.to_descriptor())
        reports = []
        for k, spec in enumerate(specs):
            gamma, tau = boundary_data_from_spec(grid, spec, bundle.species)
            state = self._timed(f"forward[{k}]", lambda: forward_solve(bundle, gamma, tau, options, self.max_workers))
            self.write_state(f"state_{k}", state)
            self.storage.write_csv(f"cauchy_{k}.csv", cauchy_frame(grid, cauchy_record(state, bundle)))
            reports.append({"label": spec.label, **state.report.model_dump(mode="json")})
        self.storage.write_json("picard_reports.json", reports)
        return {"experiments": len(specs), "iterations": [r["iterations"] for r in reports]}

    def run_measure(self) -> dict[str, Any]:
        grid = self.grid()
        lab = self.laboratory(grid, keep_records=True)
        probes = np.asarray(self.config.experiment.probe_points, dtype=float).reshape(-1, grid.dim)
        reference = int(grid.boundary_ids[0])
        for k, spec in enumerate(self.boundary_specs()):
            gamma, tau = boundary_data_from_spec(grid, spec, lab.public.species)
            record = self._timed(f"cauchy[{k}]", lambda: lab.cauchy(gamma, tau, label=spec.label))
            self.storage.write_csv(f"cauchy_{k}.csv", cauchy_frame(grid, record))
            lab.voltages(gamma, tau, reference=reference, label=spec.label)
            if probes.size:
                lab.temperatures(gamma, tau, probes, label=spec.label)
        records = sorted(lab.records, key=lambda r: (r.experiment_id, r.family, r.boundary.get("label", "")))
        self.storage.write_jsonl("measurements.jsonl", records)
        lab.clear()
        return {"records": len(records)}

    def run_linearisation(self) -> dict[str, Any]:
        grid, bundle = self.grid(), self.bundle()
        spec = self.config.experiment.linearisation
        if len(spec.directions) != bundle.species or len(spec.mu) != bundle.species:
            raise ConfigError("linearisation.mu and linearisation.directions need one entry per species")
        f = [BoundaryField.from_function(grid, coordinate_function(d, grid.dim)) for d in spec.directions]
        eta0 = None
        if spec.eta0 is not None:
            eta0 = BoundaryField.from_function(grid, coordinate_function(spec.eta0, grid.dim))
        report = linearisation_rate(bundle, spec.mu, f, spec.t_values, eta0, self.options(), self.max_workers)
        self.storage.write_json("rate_report.json", report)
        self.storage.write_csv("rate.csv", pd.DataFrame({
            "t": report.t_values,
            "error": [np.nan if e is None else e for e in report.errors],
            "converged": report.converged,
        }))
        return {"slope": report.slope, "fit_points": report.fit_points}

    def run_reconstruct_phi(self) -> dict[str, Any]:
        grid, bundle = self.grid(), self.bundle()
        spec = self.config.experiment.reconstruction
        M = bundle.species
        if len(spec.mu) != M or len(spec.reference_z) != M + 1:
            raise ConfigError("reconstruction.mu needs M entries and reference_z needs M + 1")
        lab = self.laboratory(grid, bundle)
        x0 = self.reference_node(grid)
        reference = (spec.reference_z, x0)
        p_samples = spec.boundary_p_samples or [spec.mu]
        z_samples = [list(p) + [s] for p in p_samples for s in spec.boundary_s_samples]

        table = self._phi_table(lab, reference, z_samples)
        self.storage.write_csv("phi_table.csv", table.to_frame())

        gradient_rows = self._boundary_gradients(lab, grid, reference, spec)
        if gradient_rows:
            self.storage.write_csv("phi_gradients.csv", pd.DataFrame(gradient_rows))

        stats = table.offset_statistics(bundle.potential)
        result: dict[str, Any] = {
            "reference": {"z0": list(spec.reference_z), "x0": grid.coordinates[x0].tolist()},
            "offsets": stats.model_dump(),
            "boundary_offsets": table.offset_statistics(bundle.potential, BOUNDARY_VOLTAGE).model_dump(),
            "spread_tolerance": spec.spread_tolerance,
            "passed": stats.std <= spec.spread_tolerance,
            "skipped": table.skipped,
        }
        if spec.gauge_shift is not None:
            shifted_lab = self.laboratory(grid, bundle.with_potential(bundle.potential.shifted(spec.gauge_shift)))
            shifted = self._phi_table(shifted_lab, reference, z_samples, label="gauge ")
            result["gauge_max_difference"] = table.max_difference(shifted)
            result["gauge_compared"] = len(table)
        self.storage.write_json("offsets.json", result)
        status = "✅" if result["passed"] else "⚠️"
        self.logger.info(f"{status} Offset spread {stats.std:.3e} (tolerance {spec.spread_tolerance:.1e})")
        return {"offset_std": stats.std, "offset_mean": stats.mean, "passed": result["passed"]}

    def _phi_table(self, lab: Laboratory, reference, z_samples: list[list[float]], label: str = "") -> ReconstructionTable:
        """Boundary voltage table merged with the interior temperature tables of every configured point."""
        spec = self.config.experiment.reconstruction
        boundary = self._timed(f"{label}boundary", lambda: reconstruct_phi_boundary(
            lab, z_samples, reference, radius=spec.bump_radius, max_workers=self.max_workers
        ))
        table = boundary
        for k, point in enumerate(spec.interior_points):
            interior = self._timed(f"{label}interior[{k}]", lambda: reconstruct_phi_interior(
                lab, boundary, spec.mu, spec.s_samples, point, self.max_workers
            ))
            table = table.merge(interior)
        return table

    def _boundary_gradients(self, lab: Laboratory, grid: Grid, reference, spec) -> list[dict]:
        count = min(spec.gradient_samples, grid.boundary_ids.size)
        if count == 0:
            return []
        z = list(spec.mu) + [spec.boundary_s_samples[len(spec.boundary_s_samples) // 2]]
        picks = np.linspace(0, grid.boundary_ids.size - 1, count).astype(int)
        rows = []
        for node in grid.boundary_ids[picks]:
            estimate = reconstruct_phi_gradients_boundary(
                lab, z, int(node), reference, spec.delta, spec.bump_radius, self.max_workers
            )
            normal = recover_normal_x_gradient(
                lab, lab.public, z, int(node), reference,
                partial_s=float(estimate.state_partials[-1]), radius=spec.bump_radius,
            )
            row: dict[str, Any] = {"node_id": int(node)}
            for j in range(grid.dim):
                row[AXIS_NAMES[j]] = float(grid.coordinates[node, j])
            for j, value in enumerate(estimate.state_partials):
                row[f"d_p{j + 1}" if j < len(z) - 1 else "d_s"] = float(value)
            for j in range(grid.dim):
                row[f"tangential_{AXIS_NAMES[j]}"] = float(estimate.tangential[j])
            row["normal_x"] = normal
            row["flagged"] = estimate.flagged
            rows.append(row)
        return rows

    def run_fit(self) -> dict[str, Any]:
        grid, bundle = self.grid(), self.bundle()
        fit = self.config.experiment.fit
        M = bundle.species
        family = DiffusionFamily(fit.expression, M, grid.dim, len(fit.truth), bundle.lam, bundle.upper)
        truth_bundle = bundle.with_diffusion([family.build(fit.truth)] * M)

        data_grid = grid
        for _ in range(fit.data_refinement):
            data_grid = data_grid.refined()
        lab = self.laboratory(data_grid, truth_bundle)
        if fit.potential == "known":
            potential = bundle.potential
        else:
            potential = self._timed("potential", lambda: self._reconstructed_potential(lab, data_grid))

        specs = self.config.experiment.boundary_data or self.fit_experiments(family.parameter_count)
        experiments = self._timed("data", lambda: collect_fit_dataset(lab, specs))
        problem = DiffusionFitProblem(
            family=family,
            theta_init=np.asarray(fit.initial),
            lower=np.asarray(fit.lower),
            upper=np.asarray(fit.upper),
            potential=potential,
            public=lab.public,
            grid=grid,
            experiments=tuple(experiments),
            options=self.options(),
        )
        theta, report = self._timed("fit", lambda: fit_diffusion(lab, problem, fit.max_iterations, self.max_workers))
        self.storage.write_json("fit_report.json", report)
        self.storage.write_csv("fit_trace.csv", pd.DataFrame([
            {"iteration": r.iteration, **{n: v for n, v in zip(report.parameter_names, r.theta)},
             "loss": r.loss, "damping": r.damping, "accepted": r.accepted}
            for r in report.trace
        ]))
        relative = (np.abs(theta - np.asarray(fit.truth)) / np.maximum(np.abs(fit.truth), 1e-12)).tolist()
        return {"theta_hat": theta.tolist(), "relative_error": relative, "loss": report.final_loss}

    def fit_experiments(self, parameters: int) -> list[BoundaryDataSpec]:
        """Default fit dataset; probes sit at the linearisation background and directions when those fit M."""
        M = self.config.model.species
        linearisation = self.config.experiment.linearisation
        mu = linearisation.mu if len(linearisation.mu) == M else None
        directions = linearisation.directions if len(linearisation.directions) == M else None
        return default_fit_experiments(M, parameters, mu, directions, self.config.experiment.fit.probe_step)

    def _reconstructed_potential(self, lab: Laboratory, grid: Grid):
        """Affine phi_hat fitted to a boundary voltage table measured in the laboratory."""
        spec = self.config.experiment.reconstruction
        M = self.config.model.species
        if len(spec.mu) != M or len(spec.reference_z) != M + 1:
            raise ConfigError("reconstruction.mu needs M entries and reference_z needs M + 1")
        p_samples = spec.boundary_p_samples or [list(spec.mu)] + [
            list(np.asarray(spec.mu) + 0.25 * np.eye(M)[i]) for i in range(M)
        ]
        z_samples = [list(p) + [s] for p in p_samples for s in spec.boundary_s_samples]
        table = reconstruct_phi_boundary(
            lab, z_samples, (spec.reference_z, self.reference_node(grid)),
            radius=spec.bump_radius, max_workers=self.max_workers,
        )
        potential, report = fit_affine_potential(table)
        self.storage.write_json("potential_fit.json", report)
        return potential

    def run_boundary_demo(self) -> dict[str, Any]:
        grid, bundle = self.grid(), self.bundle()
        spec = self.config.experiment.boundary_demo
        center = spec.bump_center or [0.5 * (lo + hi) for lo, hi in grid.extent]
        if len(center) != grid.dim:
            raise ConfigError(f"boundary_demo.bump_center needs {grid.dim} coordinates")
        margin = 2.0 * max(grid.spacing)
        for j, (lo, hi) in enumerate(grid.extent):
            if center[j] - spec.bump_radius < lo + margin or center[j] + spec.bump_radius > hi - margin:
                raise ConfigError("boundary_demo bump must stay at least two grid spacings inside the domain")
        modified = interior_bump_bundle(bundle, interior_bump(center, spec.bump_radius), spec.amplitude)
        lab = self.laboratory(grid, bundle, noise=False)
        lab_bumped = self.laboratory(grid, modified, noise=False)
        reference = int(grid.boundary_ids[0])
        probe = np.asarray([center], dtype=float)

        rows = []
        for data in self.boundary_specs():
            gamma, tau = boundary_data_from_spec(grid, data, bundle.species)
            first, second = lab.cauchy(gamma, tau), lab_bumped.cauchy(gamma, tau)
            flux_diff = max(
                boundary_norm(BoundaryField(grid, a.values - b.values))
                for a, b in zip(first.species_flux, second.species_flux)
            )
            temp_flux_diff = boundary_norm(
                BoundaryField(grid, first.temperature_flux.values - second.temperature_flux.values)
            )
            voltage_diff = float(np.max(np.abs(
                lab.voltages(gamma, tau, reference).values - lab_bumped.voltages(gamma, tau, reference).values
            )))
            interior = lab.temperatures(gamma, tau, grid.coordinates)
            interior_bumped = lab_bumped.temperatures(gamma, tau, grid.coordinates)
            center_diff = float(abs(lab.temperatures(gamma, tau, probe)[0] - lab_bumped.temperatures(gamma, tau, probe)[0]))
            rows.append(BoundaryDemoRow(
                label=data.label,
                species_flux_difference=flux_diff,
                temperature_flux_difference=temp_flux_diff,
                voltage_difference=voltage_diff,
                interior_temperature_difference_l2=l2_norm(ScalarField(grid, interior - interior_bumped)),
                center_temperature_difference=center_diff,
            ))

        max_boundary = max(
            max(r.species_flux_difference, r.temperature_flux_difference, r.voltage_difference) for r in rows
        )
        min_center = min(r.center_temperature_difference for r in rows)
        report = BoundaryDemoReport(
            center=list(center),
            bump_radius=spec.bump_radius,
            amplitude=spec.amplitude,
            rows=rows,
            max_boundary_difference=max_boundary,
            min_center_difference=min_center,
            boundary_tolerance=spec.boundary_tolerance,
            interior_threshold=spec.interior_threshold,
            verified=max_boundary <= spec.boundary_tolerance and min_center >= spec.interior_threshold,
        )
        self.storage.write_json("boundary_demo.json", report)
        if not report.verified:
            raise VerificationError(
                f"Boundary difference {max_boundary:.3e} (limit {spec.boundary_tolerance:.1e}), "
                f"centre temperature difference {min_center:.3e} (needs {spec.interior_threshold:.1e})"
            )
        self.logger.info(f"✅ Boundary record unchanged to {max_boundary:.3e}, centre temperature moved by {min_center:.3e}")
        return {
            "max_boundary_difference": max_boundary,
            "min_center_difference": min_center,
            "verified": report.verified,
        }

    def run_source_demo(self) -> dict[str, Any]:
        grid = self.grid()
        zero, eigen = nonuniqueness_with_sources(grid)
        frame = state_frame(eigen).rename(columns={"c1": "c1_eigen"})
        frame.insert(frame.columns.get_loc("c1_eigen"), "c1_zero", zero.concentrations[0].values)
        self.storage.write_csv("source_states.csv", frame)
        study = self._timed("study", lambda: source_nonuniqueness_study(self.config.experiment.convergence.n_values))
        self.storage.write_json("source_study.json", study)
        return {"fitted_order": study.fitted_order, "residual_eigen": study.residual_eigen}

    def run_convergence(self) -> dict[str, Any]:
        study = manufactured_convergence_study(self.config.experiment.convergence.n_values, self.config.solver.linear_tol)
        self.storage.write_json("convergence.json", study)
        self.storage.write_csv("convergence.csv", pd.DataFrame({
            "n": study.n_values, "h": study.h_values, "l2_error": study.errors,
        }))
        return {"orders": study.orders}


__all__ = [
    "SUBCOMMANDS",
    "ConfigError",
    "WorkflowService",
    "load_run_config",
    "dump_run_config",
    "state_frame",
    "cauchy_frame",
    "VerificationError",
]
