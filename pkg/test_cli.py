"""
Command-line and workflow tests.

Runs main() in-process against small YAML configs written to a temporary directory.
"""

import json
from pathlib import Path

import pandas as pd
import pytest
import yaml

from main import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from services.storage_service import RunStorage, StorageError
from services.workflow_service import ConfigError, WorkflowService, load_run_config
from utils.grid import Grid

SMALL_CONFIG = {
    "grid": {"dim": 2, "n": [9, 9]},
    "model": {
        "species": 1,
        "charges": [1.0],
        "potential": {"kind": "affine", "p_coefficients": [0.2], "x_coefficients": [0.1, 0.0]},
        "diffusion": [{"kind": "affine", "value": 1.0, "s_coefficient": 0.1}],
    },
    "solver": {"linear_tol": 1e-11, "fixed_point_tol": 1e-10},
    "experiment": {
        "boundary_data": [
            {"gamma": ["1 + 0.2*x1"], "tau": "0.5*x2", "label": "ramp"},
            {"gamma": [1.0], "tau": 0.0, "label": "flat"},
        ],
        "probe_points": [[0.5, 0.5]],
        "reconstruction": {
            "mu": [1.0],
            "reference_z": [1.0, 0.0],
            "boundary_s_samples": [-0.5, 0.0, 0.5],
            "s_samples": [-0.1, 0.1],
            "gradient_samples": 2,
            "gauge_shift": 3.0,
        },
        "convergence": {"n_values": [9, 17]},
    },
    "seed": 3,
}


def _write_config(tmp_path, data=None, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(SMALL_CONFIG if data is None else data), encoding="utf-8")
    return str(path)


def _run(tmp_path, subcommand, config=None, *extra):
    out = tmp_path / "out"
    code = main([subcommand, "--config", config or _write_config(tmp_path), "--out", str(out), "--threads", "2", *extra])
    return code, out


# ===== Exit codes =====

def test_convergence_run_writes_manifest(tmp_path):
    code, out = _run(tmp_path, "convergence")
    assert code == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["subcommand"] == "convergence"
    assert manifest["seed"] == 3
    assert len(manifest["config_sha256"]) == 64
    assert {"python", "numpy", "scipy", "pandas", "pydantic"} <= set(manifest["versions"])
    effective = yaml.safe_load((out / "effective_config.yaml").read_text())
    assert effective["output_dir"] == str(out)
    first_line = (out / "convergence.csv").read_text().splitlines()[0]
    assert first_line.startswith("#") and "seed=3" in first_line


def test_forward_run_writes_states(tmp_path):
    code, out = _run(tmp_path, "forward")
    assert code == EXIT_OK
    grid = Grid.from_descriptor(json.loads((out / "grid.json").read_text()))
    assert grid.node_count == 81
    for name in ("c1.csv", "T.csv", "sigma.csv"):
        field = pd.read_csv(out / "state_0" / name, comment="#")
        assert list(field.columns) == ["node_id", "x", "y", "value"]
        assert len(field) == grid.node_count
    assert json.loads((out / "state_1" / "grid.json").read_text()) == grid.to_descriptor()
    assert json.loads((out / "state_0" / "report.json").read_text())["converged"]
    cauchy = pd.read_csv(out / "cauchy_1.csv", comment="#")
    assert list(cauchy.columns) == ["node_id", "x", "y", "gamma1", "tau", "flux1", "temp_flux"]
    reports = json.loads((out / "picard_reports.json").read_text())
    assert [r["label"] for r in reports] == ["ramp", "flat"]
    assert all(r["converged"] for r in reports)
    assert json.loads((out / "ellipticity.json").read_text())["passed"]


def test_measure_is_deterministic(tmp_path):
    config = _write_config(tmp_path)
    first = tmp_path / "first"
    second = tmp_path / "second"
    assert main(["measure", "--config", config, "--out", str(first), "--seed", "11"]) == EXIT_OK
    assert main(["measure", "--config", config, "--out", str(second), "--seed", "11"]) == EXIT_OK
    one = (first / "measurements.jsonl").read_text()
    assert one == (second / "measurements.jsonl").read_text()
    families = {json.loads(line)["family"] for line in one.splitlines()}
    assert families == {"species_flux", "temperature_flux", "voltage", "temperature"}


def test_reconstruct_phi_offsets(tmp_path):
    code, out = _run(tmp_path, "reconstruct-phi")
    assert code == EXIT_OK
    offsets = json.loads((out / "offsets.json").read_text())
    assert offsets["passed"]
    assert offsets["gauge_max_difference"] < 1e-8
    # phi_hat(z0, x0) = 0 at z0 = (1, 0), x0 = (0, 0): the common offset is phi(z0, x0) = 0.2.
    assert offsets["boundary_offsets"]["mean"] == pytest.approx(0.2, abs=1e-9)
    table = pd.read_csv(out / "phi_table.csv", comment="#")
    assert set(table["provenance"]) == {"boundary-voltage", "interior-temperature"}
    # The phi + r rerun covers interior entries as well as the boundary table.
    assert offsets["gauge_compared"] == len(table)
    gradients = pd.read_csv(out / "phi_gradients.csv", comment="#")
    assert len(gradients) == 2
    assert gradients["d_s"].to_numpy() == pytest.approx([1.0, 1.0], abs=1e-6)


def _experiment(tmp_path, **sections):
    data = json.loads(json.dumps(SMALL_CONFIG))
    data["experiment"].update(sections)
    return _write_config(tmp_path, data)


def test_verify_linearisation_run(tmp_path):
    config = _experiment(tmp_path, linearisation={"mu": [1.0], "directions": ["x1"], "t_values": [0.5, 0.25, 0.125, 0.0625]})
    code, out = _run(tmp_path, "verify-linearisation", config)
    assert code == EXIT_OK
    report = json.loads((out / "rate_report.json").read_text())
    assert all(report["converged"])
    assert report["fit_points"] == 4
    assert report["slope"] is not None
    assert report["bound_constant"] > 0
    rate = pd.read_csv(out / "rate.csv", comment="#")
    assert list(rate.columns) == ["t", "error", "converged"]
    assert len(rate) == 4


def test_fit_d_run_with_reconstructed_potential(tmp_path):
    config = _experiment(tmp_path, boundary_data=[], fit={"data_refinement": 0, "max_iterations": 30})
    code, out = _run(tmp_path, "fit-d", config)
    assert code == EXIT_OK
    # The affine truth 0.2*p1 + s + 0.1*x1 is recovered up to its gauge constant.
    potential = json.loads((out / "potential_fit.json").read_text())
    assert potential["s_coefficient"] == pytest.approx(1.0, abs=1e-7)
    assert potential["p_coefficients"] == pytest.approx([0.2], abs=1e-7)
    assert potential["x_coefficients"] == pytest.approx([0.1, 0.0], abs=1e-7)
    report = json.loads((out / "fit_report.json").read_text())
    assert report["theta_hat"] == pytest.approx([1.0, 0.3], rel=1e-3)
    assert report["jacobian_rank"] == 2
    trace = pd.read_csv(out / "fit_trace.csv", comment="#")
    assert {"iteration", "theta1", "theta2", "loss", "accepted"} <= set(trace.columns)


def test_boundary_nonuniqueness_demo_run(tmp_path):
    config = _experiment(tmp_path, boundary_demo={"bump_radius": 0.2, "amplitude": 0.05})
    code, out = _run(tmp_path, "demo-boundary-nonuniqueness", config)
    assert code == EXIT_OK
    report = json.loads((out / "boundary_demo.json").read_text())
    assert report["verified"]
    assert report["max_boundary_difference"] <= 1e-6
    assert report["min_center_difference"] >= 1e-2
    # Affine phi with unit s coefficient: T moves by exactly the amplitude at the bump centre.
    assert [r["center_temperature_difference"] for r in report["rows"]] == pytest.approx([0.05, 0.05], abs=1e-6)


def test_boundary_nonuniqueness_demo_below_threshold(tmp_path):
    config = _experiment(tmp_path, boundary_demo={"bump_radius": 0.2, "amplitude": 1e-3})
    code, out = _run(tmp_path, "demo-boundary-nonuniqueness", config)
    assert code == EXIT_NUMERICAL
    assert not json.loads((out / "boundary_demo.json").read_text())["verified"]
    assert json.loads((out / "manifest.json").read_text())["exit_code"] == EXIT_NUMERICAL


def test_boundary_nonuniqueness_demo_rejects_bump_near_boundary(tmp_path):
    config = _experiment(tmp_path, boundary_demo={"bump_radius": 0.4})
    code, _ = _run(tmp_path, "demo-boundary-nonuniqueness", config)
    assert code == EXIT_CONFIG


def test_source_nonuniqueness_demo_run(tmp_path):
    code, out = _run(tmp_path, "demo-source-nonuniqueness")
    assert code == EXIT_OK
    states = pd.read_csv(out / "source_states.csv", comment="#")
    assert {"c1_zero", "c1_eigen", "T", "sigma"} <= set(states.columns)
    assert len(states) == 81
    study = json.loads((out / "source_study.json").read_text())
    assert study["n_values"] == [9, 17]
    assert study["residual_zero"] == [0.0, 0.0]


def test_invalid_yaml_is_config_error(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("grid: [1, 2\nmodel: {", encoding="utf-8")
    code, _ = _run(tmp_path, "forward", str(path))
    assert code == EXIT_CONFIG


def test_unknown_field_is_config_error(tmp_path):
    data = dict(SMALL_CONFIG, solver={"linear_tolerance": 1e-8})
    code, _ = _run(tmp_path, "forward", _write_config(tmp_path, data))
    assert code == EXIT_CONFIG


def test_missing_config_file_is_config_error(tmp_path):
    code, _ = _run(tmp_path, "forward", str(tmp_path / "absent.yaml"))
    assert code == EXIT_CONFIG


def test_usage_errors(tmp_path, capsys):
    config = _write_config(tmp_path)
    assert main(["invert-everything", "--config", config]) == EXIT_USAGE
    assert main(["forward"]) == EXIT_USAGE
    assert main(["forward", "--config", config, "--threads", "0"]) == EXIT_USAGE
    assert main(["forward", "--config", config, "--tol", "-1"]) == EXIT_USAGE
    assert "usage: electrolyser" in capsys.readouterr().err


def test_numerical_failure_exit_code(tmp_path):
    data = dict(SMALL_CONFIG, grid={"dim": 2, "n": [9, 9], "extent": [[0.0, 2.0], [0.0, 1.0]]})
    code, _ = _run(tmp_path, "demo-source-nonuniqueness", _write_config(tmp_path, data))
    assert code == EXIT_NUMERICAL


def test_tol_override_reaches_solver_config(tmp_path):
    code, out = _run(tmp_path, "convergence", None, "--tol", "1e-9")
    assert code == EXIT_OK
    effective = yaml.safe_load((out / "effective_config.yaml").read_text())
    assert effective["solver"]["linear_tol"] == pytest.approx(1e-9)


# ===== Config loading =====

def test_load_run_config_reports_yaml_position(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("grid:\n  n: [9, 9\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="line"):
        load_run_config(str(path))


def test_load_run_config_reports_field_path(tmp_path):
    data = dict(SMALL_CONFIG, model={"species": 0})
    with pytest.raises(ConfigError, match="model.species"):
        load_run_config(_write_config(tmp_path, data))


def test_load_run_config_rejects_non_mapping(tmp_path):
    path = tmp_path / "list.yaml"
    path.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        load_run_config(str(path))


def test_example_config_is_valid():
    config = load_run_config(str(Path(__file__).parent / "configs" / "example.yaml"))
    assert config.model.species == 2
    assert len(config.experiment.reconstruction.reference_z) == 3


# ===== Workflow helpers =====

def test_unknown_subcommand_in_service(tmp_path):
    config = load_run_config(_write_config(tmp_path)).model_copy(update={"output_dir": str(tmp_path / "svc")})
    with pytest.raises(ConfigError):
        WorkflowService(config, max_workers=1).run("nope")


def test_linearisation_needs_one_direction_per_species(tmp_path):
    data = json.loads(json.dumps(SMALL_CONFIG))
    data["experiment"]["linearisation"] = {"mu": [1.0], "directions": ["x1", "x2"]}
    code, _ = _run(tmp_path, "verify-linearisation", _write_config(tmp_path, data))
    assert code == EXIT_CONFIG


# ===== Storage =====

def test_storage_round_trip(tmp_path):
    storage = RunStorage(str(tmp_path / "artifacts"), seed=9)
    frame = pd.DataFrame({"a": [0.1, 1.0 / 3.0], "b": [1, 2]})
    storage.write_csv("table.csv", frame)
    back = storage.read_csv("table.csv")
    assert back["a"].tolist() == frame["a"].tolist()
    assert storage.written == ["table.csv"]
    storage.write_json("state_0/report.json", {"converged": True})
    assert json.loads((tmp_path / "artifacts" / "state_0" / "report.json").read_text()) == {"converged": True}
    with pytest.raises(StorageError):
        storage.read_csv("missing.csv")
