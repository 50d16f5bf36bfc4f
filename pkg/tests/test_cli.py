"""Config validation, experiment runs, and output layout of the CLI."""

import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from spinxfer import cli


@pytest.fixture()
def runner():
    return CliRunner()


def _write(tmp_path: Path, name: str, cfg: dict) -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def _pst_config() -> dict:
    return {
        "kind": "pst-run",
        "chain": {"type": "line", "n_sites": 5, "f_j_mhz": 9.0},
        "engine": "static",
        "n_frames": 11,
        "seed": 0,
    }


def _run_dir(result) -> Path:
    # first stdout line is "<kind> -> <out_dir>"
    return Path(result.output.splitlines()[0].split(" -> ")[1])


# ---------------------------------------------------------------------------
# list and validate


def test_list_names_all_kinds_alphabetized(runner):
    result = runner.invoke(cli.main, ["list"])
    assert result.exit_code == 0
    kinds = [line.split()[0] for line in result.output.splitlines() if line.strip()]
    assert kinds == sorted(kinds)
    assert len(kinds) == 9
    assert "pst-run" in kinds and "calibrate" in kinds


def test_validate_accepts_good_config(runner, tmp_path):
    path = _write(tmp_path, "good.json", _pst_config())
    result = runner.invoke(cli.main, ["validate", str(path)])
    assert result.exit_code == 0
    payload = json.loads(result.output)
    assert payload["valid"] is True
    assert payload["kind"] == "pst-run"
    assert len(payload["config_hash"]) == 12


def test_validate_rejects_malformed_json(runner, tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    result = runner.invoke(cli.main, ["validate", str(path)])
    assert result.exit_code == cli.EXIT_CONFIG
    err = json.loads(result.stderr)
    assert err["error"] == "config"


def test_validate_rejects_unknown_kind(runner, tmp_path):
    path = _write(tmp_path, "odd.json", {"kind": "teleport"})
    result = runner.invoke(cli.main, ["validate", str(path)])
    assert result.exit_code == cli.EXIT_CONFIG
    assert "unknown kind" in json.loads(result.stderr)["message"]


def test_validate_rejects_schema_violations(runner, tmp_path):
    cfg = _pst_config()
    cfg["chain"]["n_sites"] = 1
    path = _write(tmp_path, "small.json", cfg)
    result = runner.invoke(cli.main, ["validate", str(path)])
    assert result.exit_code == cli.EXIT_CONFIG

    cfg = _pst_config()
    cfg["extra_field"] = 1
    path = _write(tmp_path, "extra.json", cfg)
    result = runner.invoke(cli.main, ["validate", str(path)])
    assert result.exit_code == cli.EXIT_CONFIG


def test_dissipative_run_requires_pulsed_engine(runner, tmp_path):
    cfg = _pst_config()
    cfg["channels"] = {"t1_us": 16.0}
    path = _write(tmp_path, "static_channels.json", cfg)
    result = runner.invoke(cli.main, ["validate", str(path)])
    assert result.exit_code == cli.EXIT_CONFIG
    cfg["engine"] = "pulsed"
    path = _write(tmp_path, "pulsed_channels.json", cfg)
    result = runner.invoke(cli.main, ["validate", str(path)])
    assert result.exit_code == 0


def test_missing_config_file_is_io_error(runner, tmp_path):
    result = runner.invoke(cli.main, ["validate", str(tmp_path / "absent.json")])
    assert result.exit_code == cli.EXIT_IO
    assert json.loads(result.stderr)["error"] == "io"


# ---------------------------------------------------------------------------
# run


def test_run_writes_outputs_and_manifest(runner, tmp_path):
    path = _write(tmp_path, "pst.json", _pst_config())
    result = runner.invoke(cli.main, ["run", str(path), "--out", str(tmp_path / "runs")])
    assert result.exit_code == 0, result.output
    out_dir = _run_dir(result)
    assert out_dir.name.startswith("pst-run-")
    manifest = json.loads((out_dir / "manifest.json").read_text())
    for key in (
        "kind",
        "config_hash",
        "library_version",
        "backend",
        "seed",
        "threads",
        "created_utc",
        "completed_utc",
        "effective_config",
        "outputs",
    ):
        assert key in manifest
    assert manifest["kind"] == "pst-run"
    for name in manifest["outputs"]:
        assert (out_dir / name).is_file()
    assert "manifest.json" not in manifest["outputs"]
    assert (out_dir / "trajectory.csv").is_file()
    report = json.loads((out_dir / "report.json").read_text())
    assert report["transfer_probability"] == pytest.approx(1.0, abs=1e-6)


def test_rerun_is_byte_identical(runner, tmp_path):
    path = _write(tmp_path, "pst.json", _pst_config())
    out = str(tmp_path / "runs")
    first = runner.invoke(cli.main, ["run", str(path), "--out", out])
    assert first.exit_code == 0
    body1 = (_run_dir(first) / "trajectory.csv").read_bytes()
    second = runner.invoke(cli.main, ["run", str(path), "--out", out])
    assert second.exit_code == 0
    assert _run_dir(second) == _run_dir(first)
    assert (_run_dir(second) / "trajectory.csv").read_bytes() == body1


def test_seed_override_lands_in_new_directory(runner, tmp_path):
    cfg = {
        "kind": "noise-sweep",
        "n_sites": 3,
        "f_j_mhz": 9.0,
        "m": 0,
        "target": "couplings",
        "sigma_grid_mhz": [0.0, 10.0],
        "n_samples": 2,
        "seed": 0,
    }
    path = _write(tmp_path, "sweep.json", cfg)
    out = str(tmp_path / "runs")
    base = runner.invoke(cli.main, ["run", str(path), "--out", out])
    assert base.exit_code == 0, base.output
    other = runner.invoke(cli.main, ["run", str(path), "--out", out, "--seed", "5"])
    assert other.exit_code == 0
    assert _run_dir(other) != _run_dir(base)
    manifest = json.loads((_run_dir(other) / "manifest.json").read_text())
    assert manifest["seed"] == 5
    assert manifest["effective_config"]["seed"] == 5


def test_solution_space_outputs(runner, tmp_path):
    cfg = {
        "kind": "solution-space",
        "tau_ns": 60.0,
        "delta_grid_mhz": {"start": -5.0, "stop": 5.0, "step": 1.0},
        "coupling_grid_mhz": {"start": 4.0, "stop": 8.0, "step": 0.5},
        "threshold": 0.95,
    }
    path = _write(tmp_path, "space.json", cfg)
    result = runner.invoke(cli.main, ["run", str(path), "--out", str(tmp_path / "runs")])
    assert result.exit_code == 0, result.output
    out_dir = _run_dir(result)
    map_lines = (out_dir / "map.csv").read_text().splitlines()
    assert map_lines[0] == "delta_mhz,coupling_mhz,p3"
    assert len(map_lines) == 1 + 11 * 9
    report = json.loads((out_dir / "report.json").read_text())
    assert report["n_spots"] >= 1
    # the fundamental three-site working point sits near zero detuning
    best = max(report["spots"], key=lambda s: s["p3"])
    assert abs(best["delta_mhz"]) < 0.5


def test_numerical_failure_exits_3(runner, tmp_path):
    cfg = {
        "kind": "pst-run",
        "chain": {
            "type": "custom",
            "frequencies_mhz": [0.0, 0.0, 0.0],
            "couplings_mhz": [9.0, 9.0, 9.0],
        },
    }
    path = _write(tmp_path, "mismatch.json", cfg)
    result = runner.invoke(cli.main, ["run", str(path), "--out", str(tmp_path / "runs")])
    assert result.exit_code == cli.EXIT_NUMERICAL
    assert json.loads(result.stderr)["error"] == "numerical"


def test_schema_failure_leaves_no_outputs(runner, tmp_path):
    cfg = _pst_config()
    cfg["tau_ns"] = -1.0
    path = _write(tmp_path, "bad_tau.json", cfg)
    out_base = tmp_path / "runs"
    result = runner.invoke(cli.main, ["run", str(path), "--out", str(out_base)])
    assert result.exit_code == cli.EXIT_CONFIG
    assert not out_base.exists()


def test_run_reports_are_pure_functions_of_config(runner, tmp_path):
    # two manifests of one config differ only in wall-clock fields
    path = _write(tmp_path, "pst.json", _pst_config())
    out = str(tmp_path / "runs")
    first = runner.invoke(cli.main, ["run", str(path), "--out", out])
    m1 = json.loads((_run_dir(first) / "manifest.json").read_text())
    second = runner.invoke(cli.main, ["run", str(path), "--out", out])
    m2 = json.loads((_run_dir(second) / "manifest.json").read_text())
    for volatile in ("created_utc", "completed_utc"):
        m1.pop(volatile), m2.pop(volatile)
    assert m1 == m2
