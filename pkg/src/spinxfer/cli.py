"""Config-driven command line runner.

Every experiment is a JSON document with a `kind` field; `spinxfer run`
validates it against the kind's schema, executes it, and writes the
outputs into a content-addressed directory `<base>/<kind>-<hash12>`
derived from the effective config, so reruns of the same config land in
the same place and identical seeds reproduce identical CSV bodies.
Wall-clock timestamps live only in `manifest.json`; every other output
is a pure function of the effective config.

Exit codes: 2 for config problems (malformed JSON, schema violations),
3 for numerical or physical failures inside the library, 4 for I/O
failures. Errors are written to stderr as one JSON object.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, NoReturn

import click
import numpy as np
from jsonschema import Draft202012Validator

from . import __version__, chains, dynamics, metrics, noise, serialize, spectral, units
from . import calibration as cal
from ._kernels import active_backend
from .errors import ConfigError, SpinxferError

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

DEFAULT_N_FRAMES = 201
DEFAULT_F_J_SPECTRUM = 9.0

_CATALOG: dict[str, str] = {
    "build": "Construct a chain or grid and write its parameters and excitation spectrum.",
    "calibrate": "Run two-stage secant calibration of a synthetic device against chain targets.",
    "fst-run": "Split a single excitation between chain ends and score the entangled pair.",
    "lattice-fst": "Spread a corner excitation to all grid corners and score the four-site state.",
    "noise-sweep": "Monte Carlo transfer degradation under quasi-static parameter scatter.",
    "optimize": "Recover balanced transfer from a perturbed start with derivative-free search.",
    "pst-run": "Transfer a single excitation end to end and record site populations.",
    "solution-space": "Map three-site transfer population over a detuning/coupling grid.",
    "spectrum-check": "Verify chain spectra against the target family and round-trip the inverse problem.",
}


# ---------------------------------------------------------------------------
# schemas

_POS = {"type": "number", "exclusiveMinimum": 0}
_NUM = {"type": "number"}
_SEED = {"type": "integer", "minimum": 0}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_N_ODD = {"type": "integer", "minimum": 3, "not": {"multipleOf": 2}}

_GRID = {
    "oneOf": [
        {"type": "array", "items": _NUM, "minItems": 1},
        {
            "type": "object",
            "properties": {"start": _NUM, "stop": _NUM, "step": _POS},
            "required": ["start", "stop", "step"],
            "additionalProperties": False,
        },
    ]
}

_CHANNELS = {
    "type": "object",
    "properties": {"t1_us": _POS, "t2_us": _POS, "t_phi_us": _POS},
    "not": {"required": ["t2_us", "t_phi_us"]},
    "minProperties": 1,
    "additionalProperties": False,
}

_DEVICE = {
    "type": "object",
    "properties": {
        "n_qubits": {"type": "integer", "minimum": 2},
        "seed": _SEED,
        "zpa_range": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        "crosstalk_nn": {"type": "number", "minimum": 0},
        "crosstalk_next": {"type": "number", "minimum": 0},
        "measurement_noise_mhz": {"type": "number", "minimum": 0},
        "coefficient_spread": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}

_METHOD = {"enum": [cal.METHOD_NM, cal.METHOD_DE]}


def _chain_schema() -> dict:
    n_any = {"type": "integer", "minimum": 2}
    return {
        "oneOf": [
            {
                "type": "object",
                "properties": {"type": {"const": "line"}, "n_sites": n_any, "f_j_mhz": _POS},
                "required": ["type", "n_sites", "f_j_mhz"],
                "additionalProperties": False,
            },
            {
                "type": "object",
                "properties": {
                    "type": {"const": "zigzag"},
                    "n_sites": _N_ODD,
                    "m": _NONNEG_INT,
                    "f_j_mhz": _POS,
                },
                "required": ["type", "n_sites", "m", "f_j_mhz"],
                "additionalProperties": False,
            },
            {
                # n_sites is the parent zig-zag size; the chain built has
                # (n_sites + 1) / 2 sites
                "type": "object",
                "properties": {
                    "type": {"const": "effective-limit"},
                    "n_sites": _N_ODD,
                    "f_j_mhz": _POS,
                },
                "required": ["type", "n_sites", "f_j_mhz"],
                "additionalProperties": False,
            },
            {
                "type": "object",
                "properties": {
                    "type": {"const": "custom"},
                    "frequencies_mhz": {"type": "array", "items": _NUM, "minItems": 2},
                    "couplings_mhz": {"type": "array", "items": _NUM, "minItems": 1},
                },
                "required": ["type", "frequencies_mhz", "couplings_mhz"],
                "additionalProperties": False,
            },
        ]
    }


_CHAIN = _chain_schema()

_PULSED_GUARD = {
    "if": {"required": ["channels"]},
    "then": {"required": ["engine"], "properties": {"engine": {"const": "pulsed"}}},
}

_SCHEMAS: dict[str, dict] = {
    "build": {
        "type": "object",
        "properties": {
            "kind": {"const": "build"},
            "chain": _CHAIN,
            "theta_rad": _NUM,
            "seed": _SEED,
        },
        "required": ["kind", "chain"],
        "additionalProperties": False,
    },
    "spectrum-check": {
        "type": "object",
        "properties": {
            "kind": {"const": "spectrum-check"},
            "n_sites": {"oneOf": [_N_ODD, {"type": "array", "items": _N_ODD, "minItems": 1}]},
            "m": _NONNEG_INT,
            "m_values": {"type": "array", "items": _NONNEG_INT, "minItems": 1},
            "f_j_mhz": _POS,
            "tolerance_rel": _POS,
            "round_trip_tol": _POS,
            "seed": _SEED,
        },
        "oneOf": [{"required": ["m"]}, {"required": ["m_values"]}],
        "required": ["kind", "n_sites"],
        "additionalProperties": False,
    },
    "pst-run": {
        "type": "object",
        "properties": {
            "kind": {"const": "pst-run"},
            "chain": _CHAIN,
            "engine": {"enum": ["static", "pulsed"]},
            "channels": _CHANNELS,
            "tau_ns": _POS,
            "n_frames": {"type": "integer", "minimum": 2},
            "dt_ns": _POS,
            "seed": _SEED,
        },
        "required": ["kind", "chain"],
        "additionalProperties": False,
        "allOf": [_PULSED_GUARD],
    },
    "fst-run": {
        "type": "object",
        "properties": {
            "kind": {"const": "fst-run"},
            "chain": _CHAIN,
            "theta_rad": _NUM,
            "engine": {"enum": ["static", "pulsed"]},
            "channels": _CHANNELS,
            "tau_ns": _POS,
            "n_frames": {"type": "integer", "minimum": 2},
            "dt_ns": _POS,
            "check_revival": {"type": "boolean"},
            "seed": _SEED,
        },
        "required": ["kind", "chain", "theta_rad"],
        "additionalProperties": False,
        "allOf": [_PULSED_GUARD],
    },
    "solution-space": {
        "type": "object",
        "properties": {
            "kind": {"const": "solution-space"},
            "tau_ns": _POS,
            "delta_grid_mhz": _GRID,
            "coupling_grid_mhz": _GRID,
            "threshold": {"type": "number", "minimum": 0, "maximum": 1},
            "refine": {"type": "boolean"},
            "seed": _SEED,
        },
        "required": ["kind", "tau_ns", "delta_grid_mhz", "coupling_grid_mhz"],
        "additionalProperties": False,
    },
    "noise-sweep": {
        "type": "object",
        "properties": {
            "kind": {"const": "noise-sweep"},
            "n_sites": _N_ODD,
            "f_j_mhz": _POS,
            "m": _NONNEG_INT,
            "m_values": {"type": "array", "items": _NONNEG_INT, "minItems": 1},
            "theta_rad": _NUM,
            "target": {"enum": [noise.TARGET_OMEGA_EVEN, noise.TARGET_OMEGA_ODD, noise.TARGET_COUPLINGS]},
            "sigma_grid_mhz": _GRID,
            "n_samples": {"type": "integer", "minimum": 2},
            "metric": {"enum": [noise.METRIC_BELL, noise.METRIC_POPULATION]},
            "channels": _CHANNELS,
            "tau_ns": _POS,
            "dt_ns": _POS,
            "seed": _SEED,
        },
        "oneOf": [{"required": ["m"]}, {"required": ["m_values"]}],
        "required": ["kind", "n_sites", "f_j_mhz", "target", "sigma_grid_mhz", "n_samples"],
        "additionalProperties": False,
    },
    "lattice-fst": {
        "type": "object",
        "properties": {
            "kind": {"const": "lattice-fst"},
            "rows": {"type": "integer", "minimum": 2},
            "cols": {"type": "integer", "minimum": 2},
            "m": _NONNEG_INT,
            "m_values": {"type": "array", "items": _NONNEG_INT, "minItems": 1},
            "f_j_mhz": _POS,
            "theta_rad": _NUM,
            "channels": _CHANNELS,
            "tau_ns": _POS,
            "dt_ns": _POS,
            "seed": _SEED,
        },
        "oneOf": [{"required": ["m"]}, {"required": ["m_values"]}],
        "required": ["kind", "rows", "cols", "f_j_mhz", "theta_rad"],
        "additionalProperties": False,
    },
    "calibrate": {
        "type": "object",
        "properties": {
            "kind": {"const": "calibrate"},
            "device": _DEVICE,
            "targets": _CHAIN,
            "theta_rad": _NUM,
            "scheme": {"enum": [cal.SCHEME_STAGGERED, cal.SCHEME_EXTREME, "both"]},
            "qubit_offset": _NONNEG_INT,
            "settings": {
                "type": "object",
                "properties": {
                    "coupling_threshold_mhz": _POS,
                    "frequency_threshold_mhz": _POS,
                    "max_outer_iterations": {"type": "integer", "minimum": 1},
                    "max_inner_iterations": {"type": "integer", "minimum": 1},
                    "unit_radius": {"enum": [1, 1.5, 2]},
                    "parallel_distance": _POS,
                    "perturb_step": _POS,
                    "env_offset": _NUM,
                    "env_park": _NUM,
                },
                "additionalProperties": False,
            },
            "seed": _SEED,
        },
        "required": ["kind", "targets"],
        "additionalProperties": False,
    },
    "optimize": {
        "type": "object",
        "properties": {
            "kind": {"const": "optimize"},
            "device": _DEVICE,
            "problem": {
                "type": "object",
                "properties": {"chain": _CHAIN, "theta_rad": _NUM},
                "required": ["chain"],
                "additionalProperties": False,
            },
            "methods": {
                "oneOf": [
                    _METHOD,
                    {"type": "array", "items": _METHOD, "minItems": 1, "uniqueItems": True},
                ]
            },
            "budget": {
                "oneOf": [
                    {"type": "integer", "minimum": 1},
                    {
                        "type": "object",
                        "properties": {
                            cal.METHOD_NM: {"type": "integer", "minimum": 1},
                            cal.METHOD_DE: {"type": "integer", "minimum": 1},
                        },
                        "additionalProperties": False,
                        "minProperties": 1,
                    },
                ]
            },
            "perturb_mhz": {"type": "number", "minimum": 0},
            "cost": {
                "type": "object",
                "properties": {"n_points": {"type": "integer", "minimum": 1}, "tau_ns": _POS},
                "additionalProperties": False,
            },
            "bounds_mhz": _POS,
            "step_mhz": _POS,
            "qubit_offset": _NONNEG_INT,
            "seed": _SEED,
        },
        "required": ["kind", "problem"],
        "additionalProperties": False,
    },
}

_VALIDATORS = {kind: Draft202012Validator(schema) for kind, schema in _SCHEMAS.items()}


# ---------------------------------------------------------------------------
# config plumbing


def _fail(code: int, category: str, message: str) -> NoReturn:
    sys.stderr.write(serialize.json_text({"error": category, "message": message}) + "\n")
    raise SystemExit(code)


def config_hash(effective: dict) -> str:
    """First 12 hex digits of the sha256 of the canonical effective config."""
    canon = json.dumps(effective, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


def validate_config(cfg: object, seed_override: int | None = None) -> dict:
    """Schema-check a config document and fold in CLI overrides.

    Returns the effective config (a copy). Raises ConfigError on any
    structural problem, including an unknown `kind`.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    kind = cfg.get("kind")
    if kind not in _SCHEMAS:
        known = ", ".join(sorted(_SCHEMAS))
        raise ConfigError(f"unknown kind {kind!r}; expected one of: {known}")
    effective = dict(cfg)
    if seed_override is not None:
        if seed_override < 0:
            raise ConfigError("seed must be nonnegative")
        effective["seed"] = int(seed_override)
    errors = sorted(_VALIDATORS[kind].iter_errors(effective), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "(top level)"
        raise ConfigError(f"config failed schema check at {where}: {err.message}")
    return effective


def _grid_values(grid) -> np.ndarray:
    if isinstance(grid, dict):
        start, stop, step = grid["start"], grid["stop"], grid["step"]
        if stop < start:
            raise ConfigError("grid stop must be >= start")
        # inclusive stop, robust to float accumulation
        return np.arange(start, stop + 0.5 * step, step, dtype=float)
    return np.asarray(grid, dtype=float)


def _chain_from_config(block: dict) -> chains.ChainSpec:
    kind = block["type"]
    if kind == "line":
        return chains.build_line(block["n_sites"], block["f_j_mhz"])
    if kind == "zigzag":
        return chains.build_zigzag(block["n_sites"], block["m"], block["f_j_mhz"])
    if kind == "effective-limit":
        return chains.build_effective_limit(block["n_sites"], block["f_j_mhz"])
    return chains.as_custom(block["frequencies_mhz"], block["couplings_mhz"])


def _channels_from_config(block: dict | None) -> dynamics.NoiseChannelSet | None:
    if block is None:
        return None
    return dynamics.NoiseChannelSet(
        t1_us=block.get("t1_us"), t2_us=block.get("t2_us"), t_phi_us=block.get("t_phi_us")
    )


def _m_list(cfg: dict) -> list[int]:
    return [cfg["m"]] if "m" in cfg else [int(v) for v in cfg["m_values"]]


def _nominal_tau(cfg: dict, spec: chains.ChainSpec) -> float:
    tau = cfg.get("tau_ns")
    if tau is not None:
        return float(tau)
    f_j = spec.meta.f_j_mhz
    if f_j is None:
        raise SpinxferError("chain has no nominal coupling scale; give tau_ns explicitly")
    return units.transfer_time_ns(f_j)


def _static_trajectory(
    spec: chains.ChainSpec, psi0: dynamics.QuantumState, times: np.ndarray
) -> dynamics.Trajectory:
    """Exact evolution under the static realized Hamiltonian at given times."""
    h = chains.realize(spec, psi0.basis)
    w, v = np.linalg.eigh(h.matrix)
    c0 = v.conj().T @ psi0.data
    phases = np.exp(-1j * np.outer(times, w))
    psis = (phases * c0[None, :]) @ v.T
    return dynamics.Trajectory(np.asarray(times, dtype=float), psi0.basis, spec.n_sites, _psis=psis)


# ---------------------------------------------------------------------------
# runners


def _run_build(cfg: dict, out_dir: Path, threads: int) -> dict:
    spec = _chain_from_config(cfg["chain"])
    if "theta_rad" in cfg:
        spec = chains.apply_fst_deformation(spec, cfg["theta_rad"])
    h = chains.realize(spec)
    lam = np.linalg.eigvalsh(chains.excitation_block(h))
    serialize.write_json(out_dir / "chain.json", chains.to_json_dict(spec))
    f_j = spec.meta.f_j_mhz
    if f_j is not None:
        header = ["index", "eigenvalue_mhz", "eigenvalue_over_j"]
        rows = [[i, units.ang_to_mhz(v), units.ang_to_mhz(v) / f_j] for i, v in enumerate(lam)]
    else:
        header = ["index", "eigenvalue_mhz"]
        rows = [[i, units.ang_to_mhz(v)] for i, v in enumerate(lam)]
    serialize.write_text(out_dir / "eigenvalues.csv", serialize.table_csv(header, rows))
    return {}


def _run_spectrum_check(cfg: dict, out_dir: Path, threads: int) -> dict:
    n_list = cfg["n_sites"] if isinstance(cfg["n_sites"], list) else [cfg["n_sites"]]
    tol = cfg.get("tolerance_rel", 1e-8)
    rt_tol = cfg.get("round_trip_tol", 1e-7)
    f_j = cfg.get("f_j_mhz", DEFAULT_F_J_SPECTRUM)
    j_ang = units.mhz_to_ang(f_j)
    rows: list[list] = []
    worst_spec, worst_rt = 0.0, 0.0
    for n in n_list:
        for m in _m_list(cfg):
            target = spectral.target_spectrum(n, m)
            spec = chains.build_zigzag(n, m, f_j)
            lam = np.linalg.eigvalsh(chains.excitation_block(chains.realize(spec)))
            rel = float(np.max(np.abs(lam / j_ang - target.values)) / np.max(np.abs(target.values)))
            rec = spectral.reconstruct_tridiagonal(target, f_j)
            rt = float(
                max(
                    np.max(np.abs(rec.frequencies - spec.frequencies)),
                    np.max(np.abs(rec.couplings - spec.couplings)),
                )
                / j_ang
            )
            worst_spec = max(worst_spec, rel)
            worst_rt = max(worst_rt, rt)
            rows.append([n, m, rel, rt, rel <= tol and rt <= rt_tol])
    serialize.write_text(
        out_dir / "spectrum_check.csv",
        serialize.table_csv(
            ["n_sites", "m", "spectrum_rel_error", "round_trip_rel_error", "pass"], rows
        ),
    )
    ok = worst_spec <= tol and worst_rt <= rt_tol
    serialize.write_json(
        out_dir / "report.json",
        {
            "pass": ok,
            "cases": len(rows),
            "worst_spectrum_rel_error": worst_spec,
            "worst_round_trip_rel_error": worst_rt,
            "tolerance_rel": tol,
            "round_trip_tol": rt_tol,
            "f_j_mhz": f_j,
        },
    )
    return {}


def _pulsed_trajectory(
    cfg: dict, spec, psi0: dynamics.QuantumState, tau_ns: float
) -> dynamics.Trajectory:
    schedule = dynamics.transfer_schedule(spec, tau_ns, dt_ns=cfg.get("dt_ns", dynamics.DT_NS))
    channels = _channels_from_config(cfg.get("channels"))
    return dynamics.evolve_lindblad(schedule, spec, psi0, channels)


def _run_pst(cfg: dict, out_dir: Path, threads: int) -> dict:
    spec = _chain_from_config(cfg["chain"])
    n = spec.n_sites
    tau = _nominal_tau(cfg, spec)
    engine = cfg.get("engine", "static")
    psi0 = dynamics.site_state(n, 1)
    if engine == "static":
        times = np.linspace(0.0, tau, cfg.get("n_frames", DEFAULT_N_FRAMES))
        traj = _static_trajectory(spec, psi0, times)
    else:
        traj = _pulsed_trajectory(cfg, spec, psi0, tau)
    pops = traj.populations()
    report: dict = {
        "engine": engine,
        "tau_ns": tau,
        "final_populations": [float(p) for p in pops[-1]],
        "transfer_probability": float(pops[-1, n - 1]),
        "final_trace": float(traj.trace()[-1]),
    }
    # cross-check against the closed form when the chain is the symmetric
    # detuned three-site system
    if engine == "static" and n == 3:
        f, c = spec.frequencies_mhz, spec.couplings_mhz
        if abs(f[0] - f[2]) < 1e-9 and abs(c[0] - c[1]) < 1e-9:
            _, _, p3 = dynamics.analytic_three_site(f[1] - f[0], c[0], traj.times_ns)
            report["analytic_max_residual"] = float(np.max(np.abs(pops[:, 2] - p3)))
    serialize.write_text(out_dir / "trajectory.csv", serialize.trajectory_csv(traj))
    serialize.write_json(out_dir / "report.json", report)
    return {}


def _run_fst(cfg: dict, out_dir: Path, threads: int) -> dict:
    spec0 = _chain_from_config(cfg["chain"])
    theta = float(cfg["theta_rad"])
    spec = chains.apply_fst_deformation(spec0, theta)
    n = spec.n_sites
    tau = _nominal_tau(cfg, spec0)
    engine = cfg.get("engine", "static")
    check_revival = cfg.get("check_revival", engine == "static")
    psi0 = dynamics.site_state(n, 1)

    revival_deviation: float | None = None
    if engine == "static":
        frames = cfg.get("n_frames", DEFAULT_N_FRAMES)
        times = np.linspace(0.0, 2.0 * tau, 2 * (frames - 1) + 1)
        traj = _static_trajectory(spec, psi0, times)
        at_tau = traj.state(frames - 1)
        if check_revival:
            revival_deviation = 1.0 - metrics.state_fidelity(traj.final_state, psi0)
    else:
        traj = _pulsed_trajectory(cfg, spec, psi0, tau)
        at_tau = traj.final_state
        if check_revival:
            traj2 = _pulsed_trajectory(cfg, spec, psi0, 2.0 * tau)
            revival_deviation = 1.0 - metrics.state_fidelity(traj2.final_state, psi0)

    bell = metrics.bell_fidelity(at_tau, (1, n))
    pops_tau = metrics.populations(at_tau)
    report: dict = {
        "engine": engine,
        "tau_ns": tau,
        "theta_rad": theta,
        "bell": bell.to_json_dict(),
        "populations_at_tau": [float(p) for p in pops_tau],
        "end_populations": [float(pops_tau[0]), float(pops_tau[n - 1])],
    }
    if revival_deviation is not None:
        report["revival_deviation"] = float(revival_deviation)
    serialize.write_text(out_dir / "trajectory.csv", serialize.trajectory_csv(traj))
    serialize.write_json(out_dir / "report.json", report)
    return {}


def _run_solution_space(cfg: dict, out_dir: Path, threads: int) -> dict:
    tau = float(cfg["tau_ns"])
    deltas = _grid_values(cfg["delta_grid_mhz"])
    coups = _grid_values(cfg["coupling_grid_mhz"])
    smap = dynamics.sweep_solution_space(tau, deltas, coups)
    spots = dynamics.find_bright_spots(
        smap, threshold=cfg.get("threshold", 0.99), refine=cfg.get("refine", True)
    )
    rows = [
        [d, c, smap.p3[i, j]]
        for i, d in enumerate(smap.delta_mhz)
        for j, c in enumerate(smap.coupling_mhz)
    ]
    serialize.write_text(
        out_dir / "map.csv", serialize.table_csv(["delta_mhz", "coupling_mhz", "p3"], rows)
    )
    serialize.write_text(
        out_dir / "bright_spots.csv",
        serialize.table_csv(
            ["delta_mhz", "coupling_mhz", "p3"],
            [[s.delta_mhz, s.coupling_mhz, s.p3] for s in spots],
        ),
    )
    serialize.write_json(
        out_dir / "report.json",
        {
            "tau_ns": tau,
            "threshold": cfg.get("threshold", 0.99),
            "n_spots": len(spots),
            "spots": [
                {"delta_mhz": s.delta_mhz, "coupling_mhz": s.coupling_mhz, "p3": s.p3}
                for s in spots
            ],
        },
    )
    return {}


def _run_noise_sweep(cfg: dict, out_dir: Path, threads: int) -> dict:
    sigmas = _grid_values(cfg["sigma_grid_mhz"])
    models = [noise.NoiseModel(cfg["target"], float(s)) for s in sigmas]
    channels = _channels_from_config(cfg.get("channels"))
    metric = cfg.get("metric", noise.METRIC_BELL)
    seed = cfg.get("seed", 0)
    curves: dict[str, dict] = {}
    for m in _m_list(cfg):
        spec = chains.build_zigzag(cfg["n_sites"], m, cfg["f_j_mhz"])
        curve = noise.degradation_sweep(
            spec,
            cfg.get("theta_rad"),
            models,
            channels,
            cfg["n_samples"],
            seed,
            metric=metric,
            tau_ns=cfg.get("tau_ns"),
            dt_ns=cfg.get("dt_ns"),
            n_jobs=threads,
        )
        serialize.write_text(out_dir / f"curve_m{m}.csv", serialize.curve_csv(curve))
        curves[str(m)] = {
            "sigma_grid_mhz": [float(s) for s in curve.sigma_grid_mhz],
            "mean_ratio": [float(r) for r in curve.mean_ratio],
            "std": [float(s) for s in curve.std],
            "sem": [float(s) for s in curve.sem],
            "mean_fidelity": [float(f) for f in curve.mean_fidelity],
            "baseline": float(curve.baseline),
        }
    serialize.write_json(
        out_dir / "report.json",
        {
            "target": cfg["target"],
            "metric": metric,
            "n_samples": cfg["n_samples"],
            "seed": seed,
            "curves": curves,
        },
    )
    return {}


def _lattice_corner_sites(rows: int, cols: int) -> list[int]:
    return [1, cols, (rows - 1) * cols + 1, rows * cols]


def _lattice_even_sites(rows: int, cols: int) -> list[int]:
    """1-based site indices whose row or column index is even."""
    return [
        (r - 1) * cols + c
        for r in range(1, rows + 1)
        for c in range(1, cols + 1)
        if r % 2 == 0 or c % 2 == 0
    ]


def _run_lattice(cfg: dict, out_dir: Path, threads: int) -> dict:
    rows_, cols_ = cfg["rows"], cfg["cols"]
    theta = float(cfg["theta_rad"])
    channels = _channels_from_config(cfg.get("channels"))
    corners = _lattice_corner_sites(rows_, cols_)
    even_idx = [s - 1 for s in _lattice_even_sites(rows_, cols_)]
    runs: dict[str, dict] = {}
    for m in _m_list(cfg):
        lattice = chains.build_lattice(rows_, cols_, m, cfg["f_j_mhz"], theta)
        tau = cfg.get("tau_ns") or units.transfer_time_ns(cfg["f_j_mhz"])
        schedule = dynamics.transfer_schedule(lattice, tau, dt_ns=cfg.get("dt_ns", dynamics.DT_NS))
        psi0 = dynamics.site_state(lattice.n_sites, 1)
        traj = dynamics.evolve_lindblad(schedule, lattice, psi0, channels)
        pops = traj.populations()
        final = traj.final_state
        w = metrics.w_fidelity(final, tuple(corners))
        even_series = pops[:, even_idx].sum(axis=1)
        peak = int(np.argmax(even_series))
        runs[str(m)] = {
            "tau_ns": float(tau),
            "w": w.to_json_dict(),
            "corner_sites": corners,
            "corner_populations": [float(pops[-1, s - 1]) for s in corners],
            "even_site_peak": float(even_series[peak]),
            "even_site_peak_time_ns": float(traj.times_ns[peak]),
            "final_trace": float(traj.trace()[-1]),
        }
        serialize.write_text(out_dir / f"trajectory_m{m}.csv", serialize.trajectory_csv(traj))
    serialize.write_json(
        out_dir / "report.json",
        {"rows": rows_, "cols": cols_, "theta_rad": theta, "runs": runs},
    )
    return {}


def _device_from_config(block: dict | None, default_qubits: int) -> cal.DeviceModel:
    kwargs = dict(block or {})
    kwargs.setdefault("n_qubits", default_qubits)
    if "zpa_range" in kwargs:
        kwargs["zpa_range"] = tuple(kwargs["zpa_range"])
    return cal.DeviceModel(**kwargs)


def _run_calibrate(cfg: dict, out_dir: Path, threads: int) -> dict:
    targets = _chain_from_config(cfg["targets"])
    if "theta_rad" in cfg:
        targets = chains.apply_fst_deformation(targets, cfg["theta_rad"])
    offset = cfg.get("qubit_offset", 0)
    scheme = cfg.get("scheme", cal.SCHEME_STAGGERED)
    schemes = [cal.SCHEME_STAGGERED, cal.SCHEME_EXTREME] if scheme == "both" else [scheme]
    settings_base = cfg.get("settings", {})
    rows: list[list] = []
    scheme_reports: dict[str, dict] = {}
    all_ok = True
    max_resid = 0.0
    for sch in schemes:
        device = _device_from_config(cfg.get("device"), targets.n_sites + offset)
        settings = cal.CalibrationConfig(env_scheme=sch, **settings_base)
        _, report = cal.calibrate_all(device, targets, settings, qubit_offset=offset)
        scheme_reports[sch] = report.to_json_dict()
        all_ok = all_ok and report.converged
        for rec in report.parameters:
            max_resid = max(max_resid, abs(rec.residual_mhz))
            rows.append(
                [
                    sch,
                    rec.name,
                    rec.element,
                    rec.kind,
                    rec.target_mhz,
                    rec.measured_mhz,
                    rec.residual_mhz,
                    rec.iterations,
                    rec.loops,
                    rec.converged,
                ]
            )
    serialize.write_text(
        out_dir / "residuals.csv",
        serialize.table_csv(
            [
                "scheme",
                "name",
                "element",
                "kind",
                "target_mhz",
                "measured_mhz",
                "residual_mhz",
                "iterations",
                "loops",
                "converged",
            ],
            rows,
        ),
    )
    serialize.write_json(
        out_dir / "report.json",
        {
            "schemes": scheme_reports,
            "all_converged": all_ok,
            "max_abs_residual_mhz": max_resid,
        },
    )
    return {}


def _run_optimize(cfg: dict, out_dir: Path, threads: int) -> dict:
    prob = cfg["problem"]
    spec = _chain_from_config(prob["chain"])
    nominal_f_j = spec.meta.f_j_mhz
    if "theta_rad" in prob:
        spec = chains.apply_fst_deformation(spec, prob["theta_rad"])
    n = spec.n_sites
    offset = cfg.get("qubit_offset", 0)
    device = _device_from_config(cfg.get("device"), n + offset)
    cost_cfg = cfg.get("cost", {})
    tau = cost_cfg.get("tau_ns")
    if tau is None:
        if nominal_f_j is None:
            raise SpinxferError("problem chain has no nominal coupling scale; give cost.tau_ns")
        tau = units.transfer_time_ns(nominal_f_j)
    cost = cal.TransferCost(
        device, cal.CostSpec(float(tau), cost_cfg.get("n_points", 15)), n, qubit_offset=offset
    )

    seed = cfg.get("seed", 0)
    perturb = cfg.get("perturb_mhz", 2.0)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(3,))))
    f_pert = spec.frequencies_mhz.copy()
    f_pert[1:] += rng.uniform(-perturb, perturb, n - 1)
    j_pert = spec.couplings_mhz + rng.uniform(-perturb, perturb, n - 1)
    x0 = cost.zpas_for_parameters(f_pert, j_pert)
    start_cost = float(cost(x0))

    methods = cfg.get("methods", [cal.METHOD_NM, cal.METHOD_DE])
    if isinstance(methods, str):
        methods = [methods]
    budget_cfg = cfg.get("budget", {})
    defaults = {cal.METHOD_NM: 150, cal.METHOD_DE: 300}
    if isinstance(budget_cfg, int):
        budgets = {m: budget_cfg for m in methods}
    else:
        budgets = {m: budget_cfg.get(m, defaults[m]) for m in methods}

    method_reports: dict[str, dict] = {}
    hyper: dict[str, dict] = {}
    for method in methods:
        best_x, trace = cal.optimize(
            cost,
            x0,
            method,
            budgets[method],
            seed=seed,
            bounds_mhz=cfg.get("bounds_mhz", 3.0),
            step_mhz=cfg.get("step_mhz", 0.5),
            n_jobs=threads,
        )
        serialize.write_json(out_dir / f"trace_{method}.json", trace.to_json_dict())
        serialize.write_text(
            out_dir / f"best_costs_{method}.csv",
            serialize.table_csv(
                ["iteration", "best_cost"],
                [[i + 1, float(c)] for i, c in enumerate(trace.best_costs)],
            ),
        )
        pops = cost.end_populations(best_x)
        serialize.write_text(
            out_dir / f"populations_{method}.csv",
            serialize.table_csv(
                ["t_ns", "p_first", "p_last"],
                [
                    [float(t), float(p[0]), float(p[1])]
                    for t, p in zip(cost.cost_spec.sample_times_ns, pops)
                ],
            ),
        )
        method_reports[method] = {
            "best_cost": float(trace.best_cost),
            "n_iterations": trace.n_iterations,
            "n_evaluations": len(trace.evaluations),
            "max_end_population_deviation": float(np.max(np.abs(pops - 0.5))),
            "hyperparameters": trace.hyperparameters,
        }
        hyper[method] = trace.hyperparameters
    serialize.write_json(
        out_dir / "report.json",
        {
            "start_cost": start_cost,
            "perturb_mhz": perturb,
            "seed": seed,
            "tau_ns": float(tau),
            "x0": [float(v) for v in x0],
            "target_parameters_mhz": {
                "frequencies": [float(v) for v in spec.frequencies_mhz],
                "couplings": [float(v) for v in spec.couplings_mhz],
            },
            "methods": method_reports,
        },
    )
    return {"optimizer": hyper}


_RUNNERS: dict[str, Callable[[dict, Path, int], dict]] = {
    "build": _run_build,
    "spectrum-check": _run_spectrum_check,
    "pst-run": _run_pst,
    "fst-run": _run_fst,
    "solution-space": _run_solution_space,
    "noise-sweep": _run_noise_sweep,
    "lattice-fst": _run_lattice,
    "calibrate": _run_calibrate,
    "optimize": _run_optimize,
}


# ---------------------------------------------------------------------------
# commands


def _load_and_validate(config_path: str, seed_override: int | None) -> dict:
    try:
        text = Path(config_path).read_text(encoding="utf-8")
    except OSError as exc:
        _fail(EXIT_IO, "io", f"cannot read config: {exc}")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        _fail(EXIT_CONFIG, "config", f"invalid JSON: {exc}")
    try:
        return validate_config(cfg, seed_override)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, "config", str(exc))


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@click.group()
def main() -> None:
    """Spin-chain transfer experiments driven by JSON configs."""


@main.command("run")
@click.argument("config_path", type=click.Path())
@click.option("--out", "out_base", default="runs", show_default=True, help="Base output directory.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=1, show_default=True, help="Worker threads for sampling/batch evaluation.")
def run_cmd(config_path: str, out_base: str, seed: int | None, threads: int) -> None:
    """Validate CONFIG_PATH, run the experiment, write outputs."""
    effective = _load_and_validate(config_path, seed)
    kind = effective["kind"]
    h = config_hash(effective)
    out_dir = Path(out_base) / f"{kind}-{h}"
    created = _utc_now()
    try:
        if out_dir.exists():
            shutil.rmtree(out_dir)
        out_dir.mkdir(parents=True)
    except OSError as exc:
        _fail(EXIT_IO, "io", f"cannot prepare output directory: {exc}")
    try:
        extras = _RUNNERS[kind](effective, out_dir, max(1, threads))
    except SpinxferError as exc:
        _fail(EXIT_NUMERICAL, "numerical", str(exc))
    except OSError as exc:
        _fail(EXIT_IO, "io", str(exc))
    outputs = sorted(p.name for p in out_dir.iterdir())
    manifest = {
        "kind": kind,
        "config_hash": h,
        "library_version": __version__,
        "backend": active_backend(),
        "seed": effective.get("seed"),
        "threads": max(1, threads),
        "created_utc": created,
        "completed_utc": _utc_now(),
        "effective_config": effective,
        "outputs": outputs,
        **extras,
    }
    try:
        serialize.write_json(out_dir / "manifest.json", manifest)
    except OSError as exc:
        _fail(EXIT_IO, "io", str(exc))
    click.echo(f"{kind} -> {out_dir}")
    for name in [*outputs, "manifest.json"]:
        click.echo(f"  {name}")


@main.command("validate")
@click.argument("config_path", type=click.Path())
def validate_cmd(config_path: str) -> None:
    """Schema-check CONFIG_PATH without running it."""
    effective = _load_and_validate(config_path, None)
    click.echo(
        serialize.json_text(
            {"valid": True, "kind": effective["kind"], "config_hash": config_hash(effective)}
        )
    )


@main.command("list")
def list_cmd() -> None:
    """List the experiment kinds `run` accepts."""
    width = max(len(k) for k in _CATALOG)
    for kind in sorted(_CATALOG):
        click.echo(f"{kind:<{width}}  {_CATALOG[kind]}")


if __name__ == "__main__":
    main()
