"""Quasi-static parameter noise Monte Carlo harness.

Models slow (frozen per shot) Gaussian scatter of one chain parameter
family on top of the always-on relaxation/dephasing channels. Each sample
perturbs the targeted parameters of the (optionally edge-deformed) chain,
rebuilds the pulse schedule for the perturbed parameters at the nominal
transfer time, runs the dissipative engine, and scores one fidelity
metric. Curves report the mean metric normalized by the noise-free
baseline of the same protocol.

Randomness: one Philox generator per (width index, sample index), derived
from the root seed via spawn keys. Results are therefore independent of
execution order and of the number of worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import chains, metrics, units
from .chains import ChainSpec, LatticeSpec
from .dynamics import (
    DT_NS,
    KEEP_FINAL,
    NoiseChannelSet,
    QuantumState,
    Schedule,
    evolve_lindblad,
    site_state,
    transfer_schedule,
)
from .errors import SpecError

TARGET_OMEGA_EVEN = "omega_even"
TARGET_OMEGA_ODD = "omega_odd"
TARGET_COUPLINGS = "couplings"
_TARGETS = (TARGET_OMEGA_EVEN, TARGET_OMEGA_ODD, TARGET_COUPLINGS)

METRIC_BELL = "bell"
METRIC_POPULATION = "population"
_METRICS = (METRIC_BELL, METRIC_POPULATION)


@dataclass(frozen=True)
class NoiseModel:
    """Quasi-static Gaussian scatter on one parameter family.

    target selects which parameters receive independent N(0, sigma)
    offsets per realization: the even-site frequencies, the odd-site
    frequencies, or the couplings. sigma is an ordinary frequency in MHz.
    """

    target: str
    sigma_mhz: float = 0.0

    def __post_init__(self) -> None:
        if self.target not in _TARGETS:
            raise SpecError(f"target must be one of {_TARGETS}, got {self.target!r}")
        if self.sigma_mhz < 0:
            raise SpecError("noise width must be >= 0")


def _generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def sample_generator(seed: int, width_index: int, sample_index: int) -> np.random.Generator:
    """Order-independent per-sample generator from a root seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(width_index), int(sample_index)))
    return np.random.Generator(np.random.Philox(ss))


def _target_site_indices(target: str, n_sites: int) -> np.ndarray:
    # 1-based site parity: omega_even hits sites 2, 4, ...
    start = 1 if target == TARGET_OMEGA_EVEN else 0
    return np.arange(start, n_sites, 2)


def sample_noisy_spec(spec: ChainSpec, model: NoiseModel, seed) -> ChainSpec:
    """One quasi-static realization of a chain's parameters.

    Only the model's targeted parameters move; draws happen in site order
    from the given generator (or integer seed), so a fixed seed fully
    pins the realization.
    """
    if isinstance(spec, LatticeSpec):
        raise SpecError("quasi-static sampling is implemented for chains only")
    rng = _generator(seed)
    freqs = spec.frequencies.copy()
    coups = spec.couplings.copy()
    if model.target == TARGET_COUPLINGS:
        coups += units.mhz_to_ang(rng.normal(0.0, model.sigma_mhz, coups.size))
    else:
        idx = _target_site_indices(model.target, spec.n_sites)
        freqs[idx] += units.mhz_to_ang(rng.normal(0.0, model.sigma_mhz, idx.size))
    return chains.with_parameters(spec, frequencies=freqs, couplings=coups)


@dataclass(frozen=True)
class DegradationCurve:
    """Monte Carlo fidelity-ratio curve over a grid of noise widths.

    mean_ratio[i] is the mean of metric / baseline over samples at
    sigma_grid_mhz[i]; std is the sample standard deviation (ddof=1) of
    those ratios, and sem = std / sqrt(n_samples).
    """

    target: str
    sigma_grid_mhz: np.ndarray
    mean_ratio: np.ndarray
    std: np.ndarray
    n_samples: int
    baseline: float
    mean_fidelity: np.ndarray
    metric: str

    @property
    def sem(self) -> np.ndarray:
        return self.std / np.sqrt(self.n_samples)


def _metric_value(metric: str, state: QuantumState) -> float:
    if metric == METRIC_BELL:
        report = metrics.bell_fidelity(state, (1, state.n_sites))
        return report.phase_maximized_value
    if metric == METRIC_POPULATION:
        return float(state.populations()[-1])
    raise SpecError(f"metric must be one of {_METRICS}, got {metric!r}")


def _nominal_tau(spec: ChainSpec, tau_ns: float | None) -> float:
    if tau_ns is not None:
        return float(tau_ns)
    if spec.meta.f_j_mhz is None:
        raise SpecError("spec has no nominal coupling scale; pass tau_ns")
    return units.transfer_time_ns(spec.meta.f_j_mhz)


def _run_once(
    spec: ChainSpec,
    tau_ns: float,
    channels: NoiseChannelSet | None,
    metric: str,
    dt_ns: float,
) -> float:
    schedule = transfer_schedule(spec, tau_ns, dt_ns=dt_ns)
    rho0 = site_state(spec.n_sites, 1)
    traj = evolve_lindblad(schedule, spec, rho0, channels, keep=KEEP_FINAL)
    return _metric_value(metric, traj.final_state)


def degradation_sweep(
    spec: ChainSpec,
    theta_rad: float | None,
    models,
    channels: NoiseChannelSet | None,
    n_samples: int,
    seed: int,
    *,
    metric: str = METRIC_BELL,
    tau_ns: float | None = None,
    dt_ns: float | None = None,
    n_jobs: int = 1,
) -> DegradationCurve:
    """Monte Carlo degradation of a transfer protocol under parameter scatter.

    models is a width grid: NoiseModel instances sharing one target. The
    chain is optionally edge-deformed by theta_rad first; every sample
    then perturbs the deformed parameters, keeps the nominal transfer
    time, and scores `metric` on the final state. Relaxation/dephasing
    channels stay on in both the samples and the baseline, so mean_ratio
    isolates the quasi-static contribution. The baseline runs through the
    same schedule/engine path as the samples, which makes the ratio at
    sigma = 0 exactly 1.
    """
    if metric not in _METRICS:
        raise SpecError(f"metric must be one of {_METRICS}, got {metric!r}")
    if n_samples < 2:
        raise SpecError("n_samples must be at least 2 for a spread estimate")
    models = tuple(models)
    if not models:
        raise SpecError("need at least one noise model")
    targets = {m.target for m in models}
    if len(targets) != 1:
        raise SpecError("all models in one sweep must share a target")

    base_spec = (
        chains.apply_fst_deformation(spec, theta_rad) if theta_rad is not None else spec
    )
    tau = _nominal_tau(spec, tau_ns)
    dt = DT_NS if dt_ns is None else dt_ns
    baseline = _run_once(base_spec, tau, channels, metric, dt)
    if baseline <= 0:
        raise SpecError("baseline fidelity is not positive; cannot form ratios")

    values = np.empty((len(models), n_samples))

    def one(idx: tuple[int, int]) -> None:
        mi, si = idx
        rng = sample_generator(seed, mi, si)
        noisy = sample_noisy_spec(base_spec, models[mi], rng)
        values[mi, si] = _run_once(noisy, tau, channels, metric, dt)

    jobs = [(mi, si) for mi in range(len(models)) for si in range(n_samples)]
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(one, jobs))
    else:
        for job in jobs:
            one(job)

    ratios = values / baseline
    return DegradationCurve(
        target=models[0].target,
        sigma_grid_mhz=np.array([m.sigma_mhz for m in models]),
        mean_ratio=ratios.mean(axis=1),
        std=ratios.std(axis=1, ddof=1),
        n_samples=n_samples,
        baseline=baseline,
        mean_fidelity=values.mean(axis=1),
        metric=metric,
    )


def pst_process_fidelity(
    spec: ChainSpec,
    channels: NoiseChannelSet | None,
    schedule: Schedule | None = None,
) -> metrics.ProcessReport:
    """Process tomography of the end-to-end transfer as a qubit channel.

    Sends the four canonical states of the (vacuum, site 1) qubit through
    the dissipative engine and reconstructs the chi matrix of the induced
    map onto the (vacuum, site N) qubit. For a chain whose ideal transfer
    is the identity on that qubit, the fidelity is Re chi_00.
    """
    if isinstance(spec, LatticeSpec):
        raise SpecError("process tomography is implemented for chains only")
    if schedule is None:
        schedule = transfer_schedule(spec)
    n = spec.n_sites
    outputs = {}
    for key in metrics.TOMOGRAPHY_INPUTS:
        rho0 = metrics.tomography_input_state(key, n, site=1)
        traj = evolve_lindblad(schedule, spec, rho0, channels, keep=KEEP_FINAL)
        outputs[key] = metrics.reduce_to_sites(traj.final_state, (n,))
    return metrics.process_report(outputs)
