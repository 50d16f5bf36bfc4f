"""Synthetic device calibration and population-cost optimizers.

The device hides smooth monotone Zpa-to-parameter maps (cubic polynomials
with a seeded per-element coefficient spread), linear bounded crosstalk
between nearby control lines, and Gaussian measurement noise applied to
fitted values. Calibration inverts the hidden maps with the secant update
Z2 = Z1 + (Z1 - Z0) / (J1 - J0) * (target - J1), per-parameter, inside the
two-stage loop: couplers first (with offender recalibration), then qubit
frequencies under an environmental-frequency scheme, the whole cycle
repeated up to a small outer cap.

Layout: qubits 0..n_q-1 at even positions 2q, couplers 0..n_q-2 at odd
positions 2c+1 between their qubits. Crosstalk couples lines at position
distance 1 (nearest) and 2 (next-nearest) only, so units separated by more
than the configured parallel distance never interact.

Measurement noise is keyed by (device seed, experiment kind, element, full
Zpa vector), which makes every experiment a pure function: repeating a
call reproduces its result bit for bit regardless of call order or thread
scheduling.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq, curve_fit, minimize

from . import units
from .chains import ChainSpec
from .errors import CostEvaluationError, DegenerateSecantError, SpecError

SCHEME_STAGGERED = "staggered-average"
SCHEME_EXTREME = "extreme-detuned"
_SCHEMES = (SCHEME_STAGGERED, SCHEME_EXTREME)

KIND_FREQUENCY = "frequency"
KIND_COUPLING = "coupling"

# inner loops drive to this fraction of the acceptance threshold so an
# independent verification read (a fresh noise draw) cannot flip a
# parameter that the loop just passed
DRIVE_FRACTION = 0.4

METHOD_NM = "nelder_mead"
METHOD_DE = "differential_evolution"
_METHODS = (METHOD_NM, METHOD_DE)

# nominal (public) map coefficients: f(z) = a z + c z^3, J(z) = b0 + b1 z + b3 z^3
_NOMINAL_QUBIT = (48.0, 7.0)
_NOMINAL_COUPLER = (25.0, 10.0, 1.5)

_SWAP_T_NS = 150.0
_SWAP_DT_NS = 0.25
_RAMSEY_T_NS = 100.0
_RAMSEY_DT_NS = 1.0


class DeviceModel:
    """Synthetic device with hidden Zpa maps, crosstalk, and readout noise.

    Each qubit's frequency and each coupler's strength follow a cubic,
    strictly monotone map of its effective Zpa; effective Zpas mix in a
    linear, bounded contribution from lines at position distance 1
    (``crosstalk_nn``) and 2 (``crosstalk_next``). Per-element map
    coefficients are drawn once from the seed with a uniform relative
    spread, so the nominal (public) maps are systematically wrong by a few
    percent; calibration's job is to absorb that plus the crosstalk.
    """

    def __init__(
        self,
        n_qubits: int = 5,
        seed: int = 0,
        *,
        zpa_range: tuple[float, float] = (-1.5, 1.5),
        crosstalk_nn: float = 0.03,
        crosstalk_next: float = 0.01,
        measurement_noise_mhz: float = 0.02,
        coefficient_spread: float = 0.05,
    ) -> None:
        if n_qubits < 2:
            raise SpecError("device needs at least 2 qubits")
        if not 0 <= coefficient_spread < 0.1:
            # larger spreads can push the coupler map through zero in range
            raise SpecError("coefficient spread must be in [0, 0.1)")
        if zpa_range[0] >= zpa_range[1]:
            raise SpecError("zpa range must be an increasing interval")
        if crosstalk_nn < 0 or crosstalk_next < 0 or crosstalk_nn + crosstalk_next >= 0.5:
            raise SpecError("crosstalk must be nonnegative and small")
        self.n_qubits = int(n_qubits)
        self.seed = int(seed)
        self.zpa_range = (float(zpa_range[0]), float(zpa_range[1]))
        self.crosstalk_nn = float(crosstalk_nn)
        self.crosstalk_next = float(crosstalk_next)
        self.measurement_noise_mhz = float(measurement_noise_mhz)
        self.coefficient_spread = float(coefficient_spread)

        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=(0,)))
        )
        s = self.coefficient_spread
        self._qubit_coeffs = np.array(_NOMINAL_QUBIT) * (
            1.0 + rng.uniform(-s, s, (self.n_qubits, 2))
        )
        self._coupler_coeffs = np.array(_NOMINAL_COUPLER) * (
            1.0 + rng.uniform(-s, s, (self.n_couplers, 3))
        )

        pos = np.concatenate(
            [2.0 * np.arange(self.n_qubits), 2.0 * np.arange(self.n_couplers) + 1.0]
        )
        self._positions = pos
        dist = np.abs(pos[:, None] - pos[None, :])
        xt = np.where(dist == 1.0, self.crosstalk_nn, 0.0)
        xt += np.where(dist == 2.0, self.crosstalk_next, 0.0)
        np.fill_diagonal(xt, 0.0)
        self._xtalk = xt

    # -- structure ---------------------------------------------------------

    @property
    def n_couplers(self) -> int:
        return self.n_qubits - 1

    @property
    def n_elements(self) -> int:
        return self.n_qubits + self.n_couplers

    def coupler_element(self, coupler: int) -> int:
        """Global element index of a coupler."""
        if not 0 <= coupler < self.n_couplers:
            raise SpecError(f"coupler {coupler} outside 0..{self.n_couplers - 1}")
        return self.n_qubits + coupler

    def element_position(self, element: int) -> float:
        return float(self._positions[element])

    def clone(self) -> "DeviceModel":
        """An independent device with identical hidden maps and noise keys."""
        return DeviceModel(
            self.n_qubits,
            self.seed,
            zpa_range=self.zpa_range,
            crosstalk_nn=self.crosstalk_nn,
            crosstalk_next=self.crosstalk_next,
            measurement_noise_mhz=self.measurement_noise_mhz,
            coefficient_spread=self.coefficient_spread,
        )

    # -- hidden maps -------------------------------------------------------

    def _validate_zpa(self, zpa) -> np.ndarray:
        z = np.asarray(zpa, dtype=float)
        if z.shape != (self.n_elements,):
            raise SpecError(
                f"zpa must be a full vector of length {self.n_elements}, got {z.shape}"
            )
        lo, hi = self.zpa_range
        if np.any(z < lo) or np.any(z > hi):
            raise SpecError(f"zpa outside device range [{lo}, {hi}]")
        return z

    def effective_zpas(self, zpa) -> np.ndarray:
        """Per-line Zpas after linear crosstalk mixing."""
        z = self._validate_zpa(zpa)
        return z + self._xtalk @ z

    def realized_frequencies(self, zpa) -> np.ndarray:
        """True qubit frequencies (MHz) at a full Zpa configuration."""
        ze = self.effective_zpas(zpa)[: self.n_qubits]
        a, c = self._qubit_coeffs.T
        return a * ze + c * ze**3

    def realized_couplings(self, zpa) -> np.ndarray:
        """True coupler strengths (MHz) at a full Zpa configuration."""
        ze = self.effective_zpas(zpa)[self.n_qubits :]
        b0, b1, b3 = self._coupler_coeffs.T
        return b0 + b1 * ze + b3 * ze**3

    def realized_parameters(self, zpa) -> tuple[np.ndarray, np.ndarray]:
        return self.realized_frequencies(zpa), self.realized_couplings(zpa)

    # -- nominal (public) maps --------------------------------------------

    @staticmethod
    def nominal_frequency(z: float) -> float:
        a, c = _NOMINAL_QUBIT
        return a * z + c * z**3

    @staticmethod
    def nominal_coupling(z: float) -> float:
        b0, b1, b3 = _NOMINAL_COUPLER
        return b0 + b1 * z + b3 * z**3

    @staticmethod
    def nominal_frequency_slope(z: float) -> float:
        a, c = _NOMINAL_QUBIT
        return a + 3.0 * c * z**2

    @staticmethod
    def nominal_coupling_slope(z: float) -> float:
        _, b1, b3 = _NOMINAL_COUPLER
        return b1 + 3.0 * b3 * z**2

    def _nominal_inverse(self, fun: Callable[[float], float], value: float, what: str) -> float:
        lo, hi = self.zpa_range
        flo, fhi = fun(lo) - value, fun(hi) - value
        if flo * fhi > 0:
            raise SpecError(f"{what} {value} MHz is outside the nominal Zpa range")
        return float(brentq(lambda z: fun(z) - value, lo, hi, xtol=1e-12))

    def nominal_zpa_for_frequency(self, f_mhz: float) -> float:
        """Invert the nominal qubit map (the experimenter's first guess)."""
        return self._nominal_inverse(self.nominal_frequency, float(f_mhz), "frequency")

    def nominal_zpa_for_coupling(self, j_mhz: float) -> float:
        """Invert the nominal coupler map (the experimenter's first guess)."""
        return self._nominal_inverse(self.nominal_coupling, float(j_mhz), "coupling")

    # -- measurement noise -------------------------------------------------

    def measurement_noise(self, kind: str, element: int, zpa: np.ndarray) -> float:
        """Keyed Gaussian readout error; pure in (kind, element, local config).

        The key hashes the element's effective Zpa rather than the full
        vector: lines beyond crosstalk reach cannot influence a reading,
        so far-away activity must not re-roll its noise. This is what
        makes well-separated calibration units bit-identical whether they
        run alone, interleaved, or in any order.
        """
        if self.measurement_noise_mhz == 0.0:
            return 0.0
        eff = float(self.effective_zpas(zpa)[element])
        key = f"{self.seed}|{kind}|{element}|".encode() + np.float64(eff).tobytes()
        digest = hashlib.sha256(key).digest()
        ss = np.random.SeedSequence(int.from_bytes(digest[:16], "little"))
        g = np.random.Generator(np.random.Philox(ss))
        return self.measurement_noise_mhz * float(g.standard_normal())


# ---------------------------------------------------------------------------
# simulated experiments


def _fit_oscillation_frequency(t: np.ndarray, p: np.ndarray) -> float:
    """Angular frequency w of p(t) = sin^2(w t) from a sampled trace."""
    sig = p - np.mean(p)
    spec = np.abs(np.fft.rfft(sig))
    freqs = np.fft.rfftfreq(t.size, t[1] - t[0])
    k = int(np.argmax(spec[1:])) + 1
    # the trace oscillates at 2w
    w_guess = max(np.pi * freqs[k], 1e-4)

    def model(tt, w):
        return 0.5 - 0.5 * np.cos(2.0 * w * tt)

    try:
        popt, _ = curve_fit(model, t, p, p0=[w_guess], maxfev=2000)
        w = abs(float(popt[0]))
    except RuntimeError:
        w = w_guess
    return w


def swap_experiment(device: DeviceModel, pair, zpa) -> float:
    """Measured coupler strength (MHz) from a two-site exchange oscillation.

    pair is a coupler index or the adjacent qubit pair it joins. The two
    qubits are brought to resonance, so the excitation swaps as
    P(t) = sin^2(J t); the oscillation frequency is fitted from a sampled
    trace (FFT seed, least-squares refinement) and keyed measurement noise
    is added to the fitted value. Only |J| is observable.
    """
    if isinstance(pair, (tuple, list)):
        qa, qb = sorted(int(q) for q in pair)
        if qb != qa + 1:
            raise SpecError(f"pair {pair} is not an adjacent qubit pair")
        coupler = qa
    else:
        coupler = int(pair)
    element = device.coupler_element(coupler)
    z = device._validate_zpa(zpa)
    j_true = float(device.realized_couplings(z)[coupler])
    w = units.mhz_to_ang(abs(j_true))
    t = np.arange(0.0, _SWAP_T_NS + 0.5 * _SWAP_DT_NS, _SWAP_DT_NS)
    trace = np.sin(w * t) ** 2
    j_fit = units.ang_to_mhz(_fit_oscillation_frequency(t, trace))
    return j_fit + device.measurement_noise("swap", element, z)


def ramsey_experiment(device: DeviceModel, qubit: int, zpa) -> float:
    """Measured qubit frequency (MHz) from detuned phase precession.

    Both quadratures of the precession at the hidden frequency are
    sampled, the unwrapped phase is fitted linearly (signed result), and
    keyed measurement noise is added to the fitted value.
    """
    qubit = int(qubit)
    if not 0 <= qubit < device.n_qubits:
        raise SpecError(f"qubit {qubit} outside 0..{device.n_qubits - 1}")
    z = device._validate_zpa(zpa)
    f_true = float(device.realized_frequencies(z)[qubit])
    w = units.mhz_to_ang(f_true)
    t = np.arange(0.0, _RAMSEY_T_NS + 0.5 * _RAMSEY_DT_NS, _RAMSEY_DT_NS)
    phase = np.unwrap(np.arctan2(np.sin(w * t), np.cos(w * t)))
    slope = float(np.polyfit(t, phase, 1)[0])
    f_fit = units.ang_to_mhz(slope)
    return f_fit + device.measurement_noise("ramsey", qubit, z)


def secant_step(history: Sequence[tuple[float, float]], target: float, *, epsilon_mhz: float = 1e-6) -> float:
    """Next Zpa from the last two (zpa, value) pairs:
    Z2 = Z1 + (Z1 - Z0) / (J1 - J0) * (target - J1).
    """
    if len(history) < 2:
        raise SpecError("secant step needs at least two (zpa, value) points")
    (z0, v0), (z1, v1) = history[-2], history[-1]
    if abs(v1 - v0) <= epsilon_mhz:
        raise DegenerateSecantError(
            f"measured values {v0} and {v1} MHz are indistinguishable; re-perturb the zpa"
        )
    return float(z1 + (z1 - z0) / (v1 - v0) * (target - v1))


# ---------------------------------------------------------------------------
# calibration loop


@dataclass(frozen=True)
class CalibrationConfig:
    """Thresholds, caps, and scheme choices for the calibration loop.

    unit_radius restricts every parameter's Zpa search to within that
    radius of its nominal starting guess. parallel_distance is the
    position separation beyond which calibration units are guaranteed
    independent (crosstalk reaches two positions at most).
    """

    coupling_threshold_mhz: float = 0.1
    frequency_threshold_mhz: float = 0.1
    max_outer_iterations: int = 2
    max_inner_iterations: int = 5
    unit_radius: float = 1.5
    parallel_distance: float = 2.0
    env_scheme: str = SCHEME_STAGGERED
    perturb_step: float = 0.05
    env_offset: float = 0.5
    env_park: float = 1.4

    def __post_init__(self) -> None:
        if self.coupling_threshold_mhz <= 0 or self.frequency_threshold_mhz <= 0:
            raise SpecError("thresholds must be positive")
        if self.max_outer_iterations < 1 or self.max_inner_iterations < 1:
            raise SpecError("iteration caps must be at least 1")
        if self.unit_radius not in (1.0, 1.5, 2.0):
            raise SpecError("unit radius must be one of 1, 1.5, 2")
        if self.env_scheme not in _SCHEMES:
            raise SpecError(f"env scheme must be one of {_SCHEMES}")
        if self.perturb_step <= 0:
            raise SpecError("perturb step must be positive")


@dataclass
class ParameterRecord:
    """Final state of one calibrated parameter."""

    name: str
    element: int
    kind: str
    target_mhz: float
    measured_mhz: float
    residual_mhz: float
    iterations: int
    loops: int
    converged: bool

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "element": self.element,
            "kind": self.kind,
            "target_mhz": self.target_mhz,
            "measured_mhz": self.measured_mhz,
            "residual_mhz": self.residual_mhz,
            "iterations": self.iterations,
            "loops": self.loops,
            "converged": self.converged,
        }


@dataclass
class CalibrationReport:
    """Outcome of calibrate_all: residuals, iteration counts, final Zpas."""

    scheme: str
    outer_cycles: int
    converged: bool
    parameters: tuple[ParameterRecord, ...]
    zpa: np.ndarray
    notes: tuple[str, ...] = ()

    def record(self, name: str) -> ParameterRecord:
        for rec in self.parameters:
            if rec.name == name:
                return rec
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "outer_cycles": self.outer_cycles,
            "converged": self.converged,
            "notes": list(self.notes),
            "zpa": [float(z) for z in self.zpa],
            "parameters": [rec.to_json_dict() for rec in self.parameters],
        }


@dataclass
class _LoopResult:
    zpa: float
    value: float
    iterations: int
    converged: bool


def _inner_loop(
    measure: Callable[[float], float],
    z_start: float,
    target: float,
    threshold: float,
    cfg: CalibrationConfig,
    clip: Callable[[float], float],
) -> _LoopResult:
    """Secant iteration of one parameter against one measurement channel."""
    history: list[tuple[float, float]] = []
    z = clip(z_start)
    v = measure(z)
    history.append((z, v))
    if abs(v - target) < threshold:
        return _LoopResult(z, v, 0, True)
    step = cfg.perturb_step if target >= v else -cfg.perturb_step
    z2 = clip(z + step)
    if z2 == z:
        z2 = clip(z - step)
    v2 = measure(z2)
    history.append((z2, v2))
    if abs(v2 - target) < threshold:
        return _LoopResult(z2, v2, 0, True)
    iters = 0
    while iters < cfg.max_inner_iterations:
        iters += 1
        try:
            zn = secant_step(history, target)
        except DegenerateSecantError:
            zn = history[-1][0] + 2.5 * cfg.perturb_step
        zn = clip(zn)
        vn = measure(zn)
        history.append((zn, vn))
        if abs(vn - target) < threshold:
            return _LoopResult(zn, vn, iters, True)
    zb, vb = min(history, key=lambda h: abs(h[1] - target))
    return _LoopResult(zb, vb, iters, False)


class _UnitLayout:
    """Index bookkeeping for one chain mapped onto a device."""

    def __init__(self, device: DeviceModel, targets: ChainSpec, qubit_offset: int):
        n = targets.n_sites
        if qubit_offset < 0 or qubit_offset + n > device.n_qubits:
            raise SpecError(
                f"chain of {n} sites at offset {qubit_offset} does not fit "
                f"{device.n_qubits} qubits"
            )
        self.device = device
        self.n_sites = n
        self.qubits = list(range(qubit_offset, qubit_offset + n))
        self.couplers = list(range(qubit_offset, qubit_offset + n - 1))
        self.f_targets = np.asarray(targets.frequencies_mhz, dtype=float)
        self.j_targets = np.asarray(targets.couplings_mhz, dtype=float)


def calibrate_all(
    device: DeviceModel,
    targets: ChainSpec,
    config: CalibrationConfig | None = None,
    *,
    qubit_offset: int = 0,
    zpa: np.ndarray | None = None,
) -> tuple[np.ndarray, CalibrationReport]:
    """Two-stage secant calibration of a chain's couplers and qubits.

    Stage 1 calibrates every coupler to its target strength, then
    re-verifies all of them and recalibrates offenders until the pass is
    clean (bounded by the inner cap). Coupler Zpas are then frozen and
    stage 2 does the same for qubit frequencies under the configured
    environmental-frequency scheme. The whole cycle repeats while any
    verify pass still shows an offender, up to max_outer_iterations.

    staggered-average runs each qubit's loop twice with the other unit
    qubits displaced by +/- env_offset and averages the two calibrated
    Zpas arithmetically (noted in the report); measured values quoted for
    qubits are the average of the two displaced readings, which cancels
    the linear crosstalk bias. extreme-detuned parks the other unit
    qubits at env_park throughout.

    Non-convergence never raises: the affected parameter is flagged in
    the report and the best Zpa seen is kept.
    """
    cfg = config or CalibrationConfig()
    unit = _UnitLayout(device, targets, qubit_offset)
    drive_j = DRIVE_FRACTION * cfg.coupling_threshold_mhz
    drive_f = DRIVE_FRACTION * cfg.frequency_threshold_mhz
    z = np.zeros(device.n_elements) if zpa is None else np.array(zpa, dtype=float)
    lo, hi = device.zpa_range

    start_guess: dict[int, float] = {}

    def clip_for(element: int, guess: float) -> Callable[[float], float]:
        start_guess.setdefault(element, guess)
        g = start_guess[element]
        zlo = max(lo, g - cfg.unit_radius)
        zhi = min(hi, g + cfg.unit_radius)

        def clip(value: float) -> float:
            return float(np.clip(value, zlo, zhi))

        return clip

    # per-parameter bookkeeping across cycles
    worst_iters: dict[str, int] = {}
    loops_run: dict[str, int] = {}

    def run_loop(name, measure, z_start, target, threshold, clip) -> _LoopResult:
        res = _inner_loop(measure, z_start, target, threshold, cfg, clip)
        worst_iters[name] = max(worst_iters.get(name, 0), res.iterations)
        loops_run[name] = loops_run.get(name, 0) + 1
        return res

    # -- measurement contexts ---------------------------------------------

    def measure_coupler(coupler: int) -> Callable[[float], float]:
        element = device.coupler_element(coupler)

        def measure(zc: float) -> float:
            probe = z.copy()
            probe[element] = zc
            return swap_experiment(device, coupler, probe)

        return measure

    def env_qubits(qubit: int) -> list[int]:
        return [q for q in unit.qubits if q != qubit]

    def _displaced(probe: np.ndarray, others: list[int], offset: float) -> np.ndarray:
        out = probe.copy()
        out[others] = np.clip(out[others] + offset, lo, hi)
        return out

    def measure_qubit(qubit: int) -> Callable[[float], float]:
        others = env_qubits(qubit)

        if cfg.env_scheme == SCHEME_EXTREME:

            def measure(zq: float) -> float:
                probe = z.copy()
                probe[qubit] = zq
                probe[others] = cfg.env_park
                return ramsey_experiment(device, qubit, probe)

        else:

            def measure(zq: float) -> float:
                probe = z.copy()
                probe[qubit] = zq
                up = ramsey_experiment(device, qubit, _displaced(probe, others, cfg.env_offset))
                dn = ramsey_experiment(device, qubit, _displaced(probe, others, -cfg.env_offset))
                return 0.5 * (up + dn)

        return measure

    # -- staged cycles -----------------------------------------------------

    def coupler_pass() -> None:
        for i, coupler in enumerate(unit.couplers):
            name = f"coupler_{i + 1}"
            element = device.coupler_element(coupler)
            guess = device.nominal_zpa_for_coupling(unit.j_targets[i])
            res = run_loop(
                name,
                measure_coupler(coupler),
                z[element] if loops_run.get(name) else guess,
                unit.j_targets[i],
                drive_j,
                clip_for(element, guess),
            )
            z[element] = res.zpa

    def qubit_pass() -> None:
        for i, qubit in enumerate(unit.qubits):
            name = f"qubit_{i + 1}"
            guess = device.nominal_zpa_for_frequency(unit.f_targets[i])
            if cfg.env_scheme == SCHEME_STAGGERED:
                others = env_qubits(qubit)

                def one_sided(offset: float) -> _LoopResult:
                    def measure(zq: float) -> float:
                        probe = z.copy()
                        probe[qubit] = zq
                        return ramsey_experiment(
                            device, qubit, _displaced(probe, others, offset)
                        )

                    return run_loop(
                        name,
                        measure,
                        z[qubit] if loops_run.get(name, 0) > 1 else guess,
                        unit.f_targets[i],
                        drive_f,
                        clip_for(qubit, guess),
                    )

                up = one_sided(cfg.env_offset)
                dn = one_sided(-cfg.env_offset)
                z[qubit] = 0.5 * (up.zpa + dn.zpa)
            else:
                res = run_loop(
                    name,
                    measure_qubit(qubit),
                    z[qubit] if loops_run.get(name) else guess,
                    unit.f_targets[i],
                    drive_f,
                    clip_for(qubit, guess),
                )
                z[qubit] = res.zpa

    def verify() -> tuple[dict[str, float], list[str]]:
        measured: dict[str, float] = {}
        offenders: list[str] = []
        for i, coupler in enumerate(unit.couplers):
            name = f"coupler_{i + 1}"
            value = swap_experiment(device, coupler, z)
            measured[name] = value
            if abs(value - unit.j_targets[i]) >= cfg.coupling_threshold_mhz:
                offenders.append(name)
        for i, qubit in enumerate(unit.qubits):
            name = f"qubit_{i + 1}"
            value = measure_qubit(qubit)(z[qubit])
            measured[name] = value
            if abs(value - unit.f_targets[i]) >= cfg.frequency_threshold_mhz:
                offenders.append(name)
        return measured, offenders

    def recalibrate(name: str) -> None:
        if name.startswith("coupler"):
            i = int(name.split("_")[1]) - 1
            coupler = unit.couplers[i]
            element = device.coupler_element(coupler)
            res = run_loop(
                name,
                measure_coupler(coupler),
                z[element],
                unit.j_targets[i],
                drive_j,
                clip_for(element, z[element]),
            )
            z[element] = res.zpa
        else:
            i = int(name.split("_")[1]) - 1
            qubit = unit.qubits[i]
            res = run_loop(
                name,
                measure_qubit(qubit),
                z[qubit],
                unit.f_targets[i],
                drive_f,
                clip_for(qubit, z[qubit]),
            )
            z[qubit] = res.zpa

    outer = 0
    measured: dict[str, float] = {}
    for outer in range(1, cfg.max_outer_iterations + 1):
        coupler_pass()
        # recalibrate coupler offenders before freezing their zpas
        for _ in range(cfg.max_inner_iterations):
            bad = []
            for i, coupler in enumerate(unit.couplers):
                value = swap_experiment(device, coupler, z)
                if abs(value - unit.j_targets[i]) >= cfg.coupling_threshold_mhz:
                    bad.append(f"coupler_{i + 1}")
            if not bad:
                break
            for name in bad:
                recalibrate(name)
        qubit_pass()
        measured, offenders = verify()
        if not offenders:
            break
        # out of budget after the last cycle: flagged below via this verify

    records = []
    all_ok = True
    for i in range(unit.n_sites - 1):
        name = f"coupler_{i + 1}"
        value = measured[name]
        resid = abs(value - unit.j_targets[i])
        ok = bool(resid < cfg.coupling_threshold_mhz)
        all_ok &= ok
        records.append(
            ParameterRecord(
                name=name,
                element=device.coupler_element(unit.couplers[i]),
                kind=KIND_COUPLING,
                target_mhz=float(unit.j_targets[i]),
                measured_mhz=float(value),
                residual_mhz=float(resid),
                iterations=worst_iters.get(name, 0),
                loops=loops_run.get(name, 0),
                converged=ok,
            )
        )
    for i in range(unit.n_sites):
        name = f"qubit_{i + 1}"
        value = measured[name]
        resid = abs(value - unit.f_targets[i])
        ok = bool(resid < cfg.frequency_threshold_mhz)
        all_ok &= ok
        records.append(
            ParameterRecord(
                name=name,
                element=unit.qubits[i],
                kind=KIND_FREQUENCY,
                target_mhz=float(unit.f_targets[i]),
                measured_mhz=float(value),
                residual_mhz=float(resid),
                iterations=worst_iters.get(name, 0),
                loops=loops_run.get(name, 0),
                converged=ok,
            )
        )

    notes = ()
    if cfg.env_scheme == SCHEME_STAGGERED:
        notes = (
            "staggered-average: calibrated zpas of the two displaced "
            "environment runs averaged arithmetically",
        )
    report = CalibrationReport(
        scheme=cfg.env_scheme,
        outer_cycles=outer,
        converged=all_ok,
        parameters=tuple(records),
        zpa=z.copy(),
        notes=notes,
    )
    return z, report


def calibrate_many(
    device: DeviceModel,
    units: Sequence[tuple[ChainSpec, int]],
    config: CalibrationConfig | None = None,
) -> tuple[np.ndarray, list[CalibrationReport]]:
    """Calibrate several chain units on one device, sharing the Zpa vector.

    Units run one after another in the order given. Because crosstalk
    reaches at most two positions, units separated by more than the
    configured parallel distance produce identical per-unit results
    whatever the interleaving or ordering; that locality is what licenses
    running such units concurrently on real hardware.
    """
    cfg = config or CalibrationConfig()
    z = np.zeros(device.n_elements)
    reports = []
    for targets, offset in units:
        z, report = calibrate_all(device, targets, cfg, qubit_offset=offset, zpa=z)
        reports.append(report)
    return z, reports


# ---------------------------------------------------------------------------
# population cost and optimizers


@dataclass(frozen=True)
class CostSpec:
    """Balanced end-population cost sampled across transfer cycles.

    Samples are taken at odd multiples (2l-1) tau: the times at which a
    split transfer holds the balanced end populations. Even multiples are
    full revivals of the initial state, so sampling them would pin the
    cost at its ceiling regardless of the parameters.
    """

    tau_ns: float
    n_points: int = 15
    target: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self) -> None:
        if self.tau_ns <= 0:
            raise SpecError("tau must be positive")
        if self.n_points < 1:
            raise SpecError("need at least one sampling point")

    @property
    def sample_times_ns(self) -> np.ndarray:
        return (2.0 * np.arange(1, self.n_points + 1) - 1.0) * self.tau_ns


class TransferCost:
    """Population-imbalance cost of a chain realized through a device.

    A point x holds the free Zpas: qubits 2..N followed by couplers
    1..N-1. The first qubit's Zpa stays fixed because only frequency
    differences matter. Each evaluation maps x to the device's true
    parameters, evolves |site 1> under the static realized Hamiltonian,
    and averages |P_1 - P_N| / (P_1 + P_N) over the sampling times, with
    a degenerate term counting 1 when both end populations vanish.
    Points outside the device's Zpa window return a penalty above the
    cost ceiling instead of raising, which keeps derivative-free searches
    inside the physical window.
    """

    def __init__(
        self,
        device: DeviceModel,
        cost_spec: CostSpec,
        n_sites: int,
        *,
        qubit_offset: int = 0,
        fixed_first_zpa: float = 0.0,
    ) -> None:
        if qubit_offset < 0 or qubit_offset + n_sites > device.n_qubits:
            raise SpecError("chain does not fit on the device")
        self.device = device
        self.cost_spec = cost_spec
        self.n_sites = int(n_sites)
        self.qubit_offset = int(qubit_offset)
        self.fixed_first_zpa = float(fixed_first_zpa)

    @property
    def dim(self) -> int:
        return 2 * (self.n_sites - 1)

    def with_device(self, device: DeviceModel) -> "TransferCost":
        return TransferCost(
            device,
            self.cost_spec,
            self.n_sites,
            qubit_offset=self.qubit_offset,
            fixed_first_zpa=self.fixed_first_zpa,
        )

    def full_zpa(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise SpecError(f"expected {self.dim} free zpas, got shape {x.shape}")
        z = np.zeros(self.device.n_elements)
        q0 = self.qubit_offset
        z[q0] = self.fixed_first_zpa
        z[q0 + 1 : q0 + self.n_sites] = x[: self.n_sites - 1]
        for i in range(self.n_sites - 1):
            z[self.device.coupler_element(q0 + i)] = x[self.n_sites - 1 + i]
        return z

    def zpas_for_parameters(self, f_mhz: np.ndarray, j_mhz: np.ndarray) -> np.ndarray:
        """Free-Zpa start point from nominal map inversion of chain parameters."""
        f = np.asarray(f_mhz, dtype=float)
        j = np.asarray(j_mhz, dtype=float)
        if f.shape != (self.n_sites,) or j.shape != (self.n_sites - 1,):
            raise SpecError("parameter arrays do not match the chain size")
        qs = [self.device.nominal_zpa_for_frequency(v) for v in f[1:]]
        cs = [self.device.nominal_zpa_for_coupling(v) for v in j]
        return np.array(qs + cs)

    def zpa_steps_for_mhz(self, x: np.ndarray, step_mhz: float) -> np.ndarray:
        """Per-dimension Zpa steps equivalent to step_mhz on the nominal maps."""
        x = np.asarray(x, dtype=float)
        steps = np.empty(self.dim)
        for i in range(self.n_sites - 1):
            steps[i] = step_mhz / self.device.nominal_frequency_slope(x[i])
        for i in range(self.n_sites - 1):
            k = self.n_sites - 1 + i
            steps[k] = step_mhz / self.device.nominal_coupling_slope(x[k])
        return steps

    def parameters_mhz(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = self.full_zpa(x)
        freqs, coups = self.device.realized_parameters(z)
        q0 = self.qubit_offset
        return (
            freqs[q0 : q0 + self.n_sites],
            coups[q0 : q0 + self.n_sites - 1],
        )

    def end_populations(self, x: np.ndarray) -> np.ndarray:
        """(L, 2) array of the two end-site populations at the sampling times."""
        f_mhz, j_mhz = self.parameters_mhz(x)
        diag = units.mhz_to_ang(f_mhz)
        off = units.mhz_to_ang(j_mhz)
        h = np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)
        evals, evecs = np.linalg.eigh(h)
        amp0 = evecs.conj().T[:, 0]
        times = self.cost_spec.sample_times_ns
        phases = np.exp(-1j * np.outer(times, evals))
        psi = (phases * amp0) @ evecs.T
        pops = np.abs(psi) ** 2
        return pops[:, [0, self.n_sites - 1]]

    def _window_excess(self, x: np.ndarray) -> float:
        z_lo, z_hi = self.device.zpa_range
        z = np.asarray(x, dtype=float)
        return float(np.sum(np.clip(z_lo - z, 0, None) + np.clip(z - z_hi, 0, None)))

    def __call__(self, x: np.ndarray) -> float:
        excess = self._window_excess(x)
        if excess > 0:
            return 1.0 + excess
        pops = self.end_populations(x)
        p1, pn = pops[:, 0], pops[:, 1]
        total = p1 + pn
        terms = np.where(total < 1e-6, 1.0, np.abs(p1 - pn) / np.where(total > 0, total, 1.0))
        return float(np.mean(terms))


@dataclass
class OptimizerTrace:
    """Every cost evaluation plus the per-iteration best-so-far envelope."""

    method: str
    hyperparameters: dict
    evaluations: list = field(default_factory=list)
    best_costs: list = field(default_factory=list)
    best_x: np.ndarray | None = None
    best_cost: float = np.inf
    n_iterations: int = 0

    def record(self, x: np.ndarray, cost: float) -> None:
        self.evaluations.append(
            {"index": len(self.evaluations), "x": [float(v) for v in x], "cost": float(cost)}
        )
        if cost < self.best_cost:
            self.best_cost = float(cost)
            self.best_x = np.array(x, dtype=float)

    def close_iteration(self) -> None:
        self.n_iterations += 1
        self.best_costs.append(self.best_cost)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "hyperparameters": self.hyperparameters,
            "n_iterations": self.n_iterations,
            "best_cost": float(self.best_cost),
            "best_x": [float(v) for v in self.best_x] if self.best_x is not None else None,
            "best_costs": [float(c) for c in self.best_costs],
            "evaluations": self.evaluations,
        }


def _traced(cost: Callable, trace: OptimizerTrace) -> Callable[[np.ndarray], float]:
    def wrapped(x: np.ndarray) -> float:
        try:
            value = float(cost(x))
        except Exception as exc:  # trace survives the abort
            raise CostEvaluationError(f"cost evaluation failed: {exc}", trace) from exc
        trace.record(x, value)
        return value

    return wrapped


def _default_steps(cost: Callable, x0: np.ndarray, step_mhz: float) -> np.ndarray:
    if isinstance(cost, TransferCost):
        return cost.zpa_steps_for_mhz(x0, step_mhz)
    return np.full(x0.size, 0.01)


def _optimize_nm(
    cost: Callable,
    x0: np.ndarray,
    budget: int,
    trace: OptimizerTrace,
    step_mhz: float,
) -> np.ndarray:
    steps = _default_steps(cost, x0, step_mhz)
    simplex = np.vstack([x0] + [x0 + steps[i] * np.eye(x0.size)[i] for i in range(x0.size)])
    f = _traced(cost, trace)

    def callback(_xk):
        trace.close_iteration()

    minimize(
        f,
        x0,
        method="Nelder-Mead",
        callback=callback,
        options={
            "maxiter": budget,
            "maxfev": 10 * budget * (x0.size + 1),
            "adaptive": True,
            "initial_simplex": simplex,
            "xatol": 1e-10,
            "fatol": 1e-12,
        },
    )
    if trace.n_iterations == 0:
        trace.close_iteration()
    return trace.best_x


def _optimize_de(
    cost: Callable,
    x0: np.ndarray,
    budget: int,
    trace: OptimizerTrace,
    seed: int,
    bounds: tuple[np.ndarray, np.ndarray],
    n_jobs: int,
) -> np.ndarray:
    pop_size = 15
    f_weight = 0.6
    cr = 0.8
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    lo, hi = bounds
    dim = x0.size

    workers: list[Callable] = [cost]
    if n_jobs > 1 and isinstance(cost, TransferCost):
        workers = [cost.with_device(cost.device.clone()) for _ in range(n_jobs)]

    f = _traced(cost, trace)

    def evaluate_batch(points: np.ndarray) -> np.ndarray:
        if n_jobs > 1:
            # identically seeded clones make parallel generations reproducible
            try:
                with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                    raw = list(
                        pool.map(
                            lambda iv: float(workers[iv[0] % len(workers)](iv[1])),
                            enumerate(points),
                        )
                    )
            except Exception as exc:
                raise CostEvaluationError(f"cost evaluation failed: {exc}", trace) from exc
            for point, value in zip(points, raw):
                trace.record(point, value)
            return np.array(raw)
        return np.array([f(p) for p in points])

    pop = rng.uniform(lo, hi, (pop_size, dim))
    pop[0] = np.clip(x0, lo, hi)
    costs = evaluate_batch(pop)
    trace.close_iteration()

    for _ in range(budget):
        trials = np.empty_like(pop)
        for i in range(pop_size):
            choices = [j for j in range(pop_size) if j != i]
            a, b, c = rng.choice(choices, size=3, replace=False)
            mutant = np.clip(pop[a] + f_weight * (pop[b] - pop[c]), lo, hi)
            mask = rng.random(dim) < cr
            mask[rng.integers(dim)] = True
            trials[i] = np.where(mask, mutant, pop[i])
        trial_costs = evaluate_batch(trials)
        better = trial_costs <= costs
        pop[better] = trials[better]
        costs[better] = trial_costs[better]
        trace.close_iteration()
    return trace.best_x


def optimize(
    cost: Callable,
    x0: np.ndarray,
    method: str = METHOD_NM,
    budget: int = 150,
    *,
    seed: int = 0,
    bounds_mhz: float = 3.0,
    step_mhz: float = 0.5,
    n_jobs: int = 1,
) -> tuple[np.ndarray, OptimizerTrace]:
    """Derivative-free minimization of a population cost over free Zpas.

    method "nelder_mead": adaptive simplex started with edges equivalent
    to step_mhz on the nominal maps. method "differential_evolution":
    rand/1/bin with population 15, F=0.6, CR=0.8, seeded and fully
    deterministic, searching a box of bounds_mhz map-equivalent half-width
    around x0. budget counts iterations (simplex steps or generations).
    Returns the best point and the full evaluation trace; best-so-far
    cost along the trace is non-increasing by construction. A raising
    cost evaluation aborts the run but preserves the trace gathered so
    far on the raised error.
    """
    if method not in _METHODS:
        raise SpecError(f"method must be one of {_METHODS}, got {method!r}")
    if budget < 1:
        raise SpecError("budget must allow at least one iteration")
    x0 = np.asarray(x0, dtype=float)

    if method == METHOD_NM:
        trace = OptimizerTrace(
            method=method,
            hyperparameters={
                "adaptive": True,
                "initial_simplex_edge_mhz": step_mhz,
                "budget": budget,
            },
        )
        best = _optimize_nm(cost, x0, budget, trace, step_mhz)
        return best, trace

    half = _default_steps(cost, x0, bounds_mhz)
    lo, hi = x0 - half, x0 + half
    trace = OptimizerTrace(
        method=method,
        hyperparameters={
            "population": 15,
            "mutation": 0.6,
            "crossover": 0.8,
            "budget": budget,
            "seed": int(seed),
            "bounds_half_width_mhz": bounds_mhz,
            "bounds_lo": [float(v) for v in lo],
            "bounds_hi": [float(v) for v in hi],
        },
    )
    best = _optimize_de(cost, x0, budget, trace, seed, (lo, hi), n_jobs)
    return best, trace
