"""Pulse schedules, noise channels, and time evolution engines.

Times are in ns, parameter amplitudes in MHz, internal generators in
angular rad/ns. Every chain parameter is driven by a flattop pulse with
Gaussian edges; all frequencies share one envelope and all couplings share
another. With `equal_area=True` (the default) each pulse's plateau is
trimmed so its total area equals amplitude * tau, which makes the pulsed
protocol reproduce the ideal square-pulse transfer exactly whenever the
Hamiltonian commutes with itself across the ramp (uniform chains) and to
leading adiabatic order otherwise.

Dissipation uses amplitude damping (rate 1/T1 per site, all population
lost to the shared vacuum) and pure dephasing (projector collapse rate
2/T_phi per site). For initial states inside the zero- and one-excitation
sector the master equation closes on the excitation block B, the
site-vacuum coherence vector v and the vacuum weight 1 - tr(B):

    dB/dt = -i[H, B] - Gamma o B      (o = elementwise)
    dv/dt = -i H v   - (gamma1 + gamma_phi)/2 * v

with Gamma_jk = (gamma1_j + gamma1_k + gphi_j + gphi_k)/2 - delta_jk gphi_k.
The engine integrates ramps with substepped RK4 (compiled kernels) and
plateaus with cached exact exponentials of the static Liouvillian. A dense
full-basis reference engine (basis="full") integrates the same master
equation with explicit collapse operators for cross-validation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize
from scipy.special import erf

from . import chains, units
from ._kernels import RAMP_MAX_PHASE, ramp_lindblad_step, ramp_psi_step
from .chains import BASIS_FULL, BASIS_SINGLE, ChainSpec, LatticeSpec
from .errors import InvariantError, ResolutionError, SpecError

# Gaussian edges are truncated at this many sigma (or at the buffer if the
# buffer is shorter) and renormalized to start exactly at zero.
EDGE_TRUNCATION_SIGMA = 3.0

SIGMA_FREQUENCY_NS = 1.25
SIGMA_COUPLING_NS = 2.0
BUFFER_NS = 7.5
# frequency plateaus open this long before the coupling plateau and close
# as long after it, keeping detuning ramps clear of the active-bond window
FREQUENCY_LEAD_NS = 2.0
DT_NS = 0.05

KIND_FREQUENCIES = "frequencies"
KIND_COUPLINGS = "couplings"

KEEP_ALL = "all"
KEEP_FINAL = "final"

FULL_LINDBLAD_MAX_SITES = 8

_STATE_ATOL = 1e-7


# ---------------------------------------------------------------------------
# pulses


@dataclass(frozen=True)
class PulseShape:
    """Flattop pulse with truncated-Gaussian edges.

    The envelope is 0 until `buffer_ns - u0 * sigma_ns`, rises along a
    renormalized Gaussian to 1 at `buffer_ns`, holds for `plateau_ns`, and
    falls symmetrically, with u0 = min(3, buffer/sigma). `amplitude_mhz`
    scales the whole envelope.
    """

    sigma_ns: float
    buffer_ns: float
    plateau_ns: float
    amplitude_mhz: float

    def __post_init__(self) -> None:
        if self.sigma_ns <= 0:
            raise SpecError(f"pulse sigma must be positive, got {self.sigma_ns}")
        if self.buffer_ns <= 0:
            raise SpecError(f"pulse buffer must be positive, got {self.buffer_ns}")
        if self.plateau_ns < 0:
            raise SpecError(f"pulse plateau must be >= 0, got {self.plateau_ns}")

    @property
    def duration_ns(self) -> float:
        return 2.0 * self.buffer_ns + self.plateau_ns

    @property
    def truncation(self) -> float:
        return min(EDGE_TRUNCATION_SIGMA, self.buffer_ns / self.sigma_ns)

    def geometry(self) -> tuple[float, float, float]:
        return (self.sigma_ns, self.buffer_ns, self.plateau_ns)


def flattop_gaussian(t_ns, shape: PulseShape):
    """Envelope value(s) of a flattop-Gaussian pulse at local time t_ns."""
    t = np.asarray(t_ns, dtype=float)
    sig, buf, plat = shape.sigma_ns, shape.buffer_ns, shape.plateau_ns
    u0 = shape.truncation
    c = np.exp(-0.5 * u0 * u0)
    half = u0 * sig
    out = np.zeros_like(t)

    rise = (t > buf - half) & (t < buf)
    if np.any(rise):
        u = (t[rise] - buf) / sig
        out[rise] = (np.exp(-0.5 * u * u) - c) / (1.0 - c)
    fall = (t > buf + plat) & (t < buf + plat + half)
    if np.any(fall):
        u = (t[fall] - buf - plat) / sig
        out[fall] = (np.exp(-0.5 * u * u) - c) / (1.0 - c)
    out[(t >= buf) & (t <= buf + plat)] = 1.0

    out *= shape.amplitude_mhz
    if np.isscalar(t_ns):
        return float(out)
    return out


def edge_area_ns(shape: PulseShape) -> float:
    """Area under one normalized Gaussian edge of a flattop pulse.

    Closed form for the truncated, renormalized edge:
        A = sigma * (sqrt(pi/2) erf(u0 / sqrt 2) - u0 C) / (1 - C),
    with C = exp(-u0^2 / 2).
    """
    u0 = shape.truncation
    c = np.exp(-0.5 * u0 * u0)
    return float(
        shape.sigma_ns
        * (np.sqrt(np.pi / 2.0) * erf(u0 / np.sqrt(2.0)) - u0 * c)
        / (1.0 - c)
    )


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class Schedule:
    """Per-parameter pulse shapes driving one chain or lattice.

    One shape per site frequency and one per coupling, in the site/edge
    order of the spec the schedule was built from. The integration engines
    require all frequency shapes to share one geometry and all coupling
    shapes another; the two envelope groups are aligned on a common
    temporal midpoint via the per-kind offsets.
    """

    n_sites: int
    frequency_shapes: tuple[PulseShape, ...]
    coupling_shapes: tuple[PulseShape, ...]
    frequency_offset_ns: float
    coupling_offset_ns: float
    duration_ns: float
    dt_ns: float

    def __post_init__(self) -> None:
        if len(self.frequency_shapes) != self.n_sites:
            raise SpecError(
                f"need {self.n_sites} frequency shapes, got {len(self.frequency_shapes)}"
            )
        if not self.coupling_shapes:
            raise SpecError("schedule needs at least one coupling shape")
        if self.dt_ns <= 0:
            raise SpecError(f"dt must be positive, got {self.dt_ns}")
        for kind, shapes, off in (
            (KIND_FREQUENCIES, self.frequency_shapes, self.frequency_offset_ns),
            (KIND_COUPLINGS, self.coupling_shapes, self.coupling_offset_ns),
        ):
            geos = {s.geometry() for s in shapes}
            if len(geos) != 1:
                raise SpecError(f"{kind} shapes must share one pulse geometry")
            if off < 0:
                raise SpecError(f"{kind} offset must be >= 0, got {off}")
            if off + shapes[0].duration_ns > self.duration_ns + 1e-9:
                raise SpecError(f"{kind} pulse does not fit in the schedule duration")

    def _kind(self, kind: str) -> tuple[PulseShape, float]:
        if kind == KIND_FREQUENCIES:
            return self.frequency_shapes[0], self.frequency_offset_ns
        if kind == KIND_COUPLINGS:
            return self.coupling_shapes[0], self.coupling_offset_ns
        raise SpecError(f"unknown parameter kind {kind!r}")

    def envelope(self, kind: str, t_ns) -> np.ndarray:
        """Normalized (amplitude 1) envelope of a parameter kind at schedule time."""
        shape, offset = self._kind(kind)
        unit = dataclasses.replace(shape, amplitude_mhz=1.0)
        return flattop_gaussian(np.asarray(t_ns, dtype=float) - offset, unit)

    def amplitudes_mhz(self, kind: str) -> np.ndarray:
        shapes = (
            self.frequency_shapes if kind == KIND_FREQUENCIES else self.coupling_shapes
        )
        return np.array([s.amplitude_mhz for s in shapes])

    def static_window(self) -> tuple[float, float]:
        """Time window on which every envelope sits at its plateau value."""
        lo = []
        hi = []
        for kind in (KIND_FREQUENCIES, KIND_COUPLINGS):
            shape, offset = self._kind(kind)
            lo.append(offset + shape.buffer_ns)
            hi.append(offset + shape.buffer_ns + shape.plateau_ns)
        t1, t2 = max(lo), min(hi)
        if t2 < t1:
            raise SpecError("schedule has no common plateau window")
        return t1, t2

    def min_sigma_ns(self) -> float:
        return min(
            s.sigma_ns for s in (*self.frequency_shapes, *self.coupling_shapes)
        )

    def to_json_dict(self) -> dict:
        def one(shape: PulseShape) -> dict:
            return {
                "sigma_ns": shape.sigma_ns,
                "buffer_ns": shape.buffer_ns,
                "plateau_ns": shape.plateau_ns,
                "amplitude_mhz": shape.amplitude_mhz,
            }

        return {
            "n_sites": self.n_sites,
            "duration_ns": self.duration_ns,
            "dt_ns": self.dt_ns,
            "frequency_offset_ns": self.frequency_offset_ns,
            "coupling_offset_ns": self.coupling_offset_ns,
            "frequency_shapes": [one(s) for s in self.frequency_shapes],
            "coupling_shapes": [one(s) for s in self.coupling_shapes],
        }


def parameter_amplitudes(spec: ChainSpec | LatticeSpec) -> tuple[np.ndarray, np.ndarray]:
    """(site frequencies, bond couplings) in MHz, in engine parameter order.

    Chains order bonds (1,2), (2,3), ...; lattices order all horizontal
    bonds row-major first, then all vertical bonds row-major, matching the
    Hamiltonian assembly.
    """
    if isinstance(spec, ChainSpec):
        return spec.frequencies_mhz.copy(), spec.couplings_mhz.copy()
    row_f = spec.row_chain.frequencies_mhz
    col_f = spec.col_chain.frequencies_mhz
    freqs = (col_f[:, None] + row_f[None, :]).ravel()
    horiz = np.tile(spec.row_chain.couplings_mhz, spec.rows)
    vert = np.repeat(spec.col_chain.couplings_mhz, spec.cols)
    return freqs, np.concatenate([horiz, vert])


def _spec_f_j(spec: ChainSpec | LatticeSpec) -> float | None:
    meta = spec.row_chain.meta if isinstance(spec, LatticeSpec) else spec.meta
    return meta.f_j_mhz


def transfer_schedule(
    spec: ChainSpec | LatticeSpec,
    tau_ns: float | None = None,
    *,
    dt_ns: float = DT_NS,
    sigma_frequency_ns: float = SIGMA_FREQUENCY_NS,
    sigma_coupling_ns: float = SIGMA_COUPLING_NS,
    buffer_ns: float = BUFFER_NS,
    frequency_lead_ns: float = FREQUENCY_LEAD_NS,
    equal_area: bool = True,
) -> Schedule:
    """Flattop pulse schedule realizing a transfer of duration tau_ns.

    Coupling pulses carry the transfer: with equal_area=True their plateau
    is trimmed by twice the edge area so each bond integrates to
    amplitude * tau_ns. Frequency pulses nest around them, reaching their
    plateau frequency_lead_ns before the coupling plateau opens and holding
    it as long after it closes, so the detuning ramps never overlap the
    window in which the bonds are active. Frequency pulses are not area
    trimmed; their integral only sets site phases. tau_ns defaults to the
    spec's nominal transfer time.
    """
    if tau_ns is None:
        f_j = _spec_f_j(spec)
        if f_j is None:
            raise SpecError("spec has no nominal coupling scale; pass tau_ns")
        tau_ns = units.transfer_time_ns(f_j)
    if tau_ns <= 0:
        raise SpecError(f"tau_ns must be positive, got {tau_ns}")
    if frequency_lead_ns < 0:
        raise SpecError(f"frequency_lead_ns must be >= 0, got {frequency_lead_ns}")

    freqs_mhz, coups_mhz = parameter_amplitudes(spec)
    probe = PulseShape(sigma_coupling_ns, buffer_ns, 0.0, 1.0)
    plateau_j = tau_ns - 2.0 * edge_area_ns(probe) if equal_area else tau_ns
    if plateau_j <= 0:
        raise SpecError(
            f"tau_ns={tau_ns} is too short for coupling pulse edges "
            f"(sigma={sigma_coupling_ns}, buffer={buffer_ns})"
        )
    plateau_f = plateau_j + 2.0 * frequency_lead_ns
    duration = 2.0 * buffer_ns + plateau_f

    freq_shapes = tuple(
        PulseShape(sigma_frequency_ns, buffer_ns, plateau_f, float(a))
        for a in freqs_mhz
    )
    coup_shapes = tuple(
        PulseShape(sigma_coupling_ns, buffer_ns, plateau_j, float(a))
        for a in coups_mhz
    )
    return Schedule(
        n_sites=spec.n_sites,
        frequency_shapes=freq_shapes,
        coupling_shapes=coup_shapes,
        frequency_offset_ns=0.0,
        coupling_offset_ns=frequency_lead_ns,
        duration_ns=duration,
        dt_ns=dt_ns,
    )


# ---------------------------------------------------------------------------
# states


@dataclass(frozen=True)
class QuantumState:
    """State vector or density matrix on a named basis.

    Single-excitation basis: dimension n_sites + 1, index 0 the vacuum and
    index k the excitation on site k. Full basis: dimension 2**n_sites,
    site k mapped to bit k - 1 of the basis index.
    """

    data: np.ndarray
    basis: str
    n_sites: int

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=complex)
        object.__setattr__(self, "data", arr)
        dim = self.expected_dim(self.basis, self.n_sites)
        if arr.ndim == 1:
            if arr.shape != (dim,):
                raise SpecError(f"state vector must have shape ({dim},), got {arr.shape}")
        elif arr.ndim == 2:
            if arr.shape != (dim, dim):
                raise SpecError(
                    f"density matrix must have shape ({dim}, {dim}), got {arr.shape}"
                )
        else:
            raise SpecError("state data must be a vector or a square matrix")

    @staticmethod
    def expected_dim(basis: str, n_sites: int) -> int:
        if basis == BASIS_SINGLE:
            return n_sites + 1
        if basis == BASIS_FULL:
            return 1 << n_sites
        raise SpecError(f"unknown basis {basis!r}")

    @property
    def is_pure(self) -> bool:
        return self.data.ndim == 1

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def to_density(self) -> "QuantumState":
        if not self.is_pure:
            return self
        return QuantumState(np.outer(self.data, self.data.conj()), self.basis, self.n_sites)

    def validate(self, atol: float = _STATE_ATOL) -> "QuantumState":
        """Check normalization (and Hermiticity/positivity for densities)."""
        if self.is_pure:
            norm = float(np.linalg.norm(self.data))
            if abs(norm - 1.0) > atol:
                raise InvariantError(f"state norm {norm} deviates from 1")
            return self
        rho = self.data
        if np.max(np.abs(rho - rho.conj().T)) > atol:
            raise InvariantError("density matrix is not Hermitian")
        tr = float(np.real(np.trace(rho)))
        if abs(tr - 1.0) > atol:
            raise InvariantError(f"density trace {tr} deviates from 1")
        w = np.linalg.eigvalsh(rho)
        if w[0] < -atol:
            raise InvariantError(f"density has negative eigenvalue {w[0]}")
        return self

    def populations(self) -> np.ndarray:
        """Site occupation probabilities (length n_sites)."""
        if self.basis == BASIS_SINGLE:
            if self.is_pure:
                return np.abs(self.data[1:]) ** 2
            return np.real(np.diag(self.data))[1:].copy()
        occ = _occupation_matrix(self.n_sites)
        if self.is_pure:
            return occ.T @ (np.abs(self.data) ** 2)
        return occ.T @ np.real(np.diag(self.data))


def _occupation_matrix(n_sites: int) -> np.ndarray:
    dim = 1 << n_sites
    states = np.arange(dim)
    return ((states[:, None] >> np.arange(n_sites)[None, :]) & 1).astype(float)


def vacuum_state(n_sites: int, basis: str = BASIS_SINGLE) -> QuantumState:
    dim = QuantumState.expected_dim(basis, n_sites)
    vec = np.zeros(dim, dtype=complex)
    vec[0] = 1.0
    return QuantumState(vec, basis, n_sites)


def site_state(n_sites: int, site: int, basis: str = BASIS_SINGLE) -> QuantumState:
    """Single excitation on `site` (1-based), all other sites empty."""
    if not 1 <= site <= n_sites:
        raise SpecError(f"site must be in 1..{n_sites}, got {site}")
    dim = QuantumState.expected_dim(basis, n_sites)
    vec = np.zeros(dim, dtype=complex)
    vec[site if basis == BASIS_SINGLE else (1 << (site - 1))] = 1.0
    return QuantumState(vec, basis, n_sites)


def vacuum_site_superposition(
    n_sites: int,
    site: int,
    vacuum_amplitude: complex,
    site_amplitude: complex,
    basis: str = BASIS_SINGLE,
) -> QuantumState:
    """Normalized a|vac> + b|site k> superposition."""
    vec = vacuum_amplitude * vacuum_state(n_sites, basis).data
    vec = vec + site_amplitude * site_state(n_sites, site, basis).data
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise SpecError("superposition amplitudes are both zero")
    return QuantumState(vec / norm, basis, n_sites)


def truncated_to_full(state: QuantumState) -> QuantumState:
    """Embed a single-excitation-basis state into the full 2^n basis."""
    if state.basis != BASIS_SINGLE:
        raise SpecError("truncated_to_full needs a single-excitation-basis state")
    n = state.n_sites
    dim = 1 << n
    idx = np.array([0] + [1 << k for k in range(n)])
    if state.is_pure:
        vec = np.zeros(dim, dtype=complex)
        vec[idx] = state.data
        return QuantumState(vec, BASIS_FULL, n)
    rho = np.zeros((dim, dim), dtype=complex)
    rho[np.ix_(idx, idx)] = state.data
    return QuantumState(rho, BASIS_FULL, n)


# ---------------------------------------------------------------------------
# noise channels


def _as_site_array(value, n_sites: int, name: str) -> np.ndarray | None:
    if value is None:
        return None
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.full(n_sites, float(arr[0]))
    if arr.shape != (n_sites,):
        raise SpecError(f"{name} must be a scalar or length-{n_sites} sequence")
    if np.any(arr <= 0):
        raise InvariantError(f"{name} values must be positive")
    return arr


@dataclass(frozen=True)
class NoiseChannelSet:
    """Per-site relaxation and dephasing times in microseconds.

    Give t1_us and either t2_us or t_phi_us (not both). The pure dephasing
    time follows from 1/T_phi = 1/T2 - 1/(2 T1) and requires T2 <= 2 T1.
    Scalars broadcast over sites.
    """

    t1_us: float | tuple | None = None
    t2_us: float | tuple | None = None
    t_phi_us: float | tuple | None = None

    def __post_init__(self) -> None:
        if self.t2_us is not None and self.t_phi_us is not None:
            raise SpecError("give either t2_us or t_phi_us, not both")

    def rates_per_ns(self, n_sites: int) -> tuple[np.ndarray, np.ndarray]:
        """(relaxation rate 1/T1, projector dephasing rate 2/T_phi) per site."""
        t1 = _as_site_array(self.t1_us, n_sites, "t1_us")
        gamma1 = np.zeros(n_sites) if t1 is None else 1.0 / (t1 * units.NS_PER_US)
        t_phi_ns = self.t_phi_ns_values(n_sites)
        gamma_phi = np.zeros(n_sites)
        finite = np.isfinite(t_phi_ns)
        gamma_phi[finite] = 2.0 / t_phi_ns[finite]
        return gamma1, gamma_phi

    def t_phi_ns_values(self, n_sites: int) -> np.ndarray:
        """Pure dephasing time per site in ns (inf where absent)."""
        t_phi = _as_site_array(self.t_phi_us, n_sites, "t_phi_us")
        if t_phi is not None:
            return t_phi * units.NS_PER_US
        t2 = _as_site_array(self.t2_us, n_sites, "t2_us")
        if t2 is None:
            return np.full(n_sites, np.inf)
        t1 = _as_site_array(self.t1_us, n_sites, "t1_us")
        if t1 is None:
            return t2 * units.NS_PER_US
        if np.any(t2 > 2.0 * t1 + 1e-12):
            raise InvariantError("t2_us must not exceed 2 * t1_us")
        rate = 1.0 / (t2 * units.NS_PER_US) - 1.0 / (2.0 * t1 * units.NS_PER_US)
        out = np.full(n_sites, np.inf)
        pos = rate > 0
        out[pos] = 1.0 / rate[pos]
        return out


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Time-resolved evolution record.

    Depending on the engine the state is stored as pure amplitudes, as the
    (vacuum weight, site-vacuum coherences, excitation block) decomposition,
    or as full-basis density matrices. `state(i)` materializes a
    QuantumState either way.
    """

    times_ns: np.ndarray
    basis: str
    n_sites: int
    _psis: np.ndarray | None = None
    _p0: np.ndarray | None = None
    _v: np.ndarray | None = None
    _blocks: np.ndarray | None = None
    _rhos: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.times_ns)

    @cached_property
    def _occ(self) -> np.ndarray:
        return _occupation_matrix(self.n_sites)

    def populations(self) -> np.ndarray:
        """Site populations, shape (n_times, n_sites)."""
        if self._psis is not None:
            if self.basis == BASIS_SINGLE:
                return np.abs(self._psis[:, 1:]) ** 2
            return (np.abs(self._psis) ** 2) @ self._occ
        if self._blocks is not None:
            return np.real(np.einsum("tkk->tk", self._blocks))
        diags = np.real(np.einsum("tkk->tk", self._rhos))
        return diags @ self._occ

    def vacuum_population(self) -> np.ndarray:
        if self._psis is not None:
            # index 0 is the vacuum in both bases
            return np.abs(self._psis[:, 0]) ** 2
        if self._p0 is not None:
            return self._p0.copy()
        return np.real(self._rhos[:, 0, 0])

    def trace(self) -> np.ndarray:
        if self._psis is not None:
            return np.sum(np.abs(self._psis) ** 2, axis=1)
        if self._blocks is not None:
            return self._p0 + np.real(np.einsum("tkk->t", self._blocks))
        return np.real(np.einsum("tkk->t", self._rhos))

    def purity(self) -> np.ndarray:
        if self._psis is not None:
            return np.sum(np.abs(self._psis) ** 2, axis=1) ** 2
        if self._blocks is not None:
            return (
                self._p0**2
                + 2.0 * np.sum(np.abs(self._v) ** 2, axis=1)
                + np.sum(np.abs(self._blocks) ** 2, axis=(1, 2))
            )
        return np.real(np.einsum("tij,tji->t", self._rhos, self._rhos))

    def state(self, i: int) -> QuantumState:
        if self._psis is not None:
            return QuantumState(self._psis[i].copy(), self.basis, self.n_sites)
        if self._blocks is not None:
            n = self.n_sites
            rho = np.zeros((n + 1, n + 1), dtype=complex)
            rho[0, 0] = self._p0[i]
            rho[1:, 0] = self._v[i]
            rho[0, 1:] = self._v[i].conj()
            rho[1:, 1:] = self._blocks[i]
            return QuantumState(rho, self.basis, self.n_sites)
        return QuantumState(self._rhos[i].copy(), self.basis, self.n_sites)

    def states(self) -> Iterator[QuantumState]:
        for i in range(len(self)):
            yield self.state(i)

    @property
    def final_state(self) -> QuantumState:
        return self.state(len(self) - 1)


# ---------------------------------------------------------------------------
# engine plumbing


def _output_times(duration: float, dt: float) -> np.ndarray:
    n = int(np.floor(duration / dt + 1e-9))
    times = dt * np.arange(n + 1)
    if duration - times[-1] > 1e-9:
        times = np.append(times, duration)
    else:
        times[-1] = duration
    return times


def _pieces(a: float, b: float, t1: float, t2: float) -> list[tuple[float, float, bool]]:
    """Split [a, b] at the static-window boundaries; True marks static pieces."""
    cuts = [a] + [x for x in sorted((t1, t2)) if a + 1e-12 < x < b - 1e-12] + [b]
    out = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        mid = 0.5 * (lo + hi)
        out.append((lo, hi, t1 - 1e-12 <= mid <= t2 + 1e-12))
    return out


def _check_schedule(
    schedule: Schedule, spec: ChainSpec | LatticeSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Validate schedule/spec consistency; return excitation-block parts."""
    if schedule.dt_ns > schedule.min_sigma_ns() / 5.0 + 1e-12:
        raise ResolutionError(
            f"dt={schedule.dt_ns} ns is too coarse for pulse edges with "
            f"sigma={schedule.min_sigma_ns()} ns (need dt <= sigma / 5)"
        )
    n_sites = spec.n_sites
    if schedule.n_sites != n_sites:
        raise SpecError(
            f"schedule is for {schedule.n_sites} sites, spec has {n_sites}"
        )
    freqs_mhz, coups_mhz = parameter_amplitudes(spec)
    for kind, expect in ((KIND_FREQUENCIES, freqs_mhz), (KIND_COUPLINGS, coups_mhz)):
        got = schedule.amplitudes_mhz(kind)
        if got.shape != expect.shape:
            raise SpecError(f"schedule has {got.size} {kind} pulses, spec needs {expect.size}")
        tol = 1e-9 * max(1.0, float(np.max(np.abs(expect)))) if expect.size else 0.0
        if got.size and np.max(np.abs(got - expect)) > tol:
            raise SpecError(f"schedule {kind} amplitudes do not match the spec")
    return chains.realize_parts(spec)


def _hmax(diag: np.ndarray, k: np.ndarray, extra_rate: float = 0.0) -> float:
    bound = 0.0
    if diag.size:
        bound += float(np.max(np.abs(diag)))
    if k.size:
        bound += float(np.max(np.sum(np.abs(k), axis=1)))
    return bound + extra_rate


def _ramp_nodes(
    schedule: Schedule, lo: float, hi: float, hmax: float
) -> tuple[np.ndarray, np.ndarray, int, float]:
    span = hi - lo
    nsub = max(1, int(np.ceil(span * hmax / RAMP_MAX_PHASE)))
    h = span / nsub
    nodes = lo + 0.5 * h * np.arange(2 * nsub + 1)
    ef = np.ascontiguousarray(schedule.envelope(KIND_FREQUENCIES, nodes))
    ec = np.ascontiguousarray(schedule.envelope(KIND_COUPLINGS, nodes))
    return ef, ec, nsub, h


def _check_keep(keep: str) -> None:
    if keep not in (KEEP_ALL, KEEP_FINAL):
        raise SpecError(f"keep must be '{KEEP_ALL}' or '{KEEP_FINAL}', got {keep!r}")


def _march_times(
    keep: str, duration: float, dt: float, cuts: tuple[float, ...]
) -> tuple[np.ndarray, bool]:
    """March grid and whether every point is stored.

    keep="all" marches on the output grid. keep="final" marches segment by
    segment (the substepped integrators control accuracy internally), which
    collapses each plateau into a single exact exponential.
    """
    if keep == KEEP_ALL:
        return _output_times(duration, dt), True
    inner = [c for c in cuts if 1e-12 < c < duration - 1e-12]
    return np.unique(np.array([0.0, *inner, duration])), False


# ---------------------------------------------------------------------------
# unitary engine


def evolve_unitary(
    h: chains.HamiltonianMatrix, psi0: QuantumState, t_ns: float
) -> QuantumState:
    """Propagate a state under a static Hamiltonian for t_ns.

    Exact for static H: one eigendecomposition gives exp(-iHt) applied to
    a vector (or conjugated onto a density matrix), so the norm is
    preserved to machine precision.
    """
    if h.basis != psi0.basis:
        raise SpecError(f"state basis {psi0.basis!r} does not match H basis {h.basis!r}")
    if h.matrix.shape[0] != psi0.dim:
        raise SpecError(
            f"H dimension {h.matrix.shape[0]} does not match state dimension {psi0.dim}"
        )
    evals, evecs = np.linalg.eigh(h.matrix)
    phases = np.exp(-1j * evals * float(t_ns))
    if psi0.is_pure:
        out = evecs @ (phases * (evecs.conj().T @ psi0.data))
        return QuantumState(out, psi0.basis, psi0.n_sites)
    u = (evecs * phases) @ evecs.conj().T
    return QuantumState(u @ psi0.data @ u.conj().T, psi0.basis, psi0.n_sites)


def evolve_pulsed(
    schedule: Schedule,
    spec: ChainSpec | LatticeSpec,
    psi0: QuantumState,
    basis: str | None = None,
    keep: str = KEEP_ALL,
) -> Trajectory:
    """Evolve a pure state under the pulsed Hamiltonian without dissipation."""
    _check_keep(keep)
    if not psi0.is_pure:
        raise SpecError("evolve_pulsed needs a pure state; use evolve_lindblad")
    basis = basis or psi0.basis
    if psi0.basis != basis:
        raise SpecError(f"state basis {psi0.basis!r} does not match requested {basis!r}")
    psi0.validate()
    diag, k = _check_schedule(schedule, spec)
    if basis == BASIS_FULL:
        h_full = np.real(chains.realize(spec, BASIS_FULL).matrix)
        diag, k = np.diag(h_full).copy(), h_full - np.diag(np.diag(h_full))

    hmax = _hmax(diag, k)
    t1, t2 = schedule.static_window()
    march, store_all = _march_times(
        keep, schedule.duration_ns, schedule.dt_ns, (t1, t2)
    )

    # static propagator from one eigendecomposition
    h_static = k + np.diag(diag)
    evals, evecs = np.linalg.eigh(h_static)

    def static_apply(vec: np.ndarray, span: float) -> np.ndarray:
        return evecs @ (np.exp(-1j * evals * span) * (evecs.conj().T @ vec))

    if basis == BASIS_SINGLE:
        vac = complex(psi0.data[0])
        cur = np.ascontiguousarray(psi0.data[1:])
    else:
        vac = None
        cur = np.ascontiguousarray(psi0.data)

    n_store = len(march) if store_all else 2
    psis = np.empty((n_store, psi0.dim), dtype=complex)

    def assemble(vec: np.ndarray) -> np.ndarray:
        if vac is None:
            return vec
        return np.concatenate([[vac], vec])

    psis[0] = assemble(cur)
    for i in range(1, len(march)):
        for lo, hi, static in _pieces(march[i - 1], march[i], t1, t2):
            if static:
                cur = static_apply(cur, hi - lo)
            else:
                ef, ec, nsub, h = _ramp_nodes(schedule, lo, hi, hmax)
                cur = ramp_psi_step(cur, diag, k, ef, ec, nsub, h)
        if store_all:
            psis[i] = assemble(cur)
    if not store_all:
        psis[1] = assemble(cur)

    out_times = march if store_all else np.array([march[0], march[-1]])
    return Trajectory(out_times, basis, psi0.n_sites, _psis=psis)


# ---------------------------------------------------------------------------
# dissipative engine, truncated basis


def _evolve_block(
    schedule: Schedule,
    spec: ChainSpec | LatticeSpec,
    rho0: QuantumState,
    gamma1: np.ndarray,
    gamma_phi: np.ndarray,
    keep: str,
) -> Trajectory:
    diag, k = _check_schedule(schedule, spec)
    n = diag.size
    gam = 0.5 * (
        gamma1[:, None] + gamma1[None, :] + gamma_phi[:, None] + gamma_phi[None, :]
    ) - np.diag(gamma_phi)
    gv = 0.5 * (gamma1 + gamma_phi)

    rho = rho0.to_density().data
    p0 = float(np.real(rho[0, 0]))
    v = np.ascontiguousarray(rho[1:, 0])
    b = np.ascontiguousarray(rho[1:, 1:])

    hmax = _hmax(diag, k, float(np.max(gam)) if gam.size else 0.0)
    t1, t2 = schedule.static_window()
    march, store_all = _march_times(
        keep, schedule.duration_ns, schedule.dt_ns, (t1, t2)
    )

    h_static = k + np.diag(diag)
    eye = np.eye(n)
    liouville = (
        -1j * (np.kron(h_static, eye) - np.kron(eye, h_static)) - np.diag(gam.ravel())
    )
    a_v = -1j * h_static - np.diag(gv)
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def static_apply(b, v, span):
        key = int(round(span * 1e12))
        if key not in cache:
            cache[key] = (expm(liouville * span), expm(a_v * span))
        eb, ev = cache[key]
        return (eb @ b.reshape(-1)).reshape(n, n), ev @ v

    n_store = len(march) if store_all else 2
    p0s = np.empty(n_store)
    vs = np.empty((n_store, n), dtype=complex)
    bs = np.empty((n_store, n, n), dtype=complex)
    p0s[0], vs[0], bs[0] = p0, v, b

    total0 = p0 + float(np.real(np.trace(b)))
    for i in range(1, len(march)):
        for lo, hi, static in _pieces(march[i - 1], march[i], t1, t2):
            if static:
                b, v = static_apply(b, v, hi - lo)
            else:
                ef, ec, nsub, h = _ramp_nodes(schedule, lo, hi, hmax)
                b, v = ramp_lindblad_step(b, v, diag, k, gam, gv, ef, ec, nsub, h)
        p0 = total0 - float(np.real(np.trace(b)))
        if store_all:
            p0s[i], vs[i], bs[i] = p0, v, b
    if not store_all:
        p0s[1], vs[1], bs[1] = p0, v, b

    out_times = march if store_all else np.array([march[0], march[-1]])
    return Trajectory(
        out_times, BASIS_SINGLE, rho0.n_sites, _p0=p0s, _v=vs, _blocks=bs
    )


# ---------------------------------------------------------------------------
# dissipative engine, full basis (dense reference)


def _evolve_full(
    schedule: Schedule,
    spec: ChainSpec | LatticeSpec,
    rho0: QuantumState,
    gamma1: np.ndarray,
    gamma_phi: np.ndarray,
    keep: str,
) -> Trajectory:
    n_sites = rho0.n_sites
    if n_sites > FULL_LINDBLAD_MAX_SITES:
        raise SpecError(
            f"full-basis dissipative evolution limited to {FULL_LINDBLAD_MAX_SITES} sites"
        )
    _check_schedule(schedule, spec)
    h_full = np.real(chains.realize(spec, BASIS_FULL).matrix)
    diag = np.diag(h_full).copy()
    k = h_full - np.diag(diag)
    dim = h_full.shape[0]
    occ = _occupation_matrix(n_sites)

    # per-site collapse data: index pairs for a_k rho a_k^dag, occupation vectors
    states = np.arange(dim)
    jumps = []
    for b in range(n_sites):
        src = states[(states & (1 << b)) != 0]
        jumps.append((src, src ^ (1 << b), occ[:, b]))

    def deriv(h: np.ndarray, rho: np.ndarray) -> np.ndarray:
        d = -1j * (h @ rho - rho @ h)
        for site, (src, dst, nvec) in enumerate(jumps):
            g1, gp = gamma1[site], gamma_phi[site]
            if g1 > 0:
                d[np.ix_(dst, dst)] += g1 * rho[np.ix_(src, src)]
                d -= 0.5 * g1 * (nvec[:, None] + nvec[None, :]) * rho
            if gp > 0:
                d += gp * (np.outer(nvec, nvec) - 0.5 * (nvec[:, None] + nvec[None, :])) * rho
        return d

    hmax = _hmax(diag, k, float(np.max(gamma1) + np.max(gamma_phi)))
    march, store_all = _march_times(keep, schedule.duration_ns, schedule.dt_ns, ())

    def rk4_span(rho: np.ndarray, lo: float, hi: float) -> np.ndarray:
        span = hi - lo
        nsub = max(1, int(np.ceil(span * hmax / RAMP_MAX_PHASE)))
        h_sub = span / nsub
        nodes = lo + 0.5 * h_sub * np.arange(2 * nsub + 1)
        ef = schedule.envelope(KIND_FREQUENCIES, nodes)
        ec = schedule.envelope(KIND_COUPLINGS, nodes)
        for s in range(nsub):
            base = 2 * s
            h0 = ec[base] * k + np.diag(ef[base] * diag)
            h1 = ec[base + 1] * k + np.diag(ef[base + 1] * diag)
            h2 = ec[base + 2] * k + np.diag(ef[base + 2] * diag)
            k1 = deriv(h0, rho)
            k2 = deriv(h1, rho + 0.5 * h_sub * k1)
            k3 = deriv(h1, rho + 0.5 * h_sub * k2)
            k4 = deriv(h2, rho + h_sub * k3)
            rho = rho + (h_sub / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return rho

    rho = rho0.to_density().data.copy()
    n_store = len(march) if store_all else 2
    rhos = np.empty((n_store, dim, dim), dtype=complex)
    rhos[0] = rho
    for i in range(1, len(march)):
        rho = rk4_span(rho, march[i - 1], march[i])
        if store_all:
            rhos[i] = rho
    if not store_all:
        rhos[1] = rho

    out_times = march if store_all else np.array([march[0], march[-1]])
    return Trajectory(out_times, BASIS_FULL, n_sites, _rhos=rhos)


def evolve_lindblad(
    schedule: Schedule,
    spec: ChainSpec | LatticeSpec,
    rho0: QuantumState,
    channels: NoiseChannelSet | None,
    basis: str = BASIS_SINGLE,
    keep: str = KEEP_ALL,
) -> Trajectory:
    """Evolve a state under the pulsed Hamiltonian with T1/T_phi channels.

    basis="single_excitation" uses the closed block decomposition (exact
    for states in the zero/one-excitation sector). basis="full" integrates
    the dense master equation with explicit collapse operators; it is the
    slow reference route for cross-validation.
    """
    _check_keep(keep)
    if rho0.basis != basis:
        raise SpecError(f"state basis {rho0.basis!r} does not match requested {basis!r}")
    rho0.validate()
    n_sites = rho0.n_sites
    if channels is None:
        gamma1 = np.zeros(n_sites)
        gamma_phi = np.zeros(n_sites)
    else:
        gamma1, gamma_phi = channels.rates_per_ns(n_sites)
    if basis == BASIS_SINGLE:
        return _evolve_block(schedule, spec, rho0, gamma1, gamma_phi, keep)
    if basis == BASIS_FULL:
        return _evolve_full(schedule, spec, rho0, gamma1, gamma_phi, keep)
    raise SpecError(f"unknown basis {basis!r}")


# ---------------------------------------------------------------------------
# three-site closed form and solution-space sweep


def analytic_three_site(delta_mhz, coupling_mhz, t_ns):
    """Populations (P1, P2, P3) of the detuned three-site chain.

    Chain with site frequencies (0, delta, 0), both couplings equal, the
    excitation starting on site 1. Broadcasts over any argument.
    """
    d = units.mhz_to_ang(np.asarray(delta_mhz, dtype=float))
    j = units.mhz_to_ang(np.asarray(coupling_mhz, dtype=float))
    t = np.asarray(t_ns, dtype=float)
    om = np.sqrt(d * d + 8.0 * j * j)
    safe = np.where(om > 0, om, 1.0)
    ratio = np.where(om > 0, d / safe, 1.0)
    jfac = np.where(om > 0, 4.0 * j * j / (safe * safe), 0.0)

    c_om = np.cos(0.5 * om * t)
    s_om = np.sin(0.5 * om * t)
    c_d = np.cos(0.5 * d * t)
    s_d = np.sin(0.5 * d * t)
    p1 = 0.25 * (c_om + c_d) ** 2 + 0.25 * (ratio * s_om + s_d) ** 2
    p2 = jfac * s_om**2
    p3 = 0.25 * (c_om - c_d) ** 2 + 0.25 * (ratio * s_om - s_d) ** 2
    if np.isscalar(t_ns) and np.isscalar(delta_mhz) and np.isscalar(coupling_mhz):
        return float(p1), float(p2), float(p3)
    return p1, p2, p3


@dataclass(frozen=True)
class SolutionSpaceMap:
    """End-site population of the three-site chain over a parameter grid."""

    tau_ns: float
    delta_mhz: np.ndarray
    coupling_mhz: np.ndarray
    p3: np.ndarray  # shape (len(delta), len(coupling))


@dataclass(frozen=True)
class BrightSpot:
    """A local maximum of the transfer population in the solution space."""

    delta_mhz: float
    coupling_mhz: float
    p3: float


def sweep_solution_space(
    tau_ns: float,
    delta_grid_mhz,
    coupling_grid_mhz,
    n_sites: int = 3,
) -> SolutionSpaceMap:
    """Map P3(tau) over a (detuning, coupling) grid for the three-site chain."""
    if n_sites != 3:
        raise SpecError("the solution-space closed form exists only for 3 sites")
    delta = np.asarray(delta_grid_mhz, dtype=float)
    coup = np.asarray(coupling_grid_mhz, dtype=float)
    _, _, p3 = analytic_three_site(delta[:, None], coup[None, :], tau_ns)
    return SolutionSpaceMap(float(tau_ns), delta, coup, p3)


def find_bright_spots(
    smap: SolutionSpaceMap, threshold: float = 0.99, refine: bool = True
) -> tuple[BrightSpot, ...]:
    """Grid-local maxima of P3 above threshold, optionally polished off-grid.

    Candidates are grid cells not exceeded by any 8-neighborhood neighbor;
    adjacent candidates collapse to their best cell. With refine=True each
    candidate seeds a derivative-free polish of the closed-form P3; results
    are kept only inside the grid window. Spots are sorted by coupling.
    """
    p3 = smap.p3
    nd, nc = p3.shape
    padded = np.full((nd + 2, nc + 2), -np.inf)
    padded[1:-1, 1:-1] = p3
    neigh = np.full((nd, nc), -np.inf)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di == 0 and dj == 0:
                continue
            neigh = np.maximum(neigh, padded[1 + di : 1 + di + nd, 1 + dj : 1 + dj + nc])
    mask = (p3 > threshold) & (p3 >= neigh)

    # collapse touching candidate cells to the best cell of each cluster
    seen = np.zeros_like(mask, dtype=bool)
    cells: list[tuple[int, int]] = []
    for i0, j0 in zip(*np.nonzero(mask)):
        if seen[i0, j0]:
            continue
        stack, cluster = [(i0, j0)], []
        seen[i0, j0] = True
        while stack:
            i, j = stack.pop()
            cluster.append((i, j))
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ii, jj = i + di, j + dj
                    if 0 <= ii < nd and 0 <= jj < nc and mask[ii, jj] and not seen[ii, jj]:
                        seen[ii, jj] = True
                        stack.append((ii, jj))
        cells.append(max(cluster, key=lambda ij: p3[ij]))

    spots = []
    d_lo, d_hi = float(np.min(smap.delta_mhz)), float(np.max(smap.delta_mhz))
    c_lo, c_hi = float(np.min(smap.coupling_mhz)), float(np.max(smap.coupling_mhz))
    for i, j in cells:
        d0, c0, val = float(smap.delta_mhz[i]), float(smap.coupling_mhz[j]), float(p3[i, j])
        if refine:
            res = minimize(
                lambda x: -analytic_three_site(x[0], x[1], smap.tau_ns)[2],
                np.array([d0, c0]),
                method="Nelder-Mead",
                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 2000},
            )
            dr, cr = float(res.x[0]), float(res.x[1])
            if -res.fun >= val and d_lo - 1e-9 <= dr <= d_hi + 1e-9 and c_lo - 1e-9 <= cr <= c_hi + 1e-9:
                d0, c0, val = dr, cr, float(-res.fun)
        spots.append(BrightSpot(d0, c0, val))
    return tuple(sorted(spots, key=lambda s: s.coupling_mhz))
