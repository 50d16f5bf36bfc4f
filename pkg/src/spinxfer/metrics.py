"""State reduction and fidelity measures.

All functions accept QuantumState objects on either basis. Reductions keep
the qubit order of the `sites` argument: bit/slot i of the reduced state
corresponds to sites[i]. Fidelities are plain overlaps Tr(rho |t><t|)
against pure targets. Because local frequency pedestals imprint
deterministic single-qubit phases on transferred states, every report also
carries the overlap maximized over such local phases; the fixed-phase
target value stays the primary one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .chains import BASIS_FULL, BASIS_SINGLE
from .dynamics import QuantumState, site_state, vacuum_site_superposition, vacuum_state
from .errors import SpecError

_PHASE_ITERS = 50

TARGET_BELL_SINGLET = "bell_singlet"
TARGET_W4 = "w4"
TARGET_CUSTOM = "custom"

PAULIS = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)

TOMOGRAPHY_INPUTS = ("0", "1", "+", "+i")


@dataclass(frozen=True)
class FidelityReport:
    """A fixed-target fidelity with its phase-maximized companion.

    value is the overlap with the named target state as written;
    phase_maximized_value additionally optimizes one local phase per
    subsystem site, so value <= phase_maximized_value always holds.
    """

    value: float
    target: str
    phase_maximized_value: float
    subsystem: tuple[int, ...]
    details: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "target": self.target,
            "phase_maximized_value": self.phase_maximized_value,
            "subsystem": list(self.subsystem),
            "details": self.details,
        }


def populations(state: QuantumState, basis: str | None = None) -> np.ndarray:
    """Site occupation probabilities of a state (length n_sites)."""
    if basis is not None and basis != state.basis:
        raise SpecError(f"state is on basis {state.basis!r}, not {basis!r}")
    return state.populations()


def _check_sites(sites, n_sites: int) -> tuple[int, ...]:
    sites = tuple(int(s) for s in sites)
    if len(set(sites)) != len(sites):
        raise SpecError(f"sites must be distinct, got {sites}")
    for s in sites:
        if not 1 <= s <= n_sites:
            raise SpecError(f"site {s} outside 1..{n_sites}")
    return sites


def reduce_to_sites(state: QuantumState, sites) -> QuantumState:
    """Reduced density matrix on a subset of sites, in the order given.

    On the single-excitation basis the reduced space is (vacuum, kept
    sites): population on discarded sites is indistinguishable from the
    vacuum for the kept subsystem and folds into the vacuum weight, and
    coherences involving discarded sites drop. On the full basis this is
    the standard partial trace over the complementary qubits.
    """
    sites = _check_sites(sites, state.n_sites)
    rho = state.to_density().data
    if state.basis == BASIS_SINGLE:
        s = len(sites)
        out = np.zeros((s + 1, s + 1), dtype=complex)
        kept = set(sites)
        dropped = [j for j in range(1, state.n_sites + 1) if j not in kept]
        out[0, 0] = rho[0, 0] + sum(rho[j, j] for j in dropped)
        for i, si in enumerate(sites):
            out[0, i + 1] = rho[0, si]
            out[i + 1, 0] = rho[si, 0]
            for l, sl in enumerate(sites):
                out[i + 1, l + 1] = rho[si, sl]
        return QuantumState(out, BASIS_SINGLE, s)

    n = state.n_sites
    keep_bits = [s - 1 for s in sites]
    rest = [b for b in range(n) if b not in keep_bits]
    s = len(sites)
    base = np.array(
        [sum(((a >> i) & 1) << keep_bits[i] for i in range(s)) for a in range(1 << s)]
    )
    offs = np.array(
        [sum(((b >> l) & 1) << rest[l] for l in range(len(rest))) for b in range(1 << len(rest))]
    )
    out = np.zeros((1 << s, 1 << s), dtype=complex)
    for off in offs:
        out += rho[np.ix_(base + off, base + off)]
    return QuantumState(out, BASIS_FULL, s)


def state_fidelity(state: QuantumState, target: QuantumState) -> float:
    """Overlap Tr(rho_state |target><target|) for a pure target state."""
    if state.basis != target.basis or state.n_sites != target.n_sites:
        raise SpecError("state and target must share basis and size")
    if not target.is_pure:
        raise SpecError("target must be a pure state")
    psi = target.data
    rho = state.to_density().data
    return float(np.real(psi.conj() @ rho @ psi))


def _pair_density(state: QuantumState, sites) -> tuple[np.ndarray, tuple[int, ...]]:
    if sites is None:
        if state.n_sites == 2:
            return state.to_density().data, (1, 2)
        sites = (1, state.n_sites)
    sites = _check_sites(sites, state.n_sites)
    if len(sites) != 2:
        raise SpecError(f"a pair fidelity needs exactly 2 sites, got {len(sites)}")
    return reduce_to_sites(state, sites).to_density().data, sites


def bell_fidelity(state: QuantumState, sites=None) -> FidelityReport:
    """Overlap with the singlet Bell state (|01> - |10>)/sqrt(2) of two sites.

    sites defaults to (1, n_sites). In both the reduced truncated basis
    and the reduced two-qubit basis, indices 1 and 2 hold the two
    one-excitation levels, so the singlet overlap is
    (P_a + P_b)/2 - Re rho_ab; the phase-maximized companion replaces
    -Re rho_ab with |rho_ab|.
    """
    red, sites = _pair_density(state, sites)
    p_a = float(np.real(red[1, 1]))
    p_b = float(np.real(red[2, 2]))
    coh = complex(red[1, 2])
    base = 0.5 * (p_a + p_b)
    return FidelityReport(
        value=base - coh.real,
        target=TARGET_BELL_SINGLET,
        phase_maximized_value=base + abs(coh),
        subsystem=sites,
        details={
            "p_a": p_a,
            "p_b": p_b,
            "coherence_re": coh.real,
            "coherence_im": coh.imag,
            "coherence_abs": abs(coh),
            "psi_plus": base + coh.real,
            "psi_minus": base - coh.real,
        },
    )


def _single_excitation_submatrix(state: QuantumState, sites) -> np.ndarray:
    red = reduce_to_sites(state, sites).to_density().data
    s = len(sites)
    if red.shape[0] == s + 1:
        idx = list(range(1, s + 1))
    else:
        idx = [1 << i for i in range(s)]
    return red[np.ix_(idx, idx)]


def _phase_maximize(rho_w: np.ndarray, iters: int = _PHASE_ITERS) -> float:
    s = rho_w.shape[0]
    z = np.ones(s, dtype=complex)
    for _ in range(iters):
        w = rho_w @ z
        mag = np.abs(w)
        z = np.where(mag > 1e-15, w / np.where(mag > 0, mag, 1.0), z)
    best = float(np.real(z.conj() @ rho_w @ z)) / s
    literal = float(np.real(np.sum(rho_w))) / s
    return max(best, literal)


def w_fidelity(state: QuantumState, sites=None) -> FidelityReport:
    """Overlap with the equal-weight single-excitation W state of `sites`.

    sites defaults to all sites. The phase-maximized companion optimizes
    one local phase per site by coordinate ascent (deterministic, fixed
    iteration count), absorbing the deterministic pedestal phases.
    """
    if sites is None:
        sites = tuple(range(1, state.n_sites + 1))
    sites = _check_sites(sites, state.n_sites)
    rho_w = _single_excitation_submatrix(state, sites)
    literal = float(np.real(np.sum(rho_w))) / len(sites)
    return FidelityReport(
        value=literal,
        target=TARGET_W4 if len(sites) == 4 else TARGET_CUSTOM,
        phase_maximized_value=_phase_maximize(rho_w),
        subsystem=sites,
        details={
            "populations": [float(np.real(rho_w[i, i])) for i in range(len(sites))],
        },
    )


# ---------------------------------------------------------------------------
# single-qubit process tomography


def tomography_input_state(
    key: str, n_sites: int, site: int = 1, basis: str = BASIS_SINGLE
) -> QuantumState:
    """Canonical tomography input on the (vacuum, site) qubit."""
    if key == "0":
        return vacuum_state(n_sites, basis)
    if key == "1":
        return site_state(n_sites, site, basis)
    if key == "+":
        return vacuum_site_superposition(n_sites, site, 1.0, 1.0, basis)
    if key == "+i":
        return vacuum_site_superposition(n_sites, site, 1.0, 1j, basis)
    raise SpecError(f"unknown tomography input {key!r}; use one of {TOMOGRAPHY_INPUTS}")


def _as_qubit_density(value) -> np.ndarray:
    if isinstance(value, QuantumState):
        value = value.to_density().data
    arr = np.asarray(value, dtype=complex)
    if arr.shape != (2, 2):
        raise SpecError(f"tomography outputs must be 2x2 densities, got {arr.shape}")
    return arr


def chi_matrix(outputs: Mapping[str, object]) -> np.ndarray:
    """Process matrix in the Pauli basis from four tomography outputs.

    outputs maps each key in ("0", "1", "+", "+i") to the 2x2 output
    density of the (vacuum, site) qubit. Linear inversion:
        E(|0><1|) = E(+) + i E(+i) - (1 + i)(E(0) + E(1))/2,
    the Choi-like block matrix Lambda = sum_ij |i><j| (x) E(|i><j|), and
    chi = W^dag Lambda W / 2 with columns w_m = (I (x) P_m)|Phi>.
    For the identity channel chi_00 = 1.
    """
    missing = [k for k in TOMOGRAPHY_INPUTS if k not in outputs]
    if missing:
        raise SpecError(f"tomography outputs missing keys {missing}")
    e00 = _as_qubit_density(outputs["0"])
    e11 = _as_qubit_density(outputs["1"])
    ep = _as_qubit_density(outputs["+"])
    epi = _as_qubit_density(outputs["+i"])
    e01 = ep + 1j * epi - 0.5 * (1.0 + 1j) * (e00 + e11)
    e10 = e01.conj().T
    lam = np.block([[e00, e01], [e10, e11]])
    phi = np.array([1.0, 0.0, 0.0, 1.0], dtype=complex) / np.sqrt(2.0)
    w = np.column_stack([np.kron(np.eye(2), p) @ phi for p in PAULIS])
    return w.conj().T @ lam @ w / 2.0


def process_fidelity(chi: np.ndarray, target: np.ndarray | None = None) -> float:
    """Process fidelity of a chi matrix against a target unitary (default identity)."""
    if target is None:
        return float(np.real(chi[0, 0]))
    v = np.asarray(target, dtype=complex)
    u = np.array([np.trace(p.conj().T @ v) / 2.0 for p in PAULIS])
    return float(np.real(u.conj() @ chi @ u))


def project_cptp(chi: np.ndarray) -> tuple[np.ndarray, float]:
    """Nearest (eigenvalue-clipped, trace-renormalized) physical chi matrix.

    Returns the projected matrix and its Frobenius distance from the
    input, a diagnostic for how unphysical the raw inversion was.
    """
    herm = 0.5 * (chi + chi.conj().T)
    vals, vecs = np.linalg.eigh(herm)
    clipped = np.clip(vals, 0.0, None)
    total = float(np.sum(clipped))
    if total <= 0:
        raise SpecError("chi matrix has no positive weight; cannot project")
    proj = (vecs * (clipped / total)) @ vecs.conj().T
    return proj, float(np.linalg.norm(chi - proj))


@dataclass(frozen=True)
class ProcessReport:
    """Chi matrix with its fidelity and physicality diagnostic."""

    chi: np.ndarray
    fidelity: float
    cptp_distance: float

    def to_json_dict(self) -> dict:
        return {
            "fidelity": self.fidelity,
            "cptp_distance": self.cptp_distance,
            "chi_re": [[float(x) for x in row] for row in np.real(self.chi)],
            "chi_im": [[float(x) for x in row] for row in np.imag(self.chi)],
        }


def process_report(
    outputs: Mapping[str, object], target: np.ndarray | None = None
) -> ProcessReport:
    chi = chi_matrix(outputs)
    _, dist = project_cptp(chi)
    return ProcessReport(chi=chi, fidelity=process_fidelity(chi, target), cptp_distance=dist)
