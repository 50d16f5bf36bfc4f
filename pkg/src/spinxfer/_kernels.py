"""Ramp integration kernels.

During pulse edges the Hamiltonian is time dependent:

    H(t) = e_f(t) * diag(w) + e_c(t) * K

with one scalar envelope per parameter group. The integrators below march
the truncated-basis master-equation state (excitation block B, vacuum
coherences v) or a pure excitation amplitude vector through one outer step
of length nsub * h using classical RK4, with the envelopes pre-sampled at
the 2 * nsub + 1 half-step nodes.

Two implementations are provided: a compiled one (numba, used by default
when importable) and a plain numpy one. Selection: the SPINXFER_BACKEND
environment variable ("auto", "numba", "numpy") read at import, or
`set_backend` at runtime. Both produce identical trajectories to floating
precision of the same arithmetic; the benchmark script compares their
speed.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import SpinxferError

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

# Max phase |H| * dt accumulated per RK4 substep. Callers derive substep
# counts from this so that halving the outer step changes results well below
# the 1e-6 acceptance tolerance even for the fastest pulses.
RAMP_MAX_PHASE = 0.02

_VALID = ("auto", "numba", "numpy")
_backend = os.environ.get("SPINXFER_BACKEND", "auto").lower()
if _backend not in _VALID:
    raise SpinxferError(
        f"SPINXFER_BACKEND must be one of {_VALID}, got {_backend!r}"
    )


def set_backend(name: str) -> None:
    """Override the integration backend ("auto", "numba", "numpy")."""
    global _backend
    if name not in _VALID:
        raise SpinxferError(f"backend must be one of {_VALID}, got {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise SpinxferError("numba backend requested but numba is not importable")
    _backend = name


def active_backend() -> str:
    """The backend that will actually run ("numba" or "numpy")."""
    if _backend == "auto":
        return "numba" if HAVE_NUMBA else "numpy"
    return _backend


def _ramp_lindblad_numpy(B, v, diag, K, gam, gv, ef, ec, nsub, h):
    """One outer step (nsub RK4 substeps) of the dissipative ramp."""
    Kc = K.astype(np.complex128)
    Dc = np.diag(diag).astype(np.complex128)

    def deriv(H, B, v):
        dB = -1j * (H @ B - B @ H) - gam * B
        dv = -1j * (H @ v) - gv * v
        return dB, dv

    for k in range(nsub):
        base = 2 * k
        H0 = ec[base] * Kc + ef[base] * Dc
        H1 = ec[base + 1] * Kc + ef[base + 1] * Dc
        H2 = ec[base + 2] * Kc + ef[base + 2] * Dc
        k1B, k1v = deriv(H0, B, v)
        k2B, k2v = deriv(H1, B + 0.5 * h * k1B, v + 0.5 * h * k1v)
        k3B, k3v = deriv(H1, B + 0.5 * h * k2B, v + 0.5 * h * k2v)
        k4B, k4v = deriv(H2, B + h * k3B, v + h * k3v)
        B = B + (h / 6.0) * (k1B + 2.0 * k2B + 2.0 * k3B + k4B)
        v = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return B, v


def _ramp_psi_numpy(psi, diag, K, ef, ec, nsub, h):
    """One outer step of the unitary ramp for a pure excitation vector."""
    Kc = K.astype(np.complex128)
    diag_c = diag.astype(np.complex128)
    for k in range(nsub):
        base = 2 * k
        H0 = ec[base] * Kc + np.diag(ef[base] * diag_c)
        H1 = ec[base + 1] * Kc + np.diag(ef[base + 1] * diag_c)
        H2 = ec[base + 2] * Kc + np.diag(ef[base + 2] * diag_c)
        k1 = -1j * (H0 @ psi)
        k2 = -1j * (H1 @ (psi + 0.5 * h * k1))
        k3 = -1j * (H1 @ (psi + 0.5 * h * k2))
        k4 = -1j * (H2 @ (psi + h * k3))
        psi = psi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return psi


if HAVE_NUMBA:

    @njit(cache=True)
    def _fill_h(out, K, diag, ef, ec):
        n = K.shape[0]
        for i in range(n):
            for j in range(n):
                out[i, j] = ec * K[i, j]
            out[i, i] += ef * diag[i]

    @njit(cache=True)
    def _deriv_block(H, B, gam, out):
        HB = H @ B
        BH = B @ H
        n = B.shape[0]
        for i in range(n):
            for j in range(n):
                out[i, j] = -1j * (HB[i, j] - BH[i, j]) - gam[i, j] * B[i, j]

    @njit(cache=True)
    def _ramp_lindblad_numba(B0, v0, diag, K, gam, gv, ef, ec, nsub, h):
        n = B0.shape[0]
        B = B0.copy()
        v = v0.copy()
        H = np.empty((n, n), np.complex128)
        k1B = np.empty((n, n), np.complex128)
        k2B = np.empty((n, n), np.complex128)
        k3B = np.empty((n, n), np.complex128)
        k4B = np.empty((n, n), np.complex128)
        for k in range(nsub):
            base = 2 * k
            _fill_h(H, K, diag, ef[base], ec[base])
            _deriv_block(H, B, gam, k1B)
            k1v = -1j * (H @ v) - gv * v
            _fill_h(H, K, diag, ef[base + 1], ec[base + 1])
            _deriv_block(H, B + 0.5 * h * k1B, gam, k2B)
            k2v = -1j * (H @ (v + 0.5 * h * k1v)) - gv * (v + 0.5 * h * k1v)
            _deriv_block(H, B + 0.5 * h * k2B, gam, k3B)
            k3v = -1j * (H @ (v + 0.5 * h * k2v)) - gv * (v + 0.5 * h * k2v)
            _fill_h(H, K, diag, ef[base + 2], ec[base + 2])
            _deriv_block(H, B + h * k3B, gam, k4B)
            k4v = -1j * (H @ (v + h * k3v)) - gv * (v + h * k3v)
            B = B + (h / 6.0) * (k1B + 2.0 * k2B + 2.0 * k3B + k4B)
            v = v + (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
        return B, v

    @njit(cache=True)
    def _ramp_psi_numba(psi0, diag, K, ef, ec, nsub, h):
        n = psi0.shape[0]
        psi = psi0.copy()
        H = np.empty((n, n), np.complex128)
        for k in range(nsub):
            base = 2 * k
            _fill_h(H, K, diag, ef[base], ec[base])
            k1 = -1j * (H @ psi)
            _fill_h(H, K, diag, ef[base + 1], ec[base + 1])
            k2 = -1j * (H @ (psi + 0.5 * h * k1))
            k3 = -1j * (H @ (psi + 0.5 * h * k2))
            _fill_h(H, K, diag, ef[base + 2], ec[base + 2])
            k4 = -1j * (H @ (psi + h * k3))
            psi = psi + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return psi


def ramp_lindblad_step(B, v, diag, K, gam, gv, ef, ec, nsub, h):
    """Advance (B, v) through one outer step of a ramp segment.

    ef/ec hold the two group envelopes at the 2 * nsub + 1 half-substep
    nodes; h is the substep length.
    """
    if active_backend() == "numba":
        return _ramp_lindblad_numba(
            np.ascontiguousarray(B, dtype=np.complex128),
            np.ascontiguousarray(v, dtype=np.complex128),
            diag, K, gam, gv, ef, ec, nsub, h,
        )
    return _ramp_lindblad_numpy(B, v, diag, K, gam, gv, ef, ec, nsub, h)


def ramp_psi_step(psi, diag, K, ef, ec, nsub, h):
    """Advance a pure excitation amplitude vector through one outer ramp step."""
    if active_backend() == "numba":
        return _ramp_psi_numba(
            np.ascontiguousarray(psi, dtype=np.complex128),
            diag, K, ef, ec, nsub, h,
        )
    return _ramp_psi_numpy(psi, diag, K, ef, ec, nsub, h)
