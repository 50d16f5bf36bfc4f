"""Spectra, inverse eigenvalue reconstruction, and transfer-condition checks.

The zig-zag family is defined by its single-excitation spectrum
{-(N-1)/2, ..., -1, 0, 2m+1, ..., 2m+(N-1)/2} in units of J. This module
generates those target spectra, solves the inverse eigenvalue problem that
recovers the unique mirror-symmetric tridiagonal Hamiltonian from a
spectrum, verifies the two transfer conditions (mirror symmetry and
odd-pi-multiple eigenvalue spacings), and constructs the orthogonal
transform matrices V, R, Q behind the fractional-transfer deformation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import chains
from .chains import ChainSpec, ChainMeta, KIND_CUSTOM
from .errors import SpecError
from .units import ANG_PER_MHZ, transfer_time_ns

SPACING_TOL = 1e-6 * math.pi
RECONSTRUCTION_TOL = 1e-8


@dataclass(frozen=True)
class TargetSpectrum:
    """Ascending eigenvalues of an N-site chain, in units of J."""

    values: np.ndarray
    m: int | None
    n_sites: int

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.shape != (self.n_sites,):
            raise SpecError("spectrum length must equal n_sites")
        if np.any(np.diff(vals) <= 0):
            raise SpecError("spectrum must be strictly ascending")

    def to_json(self) -> str:
        return json.dumps([float(v) for v in self.values])


@dataclass(frozen=True)
class PstConditionReport:
    """Outcome of the two transfer conditions for a given spec and time."""

    mirror_ok: bool
    max_asymmetry: float
    spacing_ok: bool
    spacing_integers: tuple[int, ...]
    max_spacing_residual: float
    tau_ns: float

    @property
    def ok(self) -> bool:
        return self.mirror_ok and self.spacing_ok

    def to_json_dict(self) -> dict:
        return {
            "mirror_ok": self.mirror_ok,
            "max_asymmetry": self.max_asymmetry,
            "spacing_ok": self.spacing_ok,
            "spacing_integers": list(self.spacing_integers),
            "max_spacing_residual": self.max_spacing_residual,
            "tau_ns": self.tau_ns,
        }


@dataclass(frozen=True)
class FstTransform:
    """Orthogonal involutions driving the fractional transfer.

    V is symmetric with V V = I; R is the anti-diagonal flip; Q = V R V is
    the pattern the ideal evolution realizes at the transfer time (up to a
    global phase). Q's first column (sin 2 theta, 0, ..., 0, cos 2 theta)
    is the split of an excitation launched from site 1.
    """

    v: np.ndarray
    r: np.ndarray
    q: np.ndarray
    theta_rad: float


def target_spectrum(n_sites: int, m: int) -> TargetSpectrum:
    """The zig-zag family spectrum, ascending, in units of J."""
    if n_sites < 3 or n_sites % 2 == 0:
        raise SpecError("target spectrum defined for odd n_sites >= 3")
    if m < 0 or int(m) != m:
        raise SpecError("m must be a non-negative integer")
    half = (n_sites - 1) // 2
    low = np.arange(-half, 1, dtype=float)
    high = 2 * m + np.arange(1, half + 1, dtype=float)
    return TargetSpectrum(np.concatenate([low, high]), int(m), n_sites)


def _first_row_weights(lam: np.ndarray) -> np.ndarray:
    """Squared first eigenvector components of a mirror-symmetric Jacobi matrix.

    For a persymmetric Jacobi matrix with simple spectrum the first
    components satisfy q_{1k}^2 proportional to 1 / prod_{j != k}
    |lam_k - lam_j|; normalizing the sum to one fixes them completely.
    """
    n = len(lam)
    logs = np.zeros(n)
    for k in range(n):
        diffs = np.abs(lam[k] - np.delete(lam, k))
        logs[k] = -np.sum(np.log(diffs))
    logs -= logs.max()
    w = np.exp(logs)
    return w / w.sum()


def reconstruct_tridiagonal(
    spectrum: TargetSpectrum | np.ndarray, f_j_mhz: float | None = None
) -> ChainSpec:
    """Unique mirror-symmetric tridiagonal chain with the given spectrum.

    Uses the orthogonal-polynomial route: persymmetry fixes the first row of
    the eigenvector matrix, and a Lanczos three-term recurrence on the
    diagonal eigenvalue matrix rebuilds the tridiagonal entries. Couplings
    come out positive. With `f_j_mhz` given, the spectrum is interpreted in
    units of J = 2 pi f_J and the result is in the package's angular units;
    otherwise J = 1 rad/ns.
    """
    vals = (
        spectrum.values
        if isinstance(spectrum, TargetSpectrum)
        else np.asarray(spectrum, dtype=float)
    )
    n = len(vals)
    if n < 2:
        raise SpecError("need at least two eigenvalues")
    if np.any(np.diff(vals) <= 0):
        raise SpecError("spectrum must be strictly ascending")
    gaps = np.diff(vals)
    scale = max(float(np.max(np.abs(vals))), 1e-30)
    if np.min(gaps) <= 1e-12 * scale:
        raise SpecError("degenerate spectrum: no Jacobi matrix exists")

    j = 1.0 if f_j_mhz is None else f_j_mhz * ANG_PER_MHZ
    lam = vals * j

    weights = np.sqrt(_first_row_weights(lam))
    # Lanczos on diag(lam) seeded with the first eigenvector row, with full
    # reorthogonalization for stability at larger N.
    q = np.zeros((n, n))
    alphas = np.zeros(n)
    betas = np.zeros(n - 1)
    q[0] = weights / np.linalg.norm(weights)
    for k in range(n):
        w = lam * q[k]
        alphas[k] = q[k] @ w
        w -= alphas[k] * q[k]
        if k > 0:
            w -= betas[k - 1] * q[k - 1]
        w -= q[: k + 1].T @ (q[: k + 1] @ w)
        if k < n - 1:
            betas[k] = np.linalg.norm(w)
            if betas[k] <= 1e-14 * scale * abs(j):
                raise SpecError("Lanczos breakdown: spectrum too clustered")
            q[k + 1] = w / betas[k]

    # enforce exact persymmetry of the output
    freqs = 0.5 * (alphas + alphas[::-1])
    coups = 0.5 * (betas + betas[::-1])
    return ChainSpec(n, freqs, coups, ChainMeta(KIND_CUSTOM, None, f_j_mhz))


def check_pst_conditions(
    spec: ChainSpec,
    tau_ns: float,
    spacing_tol: float = SPACING_TOL,
    mirror_rtol: float = 1e-9,
) -> PstConditionReport:
    """Evaluate mirror symmetry and the odd-pi spacing condition at tau.

    Every eigenvalue gap must satisfy (lam_{k+1} - lam_k) tau = (2 m_k + 1)
    pi for integers m_k; the report carries those integers and the worst
    residual.
    """
    mirror_ok = spec.is_mirror_symmetric(rtol=mirror_rtol)
    h = chains.realize(spec)
    lam = np.linalg.eigvalsh(chains.excitation_block(h))
    gaps = np.diff(lam)
    phases = gaps * tau_ns
    ints = np.round((phases / math.pi - 1.0) / 2.0).astype(int)
    residuals = np.abs(phases - (2 * ints + 1) * math.pi)
    spacing_ok = bool(np.all(ints >= 0) and np.all(residuals < spacing_tol))
    return PstConditionReport(
        mirror_ok=mirror_ok,
        max_asymmetry=spec.mirror_asymmetry(),
        spacing_ok=spacing_ok,
        spacing_integers=tuple(int(i) for i in ints),
        max_spacing_residual=float(residuals.max()),
        tau_ns=float(tau_ns),
    )


def _v_matrix(n_sites: int, theta_rad: float) -> np.ndarray:
    s, c = math.sin(theta_rad), math.cos(theta_rad)
    v = np.zeros((n_sites, n_sites))
    if n_sites % 2 == 1:
        mid = (n_sites - 1) // 2
        for i in range(n_sites):
            if i < mid:
                v[i, i] = s
            elif i == mid:
                v[i, i] = 1.0
            else:
                v[i, i] = -s
            if i != mid:
                v[i, n_sites - 1 - i] = c
    else:
        half = n_sites // 2
        for i in range(n_sites):
            v[i, i] = s if i < half else -s
            v[i, n_sites - 1 - i] = c
    return v


def fst_transform(n_sites: int, theta_rad: float) -> FstTransform:
    """Build V, the mirror flip R, and the evolution pattern Q = V R V."""
    if n_sites < 2:
        raise SpecError("need at least 2 sites")
    v = _v_matrix(n_sites, theta_rad)
    r = np.fliplr(np.eye(n_sites))
    q = v @ r @ v
    return FstTransform(v=v, r=r, q=q, theta_rad=theta_rad)


def transfer_time(f_j_mhz: float) -> float:
    """Transfer time tau = pi / J in ns, i.e. 500 / f_J[MHz]."""
    return transfer_time_ns(f_j_mhz)
