"""Chain and lattice model construction.

Builders produce `ChainSpec`/`LatticeSpec` records holding site frequencies
and nearest-neighbor couplings for the transfer Hamiltonians used throughout
the package:

- line chain: resonant sites, couplings J_n = (J/2) sqrt(n (N - n));
- zig-zag chain: even sites raised by a 2mJ pedestal, couplings
  J_n(m) = (J/2) sqrt((n + mu_n 2m)(N - n + mu_{n+1} 2m)) with mu_n = 1 for
  odd n and 0 for even n;
- FST deformation: an isospectral twist of the two central couplings (odd N)
  or of the central coupling and frequencies (even N) that splits the
  transferred excitation between the chain ends;
- effective limit: the odd-site model the zig-zag chain approaches as m
  grows;
- 2D lattice: a Kronecker sum of two chains.

Internally all frequencies and couplings are angular (rad/ns); constructors
and serialization speak ordinary-frequency MHz. `realize` turns a spec into
an explicit Hermitian matrix on the vacuum-plus-single-excitation basis or,
for small systems, the full 2^N space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import SpecError
from .units import ANG_PER_MHZ

KIND_LINE = "line"
KIND_ZIGZAG = "zigzag"
KIND_FST = "fst"
KIND_EFFECTIVE = "effective"
KIND_CUSTOM = "custom"
_KINDS = (KIND_LINE, KIND_ZIGZAG, KIND_FST, KIND_EFFECTIVE, KIND_CUSTOM)

BASIS_SINGLE = "single_excitation"
BASIS_FULL = "full"

FULL_SPACE_MAX_SITES = 12

_MIRROR_RTOL = 1e-9


@dataclass(frozen=True)
class ChainMeta:
    """Construction record carried along with a chain."""

    kind: str
    m: int | None = None
    f_j_mhz: float | None = None
    theta_rad: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise SpecError(f"unknown chain kind {self.kind!r}")


@dataclass(frozen=True)
class ChainSpec:
    """A 1D chain: N site frequencies and N-1 couplings, in rad/ns."""

    n_sites: int
    frequencies: np.ndarray
    couplings: np.ndarray
    meta: ChainMeta

    def __post_init__(self) -> None:
        freqs = np.asarray(self.frequencies, dtype=float)
        coups = np.asarray(self.couplings, dtype=float)
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "couplings", coups)
        if self.n_sites < 2:
            raise SpecError("a chain needs at least 2 sites")
        if freqs.shape != (self.n_sites,):
            raise SpecError(
                f"expected {self.n_sites} frequencies, got {freqs.shape}"
            )
        if coups.shape != (self.n_sites - 1,):
            raise SpecError(
                f"expected {self.n_sites - 1} couplings, got {coups.shape}"
            )
        if not (np.isfinite(freqs).all() and np.isfinite(coups).all()):
            raise SpecError("frequencies and couplings must be finite")

    @property
    def frequencies_mhz(self) -> np.ndarray:
        return self.frequencies / ANG_PER_MHZ

    @property
    def couplings_mhz(self) -> np.ndarray:
        return self.couplings / ANG_PER_MHZ

    def mirror_asymmetry(self) -> float:
        """Max residual of the mirror conditions w_n = w_{N+1-n}, J_n^2 = J_{N-n}^2.

        Both residuals are reported in rad/ns (coupling magnitudes are
        compared, which is equivalent to comparing J^2).
        """
        df = np.abs(self.frequencies - self.frequencies[::-1])
        aj = np.abs(self.couplings)
        dj = np.abs(aj - aj[::-1])
        return float(max(df.max(), dj.max()))

    def is_mirror_symmetric(self, rtol: float = _MIRROR_RTOL) -> bool:
        scale = max(
            float(np.max(np.abs(self.frequencies))),
            float(np.max(np.abs(self.couplings))),
            1e-30,
        )
        return self.mirror_asymmetry() <= rtol * scale


@dataclass(frozen=True)
class LatticeSpec:
    """A rows x cols grid built from two chains via a Kronecker sum.

    Site (r, c) has frequency col_chain.w_r + row_chain.w_c; horizontal
    couplings come from row_chain, vertical couplings from col_chain.
    """

    rows: int
    cols: int
    row_chain: ChainSpec = field(repr=False)
    col_chain: ChainSpec = field(repr=False)

    def __post_init__(self) -> None:
        if self.row_chain.n_sites != self.cols:
            raise SpecError("row_chain length must equal cols")
        if self.col_chain.n_sites != self.rows:
            raise SpecError("col_chain length must equal rows")

    @property
    def n_sites(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class HamiltonianMatrix:
    """Dense Hermitian matrix with an explicit basis."""

    basis: str
    matrix: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=complex)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "labels", tuple(self.labels))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise SpecError("matrix must be square")
        if len(self.labels) != m.shape[0]:
            raise SpecError("labels must match matrix dimension")
        scale = float(np.max(np.abs(m))) or 1.0
        if float(np.max(np.abs(m - m.conj().T))) > 1e-12 * scale:
            raise SpecError("matrix is not Hermitian")


def _zigzag_mu(n: int) -> int:
    # mu_n = 1 for odd site index n (1-based), 0 for even
    return n % 2


def build_line(n_sites: int, f_j_mhz: float) -> ChainSpec:
    """Line configuration: resonant sites, J_n = (J/2) sqrt(n (N - n))."""
    if n_sites < 2:
        raise SpecError("line chain needs n_sites >= 2")
    if f_j_mhz <= 0:
        raise SpecError("coupling scale must be positive")
    j = f_j_mhz * ANG_PER_MHZ
    n = np.arange(1, n_sites)
    couplings = 0.5 * j * np.sqrt(n * (n_sites - n))
    freqs = np.zeros(n_sites)
    return ChainSpec(n_sites, freqs, couplings, ChainMeta(KIND_LINE, 0, f_j_mhz))


def build_zigzag(n_sites: int, m: int, f_j_mhz: float) -> ChainSpec:
    """Zig-zag configuration with gap parameter m.

    Even sites carry the 2mJ pedestal; odd sites stay at zero. This is the
    convention under which the single-excitation spectrum equals
    {-(N-1)/2, ..., -1, 0, 2m+1, ..., 2m+(N-1)/2} in units of J (the trace
    identity sum(w) = m (N-1) J pins the pedestal to the (N-1)/2 even
    sites). m = 0 reduces to the line configuration exactly.
    """
    if n_sites < 3 or n_sites % 2 == 0:
        raise SpecError("zig-zag chain needs odd n_sites >= 3")
    if m < 0 or int(m) != m:
        raise SpecError("m must be a non-negative integer")
    if f_j_mhz <= 0:
        raise SpecError("coupling scale must be positive")
    m = int(m)
    j = f_j_mhz * ANG_PER_MHZ
    freqs = np.array(
        [(1 - _zigzag_mu(n)) * 2 * m * j for n in range(1, n_sites + 1)]
    )
    couplings = np.array(
        [
            0.5
            * j
            * math.sqrt(
                (n + _zigzag_mu(n) * 2 * m)
                * (n_sites - n + _zigzag_mu(n + 1) * 2 * m)
            )
            for n in range(1, n_sites)
        ]
    )
    return ChainSpec(
        n_sites, freqs, couplings, ChainMeta(KIND_ZIGZAG, m, f_j_mhz)
    )


def apply_fst_deformation(spec: ChainSpec, theta_rad: float) -> ChainSpec:
    """Isospectral center deformation splitting the transfer between the ends.

    Odd N rescales the two central couplings by cos(theta) +- sin(theta);
    even N rescales the central coupling by cos(2 theta) and splits the two
    central frequencies by -+ sin(2 theta) J_mid. The input must be
    mirror-symmetric.
    """
    if not spec.is_mirror_symmetric():
        raise SpecError("FST deformation requires a mirror-symmetric chain")
    n = spec.n_sites
    freqs = spec.frequencies.copy()
    coups = spec.couplings.copy()
    if n % 2 == 1:
        left = (n - 1) // 2 - 1  # 0-based index of coupling J_{(N-1)/2}
        right = left + 1
        coups[left] *= math.cos(theta_rad) + math.sin(theta_rad)
        coups[right] *= math.cos(theta_rad) - math.sin(theta_rad)
    else:
        mid = n // 2 - 1  # 0-based index of coupling J_{N/2}
        j_mid = coups[mid]
        coups[mid] = math.cos(2 * theta_rad) * j_mid
        freqs[n // 2 - 1] -= math.sin(2 * theta_rad) * j_mid
        freqs[n // 2] += math.sin(2 * theta_rad) * j_mid
    return ChainSpec(
        n,
        freqs,
        coups,
        ChainMeta(KIND_FST, spec.meta.m, spec.meta.f_j_mhz, theta_rad),
    )


def build_effective_limit(n_sites: int, f_j_mhz: float) -> ChainSpec:
    """Odd-site effective chain reached by the zig-zag model as m -> infinity.

    For an N-site zig-zag chain (N odd) the even sites freeze out and the
    (N+1)/2 odd sites form a line-like chain with uniform frequency
    -J (N-1)/4 and couplings -(J/2) sqrt(n' ((N+1)/2 - n')). The negative
    signs are kept as constructed; site-local sign flips are a gauge that
    leaves every population invariant.
    """
    if n_sites < 3 or n_sites % 2 == 0:
        raise SpecError("effective limit needs odd n_sites >= 3")
    if f_j_mhz <= 0:
        raise SpecError("coupling scale must be positive")
    j = f_j_mhz * ANG_PER_MHZ
    n_eff = (n_sites + 1) // 2
    freqs = np.full(n_eff, -j * (n_sites - 1) / 4.0)
    n = np.arange(1, n_eff)
    couplings = -0.5 * j * np.sqrt(n * (n_eff - n))
    return ChainSpec(
        n_eff, freqs, couplings, ChainMeta(KIND_EFFECTIVE, None, f_j_mhz)
    )


def build_lattice(
    rows: int,
    cols: int,
    m: int,
    f_j_mhz: float,
    theta_rad: float | None = None,
) -> LatticeSpec:
    """2D grid whose rows and columns are (optionally FST-deformed) chains.

    m = 0 uses line chains (any size >= 2); m > 0 requires odd rows/cols.
    """

    def one_dim(n: int) -> ChainSpec:
        spec = build_line(n, f_j_mhz) if m == 0 else build_zigzag(n, m, f_j_mhz)
        if theta_rad is not None:
            spec = apply_fst_deformation(spec, theta_rad)
        return spec

    return LatticeSpec(
        rows=rows, cols=cols, row_chain=one_dim(cols), col_chain=one_dim(rows)
    )


def as_custom(
    frequencies_mhz: Sequence[float], couplings_mhz: Sequence[float]
) -> ChainSpec:
    """Wrap explicit MHz parameter arrays into a ChainSpec of kind custom."""
    freqs = np.asarray(frequencies_mhz, dtype=float) * ANG_PER_MHZ
    coups = np.asarray(couplings_mhz, dtype=float) * ANG_PER_MHZ
    return ChainSpec(len(freqs), freqs, coups, ChainMeta(KIND_CUSTOM))


def _single_excitation_parts(
    spec: ChainSpec | LatticeSpec,
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Diagonal (frequencies) and coupling matrix of the excitation block."""
    if isinstance(spec, ChainSpec):
        diag = spec.frequencies.copy()
        n = spec.n_sites
        k = np.zeros((n, n))
        idx = np.arange(n - 1)
        k[idx, idx + 1] = spec.couplings
        k[idx + 1, idx] = spec.couplings
        labels = [f"s{i}" for i in range(1, n + 1)]
        return diag, k, labels
    rows, cols = spec.rows, spec.cols
    d_row, k_row, _ = _single_excitation_parts(spec.row_chain)
    d_col, k_col, _ = _single_excitation_parts(spec.col_chain)
    # site-major ordering: index (r-1) * cols + (c-1)
    diag = (d_col[:, None] + d_row[None, :]).ravel()
    k = np.kron(np.eye(rows), k_row) + np.kron(k_col, np.eye(cols))
    labels = [f"r{r}c{c}" for r in range(1, rows + 1) for c in range(1, cols + 1)]
    return diag, k, labels


def realize(
    spec: ChainSpec | LatticeSpec, basis: str = BASIS_SINGLE
) -> HamiltonianMatrix:
    """Materialize the XY Hamiltonian of a spec on the requested basis.

    The single-excitation basis is (vacuum, site 1, ..., site K) with the
    vacuum row and column identically zero; diagonal entries are the site
    frequencies and off-diagonal entries the couplings. The full basis
    enumerates all 2^K occupation states (K <= 12) with energies summed over
    excited sites.
    """
    diag, k, site_labels = _single_excitation_parts(spec)
    n = len(diag)
    if basis == BASIS_SINGLE:
        dim = n + 1
        h = np.zeros((dim, dim), dtype=complex)
        h[1:, 1:] = k + np.diag(diag)
        return HamiltonianMatrix(BASIS_SINGLE, h, ["vac", *site_labels])
    if basis != BASIS_FULL:
        raise SpecError(f"unknown basis {basis!r}")
    if n > FULL_SPACE_MAX_SITES:
        raise SpecError(
            f"full basis limited to {FULL_SPACE_MAX_SITES} sites, got {n}"
        )
    dim = 1 << n
    states = np.arange(dim)
    occ = ((states[:, None] >> np.arange(n)[None, :]) & 1).astype(float)
    h = np.zeros((dim, dim), dtype=complex)
    h[states, states] = occ @ diag
    # hop terms: connect states differing by moving one excitation across a bond
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if k[i, j] != 0.0]
    for i, j in pairs:
        mask_i, mask_j = 1 << i, 1 << j
        # states with site i excited, site j empty
        src = states[((states & mask_i) != 0) & ((states & mask_j) == 0)]
        dst = src ^ mask_i ^ mask_j
        h[dst, src] += k[i, j]
        h[src, dst] += k[i, j]
    labels = ["".join("1" if (s >> b) & 1 else "0" for b in range(n)) for s in states]
    return HamiltonianMatrix(BASIS_FULL, h, labels)


def excitation_block(h: HamiltonianMatrix) -> np.ndarray:
    """The K x K single-excitation block of a truncated-basis matrix."""
    if h.basis != BASIS_SINGLE:
        raise SpecError("excitation_block needs the single-excitation basis")
    return np.asarray(h.matrix[1:, 1:])


def realize_parts(
    spec: ChainSpec | LatticeSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """(frequency diagonal, coupling matrix) of the excitation block, rad/ns."""
    diag, k, _ = _single_excitation_parts(spec)
    return diag, k


def _round6(values: np.ndarray) -> list[float]:
    return [round(float(v), 6) for v in values]


def to_json_dict(spec: ChainSpec | LatticeSpec) -> dict:
    """JSON document with MHz parameters at 6 decimal digits."""
    if isinstance(spec, ChainSpec):
        return {
            "kind": spec.meta.kind,
            "n_sites": spec.n_sites,
            "frequencies_mhz": _round6(spec.frequencies_mhz),
            "couplings_mhz": _round6(spec.couplings_mhz),
            "m": spec.meta.m,
            "j_mhz": spec.meta.f_j_mhz,
            "theta_rad": spec.meta.theta_rad,
        }
    return {
        "kind": "lattice",
        "rows": spec.rows,
        "cols": spec.cols,
        "row_chain": to_json_dict(spec.row_chain),
        "col_chain": to_json_dict(spec.col_chain),
    }


def from_json_dict(doc: dict) -> ChainSpec | LatticeSpec:
    if doc.get("kind") == "lattice":
        row = from_json_dict(doc["row_chain"])
        col = from_json_dict(doc["col_chain"])
        assert isinstance(row, ChainSpec) and isinstance(col, ChainSpec)
        return LatticeSpec(doc["rows"], doc["cols"], row, col)
    freqs = np.asarray(doc["frequencies_mhz"], dtype=float) * ANG_PER_MHZ
    coups = np.asarray(doc["couplings_mhz"], dtype=float) * ANG_PER_MHZ
    meta = ChainMeta(
        doc["kind"],
        doc.get("m"),
        doc.get("j_mhz"),
        doc.get("theta_rad"),
    )
    return ChainSpec(doc["n_sites"], freqs, coups, meta)


def to_json(spec: ChainSpec | LatticeSpec) -> str:
    return json.dumps(to_json_dict(spec), indent=2)


def from_json(text: str) -> ChainSpec | LatticeSpec:
    return from_json_dict(json.loads(text))


def with_parameters(
    spec: ChainSpec,
    frequencies: np.ndarray | None = None,
    couplings: np.ndarray | None = None,
    kind: str = KIND_CUSTOM,
) -> ChainSpec:
    """Copy of a spec with replaced angular parameter arrays.

    The result is marked `custom` by default: a perturbed chain no longer
    satisfies any named family's defining identities. Original metadata
    (m, J, theta) is preserved for provenance.
    """
    return replace(
        spec,
        frequencies=spec.frequencies if frequencies is None else frequencies,
        couplings=spec.couplings if couplings is None else couplings,
        meta=replace(spec.meta, kind=kind),
    )
