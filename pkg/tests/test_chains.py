"""Chain and lattice builders: parameter formulas, symmetry, serialization."""

import numpy as np
import pytest

from spinxfer import chains
from spinxfer.errors import SpecError


def test_line_parameters():
    spec = chains.build_line(5, 9.0)
    assert spec.n_sites == 5
    np.testing.assert_allclose(spec.frequencies_mhz, np.zeros(5), atol=1e-12)
    n = np.arange(1, 5)
    expected = 0.5 * 9.0 * np.sqrt(n * (5 - n))
    np.testing.assert_allclose(spec.couplings_mhz, expected, rtol=1e-12)
    assert spec.meta.kind == "line"
    assert spec.meta.f_j_mhz == 9.0


def test_line_is_mirror_symmetric():
    for n in (2, 3, 6, 9):
        assert chains.build_line(n, 4.0).is_mirror_symmetric()


def test_zigzag_m0_equals_line():
    line = chains.build_line(7, 5.0)
    zig = chains.build_zigzag(7, 0, 5.0)
    np.testing.assert_allclose(zig.frequencies, line.frequencies, atol=1e-15)
    np.testing.assert_allclose(zig.couplings, line.couplings, rtol=1e-12)


def test_zigzag_even_site_pedestal():
    m, f_j = 4, 9.0
    spec = chains.build_zigzag(5, m, f_j)
    freqs = spec.frequencies_mhz
    np.testing.assert_allclose(freqs[1::2], 2.0 * m * f_j, rtol=1e-12)
    np.testing.assert_allclose(freqs[0::2], 0.0, atol=1e-12)
    assert spec.is_mirror_symmetric()


def test_zigzag_coupling_formula():
    n_sites, m, f_j = 5, 3, 8.0
    spec = chains.build_zigzag(n_sites, m, f_j)
    for n in range(1, n_sites):
        mu_n = 1 if n % 2 == 1 else 0
        mu_n1 = 1 if (n + 1) % 2 == 1 else 0
        expected = 0.5 * f_j * np.sqrt(
            (n + mu_n * 2 * m) * (n_sites - n + mu_n1 * 2 * m)
        )
        assert spec.couplings_mhz[n - 1] == pytest.approx(expected, rel=1e-12)


def test_fst_odd_center_pair_scaling():
    theta = np.pi / 8
    base = chains.build_zigzag(5, 2, 9.0)
    deformed = chains.apply_fst_deformation(base, theta)
    c, s = np.cos(theta), np.sin(theta)
    mid = base.couplings_mhz
    got = deformed.couplings_mhz
    assert got[1] == pytest.approx(mid[1] * (c + s), rel=1e-12)
    assert got[2] == pytest.approx(mid[2] * (c - s), rel=1e-12)
    np.testing.assert_allclose(got[[0, 3]], mid[[0, 3]], rtol=1e-12)
    np.testing.assert_allclose(deformed.frequencies, base.frequencies, atol=1e-15)
    assert deformed.meta.theta_rad == pytest.approx(theta)


def test_fst_even_center_coupling_and_split():
    theta = np.pi / 8
    base = chains.build_line(4, 6.0)
    deformed = chains.apply_fst_deformation(base, theta)
    j_mid = base.couplings_mhz[1]
    assert deformed.couplings_mhz[1] == pytest.approx(
        j_mid * np.cos(2 * theta), rel=1e-12
    )
    split = np.sin(2 * theta) * j_mid
    assert deformed.frequencies_mhz[1] == pytest.approx(-split, rel=1e-12)
    assert deformed.frequencies_mhz[2] == pytest.approx(split, rel=1e-12)


def test_fst_theta_zero_is_identity():
    base = chains.build_zigzag(5, 1, 7.0)
    same = chains.apply_fst_deformation(base, 0.0)
    np.testing.assert_allclose(same.couplings, base.couplings, rtol=1e-15)
    np.testing.assert_allclose(same.frequencies, base.frequencies, atol=1e-15)


def test_fst_requires_mirror_symmetry():
    spec = chains.as_custom([0.0, 1.0, 0.0], [3.0, 4.0])
    with pytest.raises(SpecError):
        chains.apply_fst_deformation(spec, np.pi / 8)


def test_fst_is_isospectral():
    base = chains.build_zigzag(5, 2, 9.0)
    deformed = chains.apply_fst_deformation(base, np.pi / 8)
    ev_base = np.linalg.eigvalsh(chains.realize(base).matrix)
    ev_def = np.linalg.eigvalsh(chains.realize(deformed).matrix)
    np.testing.assert_allclose(ev_def, ev_base, atol=1e-10)


def test_effective_limit_parameters():
    spec = chains.build_effective_limit(5, 9.0)
    assert spec.n_sites == 3
    np.testing.assert_allclose(spec.frequencies_mhz, -9.0 * np.ones(3), rtol=1e-12)
    n = np.arange(1, 3)
    expected = -0.5 * 9.0 * np.sqrt(n * (3 - n))
    np.testing.assert_allclose(spec.couplings_mhz, expected, rtol=1e-12)


def test_effective_limit_rejects_even_input():
    with pytest.raises(SpecError):
        chains.build_effective_limit(4, 9.0)
    with pytest.raises(SpecError):
        chains.build_effective_limit(1, 9.0)


def test_lattice_frequency_flattening():
    lat = chains.build_lattice(3, 3, 1, 9.0)
    assert lat.n_sites == 9
    row_f = lat.row_chain.frequencies_mhz
    col_f = lat.col_chain.frequencies_mhz
    h = chains.realize(lat)
    diag = np.real(np.diag(h.matrix))[1:] / (2 * np.pi * 1e-3)
    for r in range(3):
        for c in range(3):
            idx = r * 3 + c
            assert diag[idx] == pytest.approx(row_f[c] + col_f[r], rel=1e-9)


def test_lattice_bond_structure():
    lat = chains.build_lattice(2, 3, 0, 4.0)
    h = chains.realize(lat).matrix
    block = h[1:, 1:]
    # horizontal neighbors couple, vertical neighbors couple, diagonals do not
    assert abs(block[0, 1]) > 0
    assert abs(block[0, 3]) > 0
    assert block[0, 4] == pytest.approx(0.0, abs=1e-15)


def test_realize_single_excitation_shape():
    spec = chains.build_line(4, 5.0)
    h = chains.realize(spec)
    assert h.matrix.shape == (5, 5)
    np.testing.assert_allclose(h.matrix[0, :], 0.0, atol=1e-15)
    np.testing.assert_allclose(h.matrix[:, 0], 0.0, atol=1e-15)
    np.testing.assert_allclose(h.matrix, h.matrix.conj().T, atol=1e-15)


def test_realize_full_basis_matches_block():
    spec = chains.build_zigzag(3, 1, 6.0)
    single = chains.realize(spec).matrix
    full = chains.realize(spec, chains.BASIS_FULL).matrix
    assert full.shape == (8, 8)
    # the one-excitation rows of the full matrix reproduce the block
    idx = [1 << k for k in range(3)]
    sub = full[np.ix_(idx, idx)]
    np.testing.assert_allclose(sub, single[1:, 1:], atol=1e-12)
    assert full[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_excitation_block_strips_vacuum():
    spec = chains.build_line(3, 5.0)
    h = chains.realize(spec)
    block = chains.excitation_block(h)
    np.testing.assert_allclose(block, h.matrix[1:, 1:], atol=1e-15)


def test_json_round_trip_chain_kinds():
    specs = [
        chains.build_line(4, 5.5),
        chains.build_zigzag(5, 3, 9.0),
        chains.apply_fst_deformation(chains.build_zigzag(5, 2, 9.0), np.pi / 8),
        chains.build_effective_limit(7, 8.0),
        chains.as_custom([0.0, 2.0, 0.0], [3.0, 3.0]),
    ]
    for spec in specs:
        back = chains.from_json_dict(chains.to_json_dict(spec))
        assert back.n_sites == spec.n_sites
        # serialized parameters are MHz values rounded to 6 decimals
        np.testing.assert_allclose(
            back.frequencies_mhz, spec.frequencies_mhz, atol=1.1e-6
        )
        np.testing.assert_allclose(
            back.couplings_mhz, spec.couplings_mhz, atol=1.1e-6
        )
        assert back.meta.kind == spec.meta.kind


def test_json_round_trip_lattice():
    lat = chains.build_lattice(3, 3, 2, 9.0, np.pi / 8)
    back = chains.from_json_dict(chains.to_json_dict(lat))
    assert back.rows == lat.rows and back.cols == lat.cols
    np.testing.assert_allclose(
        back.row_chain.couplings_mhz, lat.row_chain.couplings_mhz, atol=1.1e-6
    )
    np.testing.assert_allclose(
        back.col_chain.frequencies_mhz, lat.col_chain.frequencies_mhz, atol=1.1e-6
    )


def test_json_text_round_trip():
    spec = chains.build_zigzag(5, 1, 9.0)
    back = chains.from_json(chains.to_json(spec))
    np.testing.assert_allclose(back.couplings_mhz, spec.couplings_mhz, atol=1.1e-6)


def test_with_parameters_replaces_and_marks_custom():
    spec = chains.build_line(3, 5.0)
    freqs = spec.frequencies + 1.0
    out = chains.with_parameters(spec, frequencies=freqs)
    np.testing.assert_allclose(out.frequencies, freqs, atol=1e-15)
    np.testing.assert_allclose(out.couplings, spec.couplings, atol=1e-15)


def test_invalid_chain_construction():
    with pytest.raises(SpecError):
        chains.build_line(1, 5.0)
    with pytest.raises(SpecError):
        chains.as_custom([0.0, 0.0], [1.0, 2.0])
    with pytest.raises(SpecError):
        chains.ChainMeta("no-such-kind")
