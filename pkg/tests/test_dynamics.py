"""Pulses, schedules, unitary and dissipative propagation."""

import dataclasses

import numpy as np
import pytest
import scipy.integrate
import scipy.linalg

from spinxfer import chains, dynamics, metrics, noise, units
from spinxfer.errors import ResolutionError, SpecError


# ---------------------------------------------------------------------------
# pulses


def test_pulse_shape_validation():
    with pytest.raises(SpecError):
        dynamics.PulseShape(0.0, 7.5, 10.0, 1.0)
    with pytest.raises(SpecError):
        dynamics.PulseShape(1.0, 0.0, 10.0, 1.0)
    with pytest.raises(SpecError):
        dynamics.PulseShape(1.0, 7.5, -1.0, 1.0)


def test_flattop_gaussian_envelope_values():
    shape = dynamics.PulseShape(2.0, 7.5, 20.0, 3.0)
    assert dynamics.flattop_gaussian(-1.0, shape) == 0.0
    assert dynamics.flattop_gaussian(0.5, shape) == 0.0
    assert dynamics.flattop_gaussian(7.5, shape) == pytest.approx(3.0)
    assert dynamics.flattop_gaussian(17.5, shape) == pytest.approx(3.0)
    assert dynamics.flattop_gaussian(27.5, shape) == pytest.approx(3.0)
    assert dynamics.flattop_gaussian(40.0, shape) == 0.0
    # rising edge is strictly between 0 and the plateau value
    mid = dynamics.flattop_gaussian(6.5, shape)
    assert 0.0 < mid < 3.0


def test_edge_area_matches_numerical_integral():
    for sigma, buffer in ((1.25, 7.5), (2.0, 7.5), (3.0, 5.0)):
        shape = dynamics.PulseShape(sigma, buffer, 10.0, 1.0)
        num, _ = scipy.integrate.quad(
            lambda t: dynamics.flattop_gaussian(t, shape), 0.0, buffer, limit=200
        )
        assert dynamics.edge_area_ns(shape) == pytest.approx(num, abs=1e-9)


def test_transfer_schedule_coupling_pulses_are_equal_area():
    spec = chains.build_zigzag(5, 2, 9.0)
    tau = units.transfer_time_ns(9.0)
    sched = dynamics.transfer_schedule(spec)
    shape = sched.coupling_shapes[0]
    area = 2.0 * dynamics.edge_area_ns(shape) + shape.plateau_ns
    assert area == pytest.approx(tau, rel=1e-12)


def test_transfer_schedule_nests_frequencies_around_couplings():
    spec = chains.build_zigzag(5, 2, 9.0)
    sched = dynamics.transfer_schedule(spec)
    f = sched.frequency_shapes[0]
    c = sched.coupling_shapes[0]
    f_lo = sched.frequency_offset_ns + f.buffer_ns
    f_hi = f_lo + f.plateau_ns
    c_lo = sched.coupling_offset_ns + c.buffer_ns
    c_hi = c_lo + c.plateau_ns
    assert c_lo - f_lo == pytest.approx(dynamics.FREQUENCY_LEAD_NS)
    assert f_hi - c_hi == pytest.approx(dynamics.FREQUENCY_LEAD_NS)
    lo, hi = sched.static_window()
    assert (lo, hi) == pytest.approx((c_lo, c_hi))


def test_transfer_schedule_rejects_short_tau():
    spec = chains.build_line(3, 9.0)
    with pytest.raises(SpecError):
        dynamics.transfer_schedule(spec, tau_ns=1.0)


def test_schedule_serialization_round_trip():
    spec = chains.build_zigzag(5, 1, 9.0)
    sched = dynamics.transfer_schedule(spec)
    doc = sched.to_json_dict()
    assert doc["n_sites"] == 5
    assert len(doc["frequency_shapes"]) == 5
    assert len(doc["coupling_shapes"]) == 4


# ---------------------------------------------------------------------------
# states


def test_site_state_and_vacuum_state():
    psi = dynamics.site_state(4, 2)
    assert psi.dim == 5
    assert psi.data[2] == 1.0
    vac = dynamics.vacuum_state(4)
    assert vac.data[0] == 1.0
    full = dynamics.site_state(3, 3, basis=chains.BASIS_FULL)
    assert full.dim == 8
    assert full.data[4] == 1.0  # site 3 -> bit 2


def test_site_state_validation():
    with pytest.raises(SpecError):
        dynamics.site_state(4, 0)
    with pytest.raises(SpecError):
        dynamics.site_state(4, 5)
    with pytest.raises(SpecError):
        dynamics.site_state(4, 1, basis="no-such-basis")


def test_quantum_state_shape_checks():
    with pytest.raises(SpecError):
        dynamics.QuantumState(np.zeros(3), chains.BASIS_SINGLE, 4)


# ---------------------------------------------------------------------------
# unitary propagation


def test_evolve_unitary_matches_expm():
    rng = np.random.default_rng(11)
    spec = chains.as_custom(rng.normal(scale=3.0, size=4), rng.uniform(2, 8, 3))
    h = chains.realize(spec)
    psi0 = dynamics.site_state(4, 1)
    t = 37.0
    out = dynamics.evolve_unitary(h, psi0, t)
    u = scipy.linalg.expm(-1j * h.matrix * t)
    np.testing.assert_allclose(out.data, u @ psi0.data, atol=1e-10)
    assert np.linalg.norm(out.data) == pytest.approx(1.0, abs=1e-12)


def test_evolve_unitary_density_matrix():
    spec = chains.build_line(3, 5.0)
    h = chains.realize(spec)
    psi = dynamics.site_state(3, 1)
    rho0 = dynamics.QuantumState(
        np.outer(psi.data, psi.data.conj()), psi.basis, 3
    )
    t = 20.0
    out_rho = dynamics.evolve_unitary(h, rho0, t)
    out_psi = dynamics.evolve_unitary(h, psi, t)
    np.testing.assert_allclose(
        out_rho.data, np.outer(out_psi.data, out_psi.data.conj()), atol=1e-12
    )


def test_evolve_unitary_basis_mismatch():
    h = chains.realize(chains.build_line(3, 5.0))
    psi = dynamics.site_state(3, 1, basis=chains.BASIS_FULL)
    with pytest.raises(SpecError):
        dynamics.evolve_unitary(h, psi, 1.0)


def test_line_transfer_is_perfect_at_tau():
    f_j = 9.0
    spec = chains.build_line(6, f_j)
    h = chains.realize(spec)
    psi0 = dynamics.site_state(6, 1)
    out = dynamics.evolve_unitary(h, psi0, units.transfer_time_ns(f_j))
    assert abs(out.data[6]) ** 2 == pytest.approx(1.0, abs=1e-12)


def test_analytic_three_site_matches_unitary():
    rng = np.random.default_rng(5)
    for _ in range(50):
        delta = rng.uniform(-40, 40)
        j = rng.uniform(1, 15)
        t = rng.uniform(0, 300)
        spec = chains.as_custom([0.0, delta, 0.0], [j, j])
        h = chains.realize(spec)
        out = dynamics.evolve_unitary(h, dynamics.site_state(3, 1), t)
        pops = out.populations()
        p1, p2, p3 = dynamics.analytic_three_site(delta, j, t)
        np.testing.assert_allclose(pops, [p1, p2, p3], atol=1e-10)


# ---------------------------------------------------------------------------
# pulsed propagation


def _fst5():
    return chains.apply_fst_deformation(chains.build_zigzag(5, 2, 9.0), np.pi / 8)


def test_evolve_pulsed_conserves_norm_and_reaches_balance():
    spec = _fst5()
    sched = dynamics.transfer_schedule(spec)
    traj = dynamics.evolve_pulsed(sched, spec, dynamics.site_state(5, 1))
    np.testing.assert_allclose(traj.trace(), 1.0, atol=1e-9)
    pops = traj.populations()[-1]
    assert pops[0] == pytest.approx(0.5, abs=0.02)
    assert pops[4] == pytest.approx(0.5, abs=0.02)


def test_evolve_pulsed_dt_halving_converged():
    spec = _fst5()
    base = dynamics.transfer_schedule(spec)
    half = dataclasses.replace(base, dt_ns=base.dt_ns / 2)
    a = dynamics.evolve_pulsed(base, spec, dynamics.site_state(5, 1), keep=dynamics.KEEP_FINAL)
    b = dynamics.evolve_pulsed(half, spec, dynamics.site_state(5, 1), keep=dynamics.KEEP_FINAL)
    np.testing.assert_allclose(
        a.final_state.populations(), b.final_state.populations(), atol=1e-8
    )


def test_evolve_pulsed_rejects_coarse_dt():
    spec = _fst5()
    sched = dataclasses.replace(dynamics.transfer_schedule(spec), dt_ns=5.0)
    with pytest.raises(ResolutionError):
        dynamics.evolve_pulsed(sched, spec, dynamics.site_state(5, 1))


def test_keep_final_matches_keep_all():
    spec = _fst5()
    sched = dynamics.transfer_schedule(spec)
    full = dynamics.evolve_pulsed(sched, spec, dynamics.site_state(5, 1))
    last = dynamics.evolve_pulsed(
        sched, spec, dynamics.site_state(5, 1), keep=dynamics.KEEP_FINAL
    )
    np.testing.assert_allclose(
        full.final_state.populations(), last.final_state.populations(), atol=1e-9
    )
    assert len(last.times_ns) == 2  # initial and final frames


def test_mirror_twin_pulsed_transfer():
    # launching from the far end of the mirrored chain gives the mirrored pops
    spec = _fst5()
    sched = dynamics.transfer_schedule(spec)
    fwd = dynamics.evolve_pulsed(sched, spec, dynamics.site_state(5, 1))
    mirror = chains.with_parameters(
        spec, spec.frequencies[::-1], spec.couplings[::-1]
    )
    sched_m = dynamics.transfer_schedule(mirror, tau_ns=units.transfer_time_ns(9.0))
    bwd = dynamics.evolve_pulsed(sched_m, mirror, dynamics.site_state(5, 5))
    np.testing.assert_allclose(
        fwd.populations()[-1], bwd.populations()[-1][::-1], atol=1e-10
    )


# ---------------------------------------------------------------------------
# dissipative propagation


def test_lindblad_without_channels_matches_pulsed():
    spec = _fst5()
    sched = dynamics.transfer_schedule(spec)
    psi0 = dynamics.site_state(5, 1)
    pure = dynamics.evolve_pulsed(sched, spec, psi0)
    diss = dynamics.evolve_lindblad(sched, spec, psi0, None)
    np.testing.assert_allclose(
        pure.populations(), diss.populations(), atol=1e-6
    )


def test_lindblad_trace_and_purity():
    spec = _fst5()
    sched = dynamics.transfer_schedule(spec)
    channels = noise.NoiseChannelSet(t1_us=16.0, t2_us=0.75)
    traj = dynamics.evolve_lindblad(sched, spec, dynamics.site_state(5, 1), channels)
    np.testing.assert_allclose(traj.trace(), 1.0, atol=1e-8)
    purity = traj.purity()
    assert np.all(purity <= 1.0 + 1e-9)
    assert purity[-1] < purity[0]
    assert np.all(traj.populations() >= -1e-10)


def test_lindblad_t1_closed_form():
    # isolated site: excitation decays at exactly exp(-t / T1)
    spec = chains.as_custom([0.0, 0.0], [1e-9])
    tau = 200.0
    sched = dynamics.transfer_schedule(spec, tau_ns=tau)
    t1_us = 5.0
    channels = noise.NoiseChannelSet(t1_us=t1_us)
    traj = dynamics.evolve_lindblad(sched, spec, dynamics.site_state(2, 1), channels)
    times = traj.times_ns
    expected = np.exp(-times / (t1_us * 1000.0))
    np.testing.assert_allclose(traj.populations()[:, 0], expected, atol=1e-6)


def test_lindblad_full_basis_matches_block_engine():
    spec = chains.apply_fst_deformation(chains.build_zigzag(3, 1, 9.0), np.pi / 8)
    sched = dynamics.transfer_schedule(spec)
    channels = noise.NoiseChannelSet(t1_us=16.0, t2_us=0.75)
    block = dynamics.evolve_lindblad(
        sched, spec, dynamics.site_state(3, 1), channels, keep=dynamics.KEEP_FINAL
    )
    full = dynamics.evolve_lindblad(
        sched,
        spec,
        dynamics.site_state(3, 1, basis=chains.BASIS_FULL),
        channels,
        basis=chains.BASIS_FULL,
        keep=dynamics.KEEP_FINAL,
    )
    np.testing.assert_allclose(
        block.final_state.populations(), full.final_state.populations(), atol=1e-6
    )


def test_trajectory_interface():
    spec = _fst5()
    sched = dynamics.transfer_schedule(spec)
    traj = dynamics.evolve_pulsed(sched, spec, dynamics.site_state(5, 1))
    assert np.all(np.diff(traj.times_ns) > 0)
    assert traj.populations().shape == (len(traj.times_ns), 5)
    state = traj.state(0)
    np.testing.assert_allclose(state.populations(), [1, 0, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(
        traj.final_state.populations(), traj.populations()[-1], atol=1e-12
    )


# ---------------------------------------------------------------------------
# solution space


def test_solution_space_populations_sum_to_one():
    p1, p2, p3 = dynamics.analytic_three_site(
        np.linspace(-30, 60, 7)[:, None], np.linspace(3, 16, 5)[None, :], 60.0
    )
    np.testing.assert_allclose(p1 + p2 + p3, 1.0, atol=1e-12)


def test_solution_space_finds_fundamental_bright_spot():
    tau = 60.0
    f_eff = 1000.0 / (2.0 * tau)
    smap = dynamics.sweep_solution_space(
        tau, np.arange(-5.0, 5.0 + 0.25, 0.25), np.arange(4.0, 8.0 + 0.05, 0.05)
    )
    spots = dynamics.find_bright_spots(smap, threshold=0.9)
    assert spots, "no bright spot found"
    best = max(spots, key=lambda s: s.p3)
    # m = 0 solution: resonant line chain, J_12 = f_eff * sqrt(2)/2 ... the
    # three-site chain transfers perfectly at J = f_eff / sqrt(2)
    assert best.delta_mhz == pytest.approx(0.0, abs=0.05)
    assert best.coupling_mhz == pytest.approx(f_eff / np.sqrt(2.0), abs=0.05)
    assert best.p3 > 0.999


def test_sweep_solution_space_three_sites_only():
    with pytest.raises(SpecError):
        dynamics.sweep_solution_space(60.0, [0.0], [5.0], n_sites=5)
