"""Synthetic device, calibration loop, transfer cost, and optimizers."""

import numpy as np
import pytest

import spinxfer as sx
from spinxfer import calibration as cal
from spinxfer import units
from spinxfer.errors import CostEvaluationError, DegenerateSecantError, SpecError


def _ideal_device(n_qubits=5, seed=3):
    return cal.DeviceModel(
        n_qubits,
        seed=seed,
        crosstalk_nn=0.0,
        crosstalk_next=0.0,
        measurement_noise_mhz=0.0,
        coefficient_spread=0.0,
    )


# ---------------------------------------------------------------------------
# device model


def test_nominal_maps_and_slopes():
    z = 0.7
    assert cal.DeviceModel.nominal_frequency(z) == pytest.approx(48.0 * z + 7.0 * z**3)
    assert cal.DeviceModel.nominal_coupling(z) == pytest.approx(
        25.0 + 10.0 * z + 1.5 * z**3
    )
    eps = 1e-7
    fd = (
        cal.DeviceModel.nominal_frequency(z + eps)
        - cal.DeviceModel.nominal_frequency(z - eps)
    ) / (2 * eps)
    assert cal.DeviceModel.nominal_frequency_slope(z) == pytest.approx(fd, rel=1e-6)
    jd = (
        cal.DeviceModel.nominal_coupling(z + eps)
        - cal.DeviceModel.nominal_coupling(z - eps)
    ) / (2 * eps)
    assert cal.DeviceModel.nominal_coupling_slope(z) == pytest.approx(jd, rel=1e-6)


def test_nominal_inverse_round_trip():
    device = cal.DeviceModel(3)
    for z in (-1.2, -0.4, 0.0, 0.9):
        f = cal.DeviceModel.nominal_frequency(z)
        assert device.nominal_zpa_for_frequency(f) == pytest.approx(z, abs=1e-10)
        j = cal.DeviceModel.nominal_coupling(z)
        assert device.nominal_zpa_for_coupling(j) == pytest.approx(z, abs=1e-10)
    with pytest.raises(SpecError):
        device.nominal_zpa_for_frequency(1e6)


def test_device_validation():
    with pytest.raises(SpecError):
        cal.DeviceModel(1)
    with pytest.raises(SpecError):
        cal.DeviceModel(3, coefficient_spread=0.2)
    with pytest.raises(SpecError):
        cal.DeviceModel(3, zpa_range=(1.0, -1.0))
    with pytest.raises(SpecError):
        cal.DeviceModel(3, crosstalk_nn=0.4, crosstalk_next=0.2)
    device = cal.DeviceModel(3)
    with pytest.raises(SpecError):
        device.realized_frequencies(np.zeros(4))
    with pytest.raises(SpecError):
        device.realized_frequencies(np.full(device.n_elements, 9.0))


def test_ideal_device_realizes_nominal_maps():
    device = _ideal_device(3)
    z = np.array([0.3, -0.5, 0.8, 0.2, -0.9])
    freqs = device.realized_frequencies(z)
    coups = device.realized_couplings(z)
    for q in range(3):
        assert freqs[q] == pytest.approx(cal.DeviceModel.nominal_frequency(z[q]))
    for c in range(2):
        assert coups[c] == pytest.approx(cal.DeviceModel.nominal_coupling(z[3 + c]))


def test_crosstalk_mixes_neighboring_lines():
    device = cal.DeviceModel(
        3, crosstalk_nn=0.03, crosstalk_next=0.01, coefficient_spread=0.0
    )
    # elements sit at positions [0, 2, 4, 1, 3]: unit drive on coupler 1
    # leaks 0.03 into both adjacent qubits and 0.01 into coupler 2
    z = np.zeros(5)
    z[3] = 1.0
    eff = device.effective_zpas(z)
    np.testing.assert_allclose(eff, [0.03, 0.03, 0.0, 1.0, 0.01], atol=1e-15)
    # unit drive on qubit 1 reaches qubit 2 at distance two
    z = np.zeros(5)
    z[0] = 1.0
    eff = device.effective_zpas(z)
    np.testing.assert_allclose(eff, [1.0, 0.01, 0.0, 0.03, 0.0], atol=1e-15)


def test_device_determinism_and_clone():
    z = np.linspace(-1.0, 1.0, 9)
    a = cal.DeviceModel(5, seed=4)
    b = cal.DeviceModel(5, seed=4)
    c = a.clone()
    np.testing.assert_array_equal(a.realized_frequencies(z), b.realized_frequencies(z))
    np.testing.assert_array_equal(a.realized_frequencies(z), c.realized_frequencies(z))
    d = cal.DeviceModel(5, seed=5)
    assert np.any(a.realized_frequencies(z) != d.realized_frequencies(z))


def test_measurement_noise_is_keyed_and_stateless():
    device = cal.DeviceModel(3, measurement_noise_mhz=0.5)
    z = np.full(5, 0.2)
    first = device.measurement_noise("ramsey", 0, z)
    # interleave other draws; the keyed value must not depend on call order
    device.measurement_noise("swap", 3, z)
    device.measurement_noise("ramsey", 1, z)
    assert device.measurement_noise("ramsey", 0, z) == first
    assert device.measurement_noise("ramsey", 1, z) != first
    assert device.measurement_noise("swap", 0, z) != first
    silent = cal.DeviceModel(3, measurement_noise_mhz=0.0)
    assert silent.measurement_noise("ramsey", 0, z) == 0.0


# ---------------------------------------------------------------------------
# simulated experiments


def test_ramsey_recovers_signed_frequency():
    device = _ideal_device(3)
    z = np.array([0.6, -0.8, 0.1, 0.0, 0.0])
    for q in range(3):
        truth = device.realized_frequencies(z)[q]
        assert cal.ramsey_experiment(device, q, z) == pytest.approx(truth, abs=1e-3)
    assert cal.ramsey_experiment(device, 1, z) < 0


def test_swap_recovers_coupling_magnitude():
    device = _ideal_device(3)
    z = np.array([0.0, 0.0, 0.0, 0.4, -0.7])
    for c in range(2):
        truth = abs(device.realized_couplings(z)[c])
        assert cal.swap_experiment(device, c, z) == pytest.approx(truth, abs=2e-2)
    # a coupler can be addressed by the qubit pair it joins
    assert cal.swap_experiment(device, (0, 1), z) == cal.swap_experiment(device, 0, z)
    with pytest.raises(SpecError):
        cal.swap_experiment(device, (0, 2), z)


def test_secant_step_is_exact_on_affine_response():
    a, b = 3.0, 12.0
    response = lambda z: a + b * z
    history = [(0.1, response(0.1)), (0.25, response(0.25))]
    target = 7.3
    z_next = cal.secant_step(history, target)
    assert response(z_next) == pytest.approx(target, abs=1e-12)


def test_secant_step_errors():
    with pytest.raises(SpecError):
        cal.secant_step([(0.1, 5.0)], 7.0)
    with pytest.raises(DegenerateSecantError):
        cal.secant_step([(0.1, 5.0), (0.2, 5.0)], 7.0)


# ---------------------------------------------------------------------------
# calibration loop


def test_calibrate_ideal_device_in_one_cycle():
    device = _ideal_device(5)
    targets = sx.build_zigzag(5, 4, 9.0)
    zpa, report = cal.calibrate_all(device, targets)
    assert report.converged
    assert report.outer_cycles == 1
    assert max(abs(r.residual_mhz) for r in report.parameters) < 1e-6
    freqs, coups = device.realized_parameters(zpa)
    np.testing.assert_allclose(freqs[:5], targets.frequencies_mhz, atol=1e-6)
    np.testing.assert_allclose(coups[:4], targets.couplings_mhz, atol=1e-6)


def test_calibrate_default_device_converges():
    device = cal.DeviceModel(5, seed=0)
    targets = sx.build_zigzag(5, 4, 9.0)
    zpa, report = cal.calibrate_all(device, targets)
    assert report.converged
    assert report.outer_cycles <= 2
    assert max(abs(r.residual_mhz) for r in report.parameters) <= 0.1
    freqs, coups = device.realized_parameters(zpa)
    # realized values may sit a few noise widths from the measured ones
    np.testing.assert_allclose(freqs[:5], targets.frequencies_mhz, atol=0.2)
    np.testing.assert_allclose(coups[:4], targets.couplings_mhz, atol=0.2)


def test_calibrate_extreme_detuned_scheme():
    device = cal.DeviceModel(5, seed=0)
    targets = sx.build_zigzag(5, 4, 9.0)
    config = cal.CalibrationConfig(env_scheme=cal.SCHEME_EXTREME)
    _, report = cal.calibrate_all(device, targets, config)
    assert report.scheme == cal.SCHEME_EXTREME
    assert report.converged
    assert max(abs(r.residual_mhz) for r in report.parameters) <= 0.1


def test_calibration_report_access():
    device = _ideal_device(3)
    _, report = cal.calibrate_all(device, sx.build_line(3, 9.0))
    names = {r.name for r in report.parameters}
    assert names == {"qubit_1", "qubit_2", "qubit_3", "coupler_1", "coupler_2"}
    rec = report.record("coupler_2")
    assert rec.kind == cal.KIND_COUPLING
    assert report.record("qubit_1").kind == cal.KIND_FREQUENCY
    with pytest.raises(KeyError):
        report.record("qubit_9")
    as_json = report.to_json_dict()
    assert len(as_json["parameters"]) == 5
    assert as_json["converged"] is True


def test_calibrate_many_matches_solo_runs():
    device = cal.DeviceModel(9, seed=1)
    unit_a = sx.build_line(3, 9.0)
    unit_b = sx.build_zigzag(3, 1, 8.0)
    zpa, reports = cal.calibrate_many(device, [(unit_a, 0), (unit_b, 5)])
    assert zpa.shape == (device.n_elements,)
    assert len(reports) == 2
    assert all(r.converged for r in reports)
    zpa_a, _ = cal.calibrate_all(device, unit_a, qubit_offset=0)
    zpa_b, _ = cal.calibrate_all(device, unit_b, qubit_offset=5)
    np.testing.assert_allclose(zpa[:3], zpa_a[:3], atol=1e-12)
    np.testing.assert_allclose(zpa[5:8], zpa_b[5:8], atol=1e-12)


def test_calibration_config_validation():
    with pytest.raises(SpecError):
        cal.CalibrationConfig(coupling_threshold_mhz=0.0)
    with pytest.raises(SpecError):
        cal.CalibrationConfig(unit_radius=0.7)
    with pytest.raises(SpecError):
        cal.CalibrationConfig(env_scheme="isolated")


# ---------------------------------------------------------------------------
# transfer cost


def test_cost_spec_sampling_times():
    spec = cal.CostSpec(tau_ns=60.0, n_points=4)
    np.testing.assert_allclose(spec.sample_times_ns, [60.0, 180.0, 300.0, 420.0])
    with pytest.raises(SpecError):
        cal.CostSpec(tau_ns=0.0)
    with pytest.raises(SpecError):
        cal.CostSpec(tau_ns=60.0, n_points=0)


def test_cost_point_layout():
    device = _ideal_device(5)
    cost = cal.TransferCost(device, cal.CostSpec(55.0), 5, fixed_first_zpa=0.25)
    assert cost.dim == 8
    x = np.arange(1.0, 9.0) / 10.0
    z = cost.full_zpa(x)
    assert z[0] == 0.25
    np.testing.assert_array_equal(z[1:5], x[:4])
    np.testing.assert_array_equal(z[5:9], x[4:])
    with pytest.raises(SpecError):
        cost.full_zpa(x[:5])
    with pytest.raises(SpecError):
        cal.TransferCost(device, cal.CostSpec(55.0), 6)


def test_cost_vanishes_at_exact_split_transfer_parameters():
    device = _ideal_device(5)
    spec = sx.apply_fst_deformation(sx.build_zigzag(5, 4, 9.0), np.pi / 8)
    tau = units.transfer_time_ns(9.0)
    cost = cal.TransferCost(device, cal.CostSpec(tau), 5)
    x = cost.zpas_for_parameters(spec.frequencies_mhz, spec.couplings_mhz)
    freqs, coups = cost.parameters_mhz(x)
    np.testing.assert_allclose(freqs, spec.frequencies_mhz, atol=1e-9)
    np.testing.assert_allclose(coups, spec.couplings_mhz, atol=1e-9)
    assert cost(x) < 1e-9


def test_cost_window_penalty():
    device = _ideal_device(5)
    cost = cal.TransferCost(device, cal.CostSpec(55.0), 5)
    inside = np.zeros(8)
    assert cost(inside) <= 1.0
    outside = np.zeros(8)
    outside[3] = 2.5
    assert cost(outside) == pytest.approx(1.0 + 1.0)


def test_zpa_steps_match_map_slopes():
    device = _ideal_device(5)
    cost = cal.TransferCost(device, cal.CostSpec(55.0), 5)
    x = np.array([0.3, -0.2, 0.5, 0.1, 0.4, -0.6, 0.2, 0.0])
    steps = cost.zpa_steps_for_mhz(x, 0.5)
    for i in range(4):
        slope = cal.DeviceModel.nominal_frequency_slope(x[i])
        assert steps[i] * slope == pytest.approx(0.5, rel=1e-12)
    for i in range(4):
        slope = cal.DeviceModel.nominal_coupling_slope(x[4 + i])
        assert steps[4 + i] * slope == pytest.approx(0.5, rel=1e-12)


# ---------------------------------------------------------------------------
# optimizers


def _bowl(center):
    center = np.asarray(center, dtype=float)

    def cost(x):
        return float(np.sum((np.asarray(x) - center) ** 2))

    return cost


def test_nelder_mead_on_quadratic_bowl():
    center = np.array([0.4, -0.3, 0.1])
    best, trace = cal.optimize(_bowl(center), np.zeros(3), cal.METHOD_NM, 120)
    assert trace.best_cost < 1e-10
    np.testing.assert_allclose(best, center, atol=1e-4)
    assert trace.method == cal.METHOD_NM
    assert trace.hyperparameters["adaptive"] is True
    diffs = np.diff(trace.best_costs)
    assert np.all(diffs <= 0)
    assert trace.n_iterations <= 120
    assert trace.best_costs[-1] == trace.best_cost


def test_nelder_mead_recovers_balanced_transfer():
    device = _ideal_device(5)
    spec = sx.apply_fst_deformation(sx.build_zigzag(5, 4, 9.0), np.pi / 8)
    tau = units.transfer_time_ns(9.0)
    cost = cal.TransferCost(device, cal.CostSpec(tau), 5)
    rng = np.random.default_rng(1)
    f = spec.frequencies_mhz.copy()
    f[1:] += rng.uniform(-0.3, 0.3, 4)
    j = spec.couplings_mhz + rng.uniform(-0.3, 0.3, 4)
    x0 = cost.zpas_for_parameters(f, j)
    assert cost(x0) > 0.01
    _, trace = cal.optimize(cost, x0, cal.METHOD_NM, 150)
    assert trace.best_cost < 1e-3


def test_differential_evolution_is_seed_deterministic():
    cost = _bowl([0.2, -0.1])
    x0 = np.zeros(2)
    a, ta = cal.optimize(cost, x0, cal.METHOD_DE, 20, seed=3)
    b, tb = cal.optimize(cost, x0, cal.METHOD_DE, 20, seed=3)
    np.testing.assert_array_equal(a, b)
    assert ta.evaluations == tb.evaluations
    _, tc = cal.optimize(cost, x0, cal.METHOD_DE, 20, seed=4)
    assert ta.evaluations != tc.evaluations


def test_differential_evolution_respects_bounds():
    cost = _bowl([0.0, 0.0])
    x0 = np.zeros(2)
    _, trace = cal.optimize(cost, x0, cal.METHOD_DE, 15, seed=0, bounds_mhz=1.0)
    lo = np.array(trace.hyperparameters["bounds_lo"])
    hi = np.array(trace.hyperparameters["bounds_hi"])
    for entry in trace.evaluations:
        x = np.array(entry["x"])
        assert np.all(x >= lo - 1e-12)
        assert np.all(x <= hi + 1e-12)
    assert trace.hyperparameters["population"] == 15
    assert trace.hyperparameters["mutation"] == 0.6
    assert trace.hyperparameters["crossover"] == 0.8


def test_differential_evolution_parallel_matches_serial():
    cost = _bowl([0.3, -0.2, 0.1])
    x0 = np.zeros(3)
    a, ta = cal.optimize(cost, x0, cal.METHOD_DE, 15, seed=2, n_jobs=1)
    b, tb = cal.optimize(cost, x0, cal.METHOD_DE, 15, seed=2, n_jobs=4)
    np.testing.assert_array_equal(a, b)
    assert ta.best_cost == tb.best_cost


def test_optimize_validation_and_error_trace():
    with pytest.raises(SpecError):
        cal.optimize(_bowl([0.0]), np.zeros(1), "annealing", 10)
    with pytest.raises(SpecError):
        cal.optimize(_bowl([0.0]), np.zeros(1), cal.METHOD_NM, 0)

    calls = {"n": 0}

    def flaky(x):
        calls["n"] += 1
        if calls["n"] > 5:
            raise RuntimeError("hardware went away")
        return float(np.sum(np.square(x)))

    with pytest.raises(CostEvaluationError) as excinfo:
        cal.optimize(flaky, np.zeros(2), cal.METHOD_NM, 50)
    assert excinfo.value.trace is not None
    assert len(excinfo.value.trace.evaluations) == 5
