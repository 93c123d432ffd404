import json

import numpy as np
import pytest

from etcram import datafiles, device, programming
from etcram.device import DeviceParams, DeviceState, ErrorModel, PulseSpec
from etcram.errors import DataFileError, DomainError
from etcram.programming import ProgramPolicy, default_policy, write_verify


def test_default_policy_ladders(update_map):
    policy = default_policy(update_map)
    assert policy.tolerance == 0.006
    assert {p.voltage for p in policy.potentiation} == {2.6}
    assert {p.voltage for p in policy.depression} == {-2.0, -1.9, -1.8}
    for ladder in (policy.potentiation, policy.depression):
        strength = np.abs([update_map.fraction(p.voltage, p.duration) for p in ladder])
        assert np.all(np.diff(strength) <= 0)


def test_policy_validation():
    pulse = (PulseSpec(2.6, 1e-6),)
    with pytest.raises(DomainError):
        ProgramPolicy(0.0, 10, pulse, pulse)
    with pytest.raises(DomainError):
        ProgramPolicy(0.01, 0, pulse, pulse)
    with pytest.raises(DomainError):
        ProgramPolicy(0.01, 10, (), pulse)
    with pytest.raises(DomainError):
        ProgramPolicy(0.01, 10, pulse, pulse, selection="bisect")


def test_write_verify_already_at_target(update_map, etcram_params, rng):
    state = DeviceState(50e-9, etcram_params)
    result = write_verify(state, 50e-9, default_policy(update_map), update_map, rng)
    assert result.converged
    assert result.pulses_used == 0
    assert result.trajectory == [(0, 50e-9)]


def test_write_verify_out_of_range(update_map, etcram_params, rng):
    state = DeviceState(10e-9, etcram_params)
    with pytest.raises(DomainError):
        write_verify(state, 1e-5, default_policy(update_map), update_map, rng)
    with pytest.raises(DomainError):
        write_verify(state, 1e-10, default_policy(update_map), update_map, rng)


def _trials(update_map, params, n, target, tolerance, max_pulses, seed):
    policy = default_policy(update_map, tolerance=tolerance, max_pulses=max_pulses)
    children = np.random.default_rng(seed).spawn(n)
    return [write_verify(DeviceState(10e-9, params), target, policy, update_map, c) for c in children]


def test_write_verify_invariants(update_map, etcram_params):
    for result in _trials(update_map, etcram_params, 50, 50e-9, 0.006, 20, 7):
        assert result.pulses_used == len(result.trajectory) - 1 <= 20
        assert result.state.write_count == result.pulses_used
        assert result.converged == (result.final_error_fraction <= 0.006)
        assert [n for n, _ in result.trajectory] == list(range(result.pulses_used + 1))
        # no pulse once inside the tolerance band
        for _, g in result.trajectory[:-1]:
            assert abs(g - 50e-9) / 50e-9 > 0.006


def test_write_verify_converges_quickly(update_map, etcram_params):
    results = _trials(update_map, etcram_params, 200, 50e-9, 0.006, 10, 11)
    assert np.mean([r.converged for r in results]) >= 0.9


@pytest.mark.slow
def test_write_verify_acceptance(update_map, etcram_params):
    results = _trials(update_map, etcram_params, 1000, 50e-9, 0.006, 10, 2024)
    assert np.mean([r.converged for r in results]) >= 0.95


def test_write_verify_half_microsiemens(update_map, etcram_params):
    results = _trials(update_map, etcram_params, 50, 0.5e-6, 0.007, 20, 5)
    assert np.mean([r.converged for r in results]) >= 0.8
    assert np.median([r.pulses_used for r in results]) <= 12


def test_write_verify_impossible_tolerance(update_map, etcram_params, rng):
    policy = default_policy(update_map, tolerance=1e-9, max_pulses=8)
    result = write_verify(DeviceState(10e-9, etcram_params), 50e-9, policy, update_map, rng)
    assert not result.converged
    assert result.final_error_fraction > 1e-9


def test_write_verify_lookup_selection(update_map, etcram_params, rng):
    policy = default_policy(update_map, selection="lookup")
    result = write_verify(DeviceState(10e-9, etcram_params), 50e-9, policy, update_map, rng)
    assert result.pulses_used <= policy.max_pulses
    assert result.converged == (result.final_error_fraction <= policy.tolerance)


def test_program_result_serialization(update_map, etcram_params, rng):
    result = write_verify(DeviceState(10e-9, etcram_params), 50e-9, default_policy(update_map), update_map, rng)
    doc = json.loads(result.to_json())
    assert doc["pulses_used"] == result.pulses_used
    assert len(doc["trajectory"]) == result.pulses_used + 1
    assert doc["converged"] == result.converged
    row = result.summary_row()
    assert len(row) == len(programming.PROGRAM_SUMMARY_COLUMNS)
    assert row[0] == 50e-9


def test_characterize_sigma_deterministic(update_map, etcram_params, rng):
    factory = lambda: DeviceState(10e-9, etcram_params)
    result = programming.characterize_sigma(
        factory, 50e-9, n_writes=5, n_reads=10, update_map=update_map, rng=rng, relative_noise=0.0, read_share=0.0
    )
    assert result.sigma == pytest.approx(0.0, abs=1e-20)
    assert result.samples.shape == (5, 10)


def test_characterize_sigma_read_noise(update_map, rng):
    s = 1e-10
    params = DeviceParams(1e-9, 1e-6, ErrorModel.from_anchors([(1e-7, s)]))
    factory = lambda: DeviceState(1e-7, params)
    result = programming.characterize_sigma(
        factory, 1e-7, n_writes=20, n_reads=500, update_map=update_map, rng=rng, read_share=1.0
    )
    assert result.sigma == pytest.approx(s, rel=3 / np.sqrt(20 * 500))
    assert result.failed_writes == 0


def test_characterize_sigma_etcram_floor(update_map, etcram_params, rng):
    factory = lambda: DeviceState(1e-9, etcram_params)
    result = programming.characterize_sigma(factory, 1e-9, update_map=update_map, rng=rng, workers=2)
    assert 2.1384e-11 / 2 <= result.sigma <= 2.1384e-11 * 2
    assert result.sigma == pytest.approx(np.sqrt(0.5) * 2.1384e-11, rel=0.1)


def test_characterize_sigma_workers_do_not_change_result(update_map, etcram_params):
    factory = lambda: DeviceState(10e-9, etcram_params)
    kw = dict(n_writes=4, n_reads=5, update_map=update_map)
    one = programming.characterize_sigma(factory, 50e-9, rng=np.random.default_rng(3), **kw)
    four = programming.characterize_sigma(factory, 50e-9, rng=np.random.default_rng(3), workers=4, **kw)
    np.testing.assert_array_equal(one.samples, four.samples)


def test_characterize_sigma_validation(update_map, etcram_params):
    factory = lambda: DeviceState(10e-9, etcram_params)
    with pytest.raises(DomainError):
        programming.characterize_sigma(factory, 50e-9, n_writes=1, update_map=update_map)


def test_count_states_constant_relative_error():
    # sigma = 0.01 G inside the anchors
    model = ErrorModel.from_anchors([(1e-10, 1e-12), (1e-3, 1e-5)])
    assert programming.count_states(model, 1e-8, 1e-7) == pytest.approx(np.log(10) / 0.01, rel=1e-3)
    assert programming.count_states(model, 1e-8, 1e-8 * (1 + 1e-12)) == pytest.approx(0.0, abs=1e-6)


def test_count_states_properties():
    model = ErrorModel.from_csv(datafiles.data_path("etcram_sigma.csv"))
    whole = programming.count_states(model, 1e-9, 1e-3)
    parts = programming.count_states(model, 1e-9, 1e-6) + programming.count_states(model, 1e-6, 1e-3)
    assert whole == pytest.approx(parts, rel=1e-6)
    assert programming.count_states(model.scaled(4.0), 1e-9, 1e-3) == pytest.approx(whole / 4, rel=1e-12)


def test_count_states_shipped_calibration():
    model = ErrorModel.from_csv(datafiles.data_path("etcram_sigma.csv"))
    assert programming.count_states(model, 1e-9, 1e-3) == pytest.approx(3180, rel=0.15)


def test_count_states_validation():
    model = ErrorModel.from_anchors([(1e-9, 1e-11)])
    with pytest.raises(DomainError):
        programming.count_states(model, 1e-6, 1e-6)
    with pytest.raises(DomainError):
        programming.count_states(model, 0.0, 1e-6)


def test_default_map_grid():
    v, t = programming.default_map_grid()
    assert v[0] == pytest.approx(-1.6)
    assert v[-1] == pytest.approx(2.4)
    assert t[0] == pytest.approx(100e-9)
    assert t[-1] == pytest.approx(800e-9)


def test_build_update_map_round_trip(rng):
    v, t = programming.default_map_grid()
    truth = device.synthetic_update_map(v, t)
    dut = programming.SyntheticDevice(DeviceParams(1e-9, 1e-6), truth, 100e-9, relative_noise=0.0)
    recovered = programming.build_update_map(dut, trials=3, rng=rng)
    np.testing.assert_allclose(recovered.delta_fraction, truth.delta_fraction, rtol=1e-9, atol=1e-12)

    state = DeviceState(100e-9, DeviceParams(1e-9, 1e-6))
    pulse = PulseSpec(2.4, 800e-9)
    assert device.apply_pulse(state, pulse, recovered, 0.0).conductance == pytest.approx(
        device.apply_pulse(state, pulse, truth, 0.0).conductance, rel=1e-12
    )


def test_build_update_map_significance(rng, etcram_params):
    v, t = programming.default_map_grid()
    truth = device.synthetic_update_map(v, t)
    dut = programming.SyntheticDevice(DeviceParams(1e-9, 1e-6), truth, 20e-9, relative_noise=0.0)
    m = programming.build_update_map(dut, trials=2, rng=rng, model=etcram_params.error_model)
    boundary = 3 * etcram_params.sigma_at(20e-9) / 20e-9
    assert np.all((m.delta_fraction == 0) | (np.abs(m.delta_fraction) > boundary))
    assert np.any(m.delta_fraction == 0)
    assert np.any(m.delta_fraction != 0)


def test_build_update_map_from_file(tmp_path, rng):
    rows = [(float(v), float(t), 1e-7, 1e-7) for v in (-1.0, 0.0, 1.0) for t in (1e-7, 2e-7)]
    fpath = tmp_path / "meas.csv"
    programming.write_measurements(fpath, rows)
    m = programming.build_update_map(fpath)
    assert m.delta_fraction.shape == (3, 2)
    assert np.all(m.delta_fraction == 0)

    with pytest.raises(DataFileError):
        programming.build_update_map(fpath, voltage_grid=[-1.0, 0.0], duration_grid=[1e-7, 2e-7])
    with pytest.raises(DataFileError):
        programming.build_update_map(tmp_path / "missing.csv")


def test_collect_measurements_layout(rng):
    truth = device.synthetic_update_map([2.0, 2.4], [1e-7, 1e-6])
    dut = programming.SyntheticDevice(DeviceParams(1e-9, 1e-6), truth, 1e-7)
    rows = programming.collect_measurements(dut, [2.0, 2.4], [1e-7, 1e-6], 3, rng)
    assert len(rows) == 12
    assert all(before == 1e-7 and after >= before for _, _, before, after in rows)


def test_program_array(update_map, etcram_params, rng):
    targets = np.array([[20e-9, 50e-9], [200e-9, 500e-9]])
    result = programming.program_array(targets, 10e-9, etcram_params, default_policy(update_map), update_map, rng)
    assert result.final.shape == targets.shape
    assert 0.0 <= result.success_rate <= 1.0
    stats = result.decade_statistics()
    assert [row[0] for row in stats] == pytest.approx([1e-8, 1e-7])
    for _, abs_err, pct_err, success in stats:
        assert abs_err >= 0 and pct_err >= 0 and 0 <= success <= 1
