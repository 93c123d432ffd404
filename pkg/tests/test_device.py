import numpy as np
import pytest

from etcram import datafiles, device
from etcram.device import DeviceState, ErrorModel, PulseSpec, UpdateMap
from etcram.errors import DataFileError, DomainError, GridClampWarning, ReadWindowWarning


def test_sigma_at_single_anchor():
    model = ErrorModel.from_anchors([(1e-9, 2.1384e-11)])
    assert model.sigma_at(1e-9) == pytest.approx(2.1384e-11, rel=1e-12)
    assert device.sigma_at(model, 1e-3) == pytest.approx(2.1384e-11, rel=1e-12)
    assert model.sigma_at(1e-12) == pytest.approx(2.1384e-11, rel=1e-12)


def test_sigma_at_log_log_midpoint():
    model = ErrorModel.from_anchors([(1e-8, 1e-10), (1e-6, 1e-8)])
    assert model.sigma_at(1e-7) == pytest.approx(1e-9, rel=1e-9)


def test_sigma_at_exact_at_anchors_and_continuous():
    model = ErrorModel.from_csv(datafiles.data_path("etcram_sigma.csv"))
    for g, s in model.anchors:
        assert model.sigma_at(g) == pytest.approx(s, rel=1e-12)
    g = np.geomspace(1e-9, 1e-3, 20001)
    s = model.sigma_at(g)
    assert np.all(s > 0)
    # neighbouring samples are 0.07 % apart, so any jump would stand out
    assert np.max(np.abs(np.diff(np.log(s)))) < 0.01


def test_sigma_at_rejects_non_positive():
    model = ErrorModel.from_anchors([(1e-9, 1e-11)])
    with pytest.raises(DomainError):
        model.sigma_at(0.0)
    with pytest.raises(DomainError):
        model.sigma_at(np.array([1e-9, -1e-9]))


def test_error_model_validation():
    with pytest.raises(DomainError):
        ErrorModel.from_anchors([])
    with pytest.raises(DomainError):
        ErrorModel.from_anchors([(1e-6, 1e-8), (1e-8, 1e-10)])
    with pytest.raises(DomainError):
        ErrorModel.from_anchors([(1e-8, 0.0)])


def test_error_model_csv(tmp_path):
    model = ErrorModel.from_anchors([(1e-9, 2e-11), (1e-6, 4.5e-9)])
    fpath = tmp_path / "sigma.csv"
    model.to_csv(fpath)
    assert fpath.read_text().splitlines()[0] == "g_siemens,sigma_siemens"
    assert ErrorModel.from_csv(fpath).anchors == model.anchors

    bad = tmp_path / "bad.csv"
    bad.write_text("g_siemens,sigma_siemens\n1e-6,1e-8\n1e-8,1e-10\n")
    with pytest.raises(DataFileError):
        ErrorModel.from_csv(bad)


def test_error_model_scaled():
    model = ErrorModel.from_anchors([(1e-9, 2e-11), (1e-6, 4e-9)])
    assert model.scaled(2.0).sigma_at(1e-9) == pytest.approx(4e-11)
    with pytest.raises(DomainError):
        model.scaled(0.0)


def test_device_presets():
    presets = device.device_presets()
    assert list(presets) == ["etcram", "sonos", "pcm", "memristor"]
    etcram = presets["etcram"]
    assert (etcram.g_min, etcram.g_max) == (1e-9, 1.6e-6)
    assert etcram.iv_linear
    assert not presets["sonos"].iv_linear
    assert etcram.sigma_at(1e-9) == pytest.approx(2.1384e-11, rel=1e-12)
    assert presets["memristor"].g_max == 39.3e-6
    assert device.device_preset("PCM", error_model=None).sigma_at(1e-6) == 0.0
    with pytest.raises(DomainError):
        device.device_preset("flash")


def test_device_params_validation():
    with pytest.raises(DomainError):
        device.DeviceParams(1e-6, 1e-9)
    with pytest.raises(DomainError):
        DeviceState(0.0, device.DeviceParams(1e-9, 1e-6))


def test_read_current_ohmic():
    state = DeviceState(1e-6, device.DeviceParams(1e-9, 1.6e-6))
    assert device.read_current(state, 0.0) == 0.0
    assert device.read_current(state, 0.05) == pytest.approx(50e-9)
    state = DeviceState(20e-9, state.params)
    assert device.read_current(state, 0.01) == pytest.approx(0.2e-9)


def test_read_current_window():
    state = DeviceState(1e-6, device.DeviceParams(1e-9, 1.6e-6))
    with pytest.warns(ReadWindowWarning):
        assert device.read_current(state, 0.2) == pytest.approx(0.2e-6)
    assert device.read_current(state, 0.2, allow_nonlinear=True) == pytest.approx(0.2e-6)


def test_update_map_lookup_and_clamp(update_map):
    assert update_map.fraction(2.4, 1e-6) == pytest.approx(float(device.synthetic_response(2.4, 1e-6)), rel=1e-9)
    assert update_map.fraction(0.5, 1e-6) == 0.0
    with pytest.warns(GridClampWarning):
        clamped = update_map.fraction(3.5, 1e-6)
    assert clamped == pytest.approx(update_map.fraction(2.8, 1e-6))


def test_update_map_validation(tmp_path):
    with pytest.raises(DomainError):
        UpdateMap([1.0, 2.0], [1e-6], [[-0.1], [0.1]])
    with pytest.raises(DomainError):
        UpdateMap([2.0, 1.0], [1e-6], [[0.1], [0.1]])
    with pytest.raises(DomainError):
        UpdateMap([1.0, 2.0], [1e-6], [0.1, 0.2, 0.3])

    fpath = tmp_path / "map.csv"
    fpath.write_text("v_volts,t_seconds,delta_fraction\n2.0,1e-6,0.1\n2.0,2e-6,0.2\n2.4,1e-6,0.3\n")
    with pytest.raises(DataFileError):
        UpdateMap.from_csv(fpath)


def test_update_map_csv(tmp_path):
    m = device.synthetic_update_map([-2.0, 0.0, 2.0, 2.4], [1e-7, 1e-6])
    fpath = tmp_path / "map.csv"
    m.to_csv(fpath)
    loaded = UpdateMap.from_csv(fpath)
    np.testing.assert_allclose(loaded.delta_fraction, m.delta_fraction, rtol=1e-15)
    np.testing.assert_allclose(loaded.duration_grid, m.duration_grid, rtol=1e-15)


def test_apply_pulse_deterministic_step():
    m = UpdateMap([1.0, 2.0], [1e-7, 1e-6], [[0.05, 0.05], [0.10, 0.10]])
    state = DeviceState(100e-9, device.DeviceParams(1e-9, 1e-6))
    after = device.apply_pulse(state, PulseSpec(2.0, 1e-6), m, relative_noise=0.0)
    assert after.conductance == pytest.approx(110e-9, rel=1e-12)
    assert after.write_count == 1
    again = device.apply_pulse(state, PulseSpec(2.0, 1e-6), m, relative_noise=0.0)
    assert again.conductance == after.conductance


def test_apply_pulse_below_significance(update_map, etcram_params):
    # 2 % of 1 nS is below three sigma at 1 nS
    state = DeviceState(1e-9, etcram_params)
    after = device.apply_pulse(state, PulseSpec(2.4, 1e-6), update_map, relative_noise=0.0)
    assert after.conductance == state.conductance
    assert after.write_count == 1


def test_apply_pulse_needs_rng(update_map, etcram_params):
    state = DeviceState(100e-9, etcram_params)
    with pytest.raises(DomainError):
        device.apply_pulse(state, PulseSpec(2.6, 1e-6), update_map, relative_noise=0.1, rng=None)


def test_apply_pulse_sign(update_map, etcram_params, rng):
    for g0 in np.geomspace(5e-9, 1.5e-6, 12):
        state = DeviceState(float(g0), etcram_params)
        for v in (1.6, 2.0, 2.4, 2.8):
            assert device.apply_pulse(state, PulseSpec(v, 1e-5), update_map, 0.0).conductance >= g0
        for v in (-1.6, -2.0, -2.4, -2.8):
            after = device.apply_pulse(state, PulseSpec(v, 1e-5), update_map, 0.1, rng)
            assert device.G_FLOOR <= after.conductance <= g0


def test_pulse_train_saturates(update_map, etcram_params, rng):
    state = DeviceState(10e-9, etcram_params)
    final, trace = device.pulse_train(state, PulseSpec(2.4, 1e-6), 400, update_map, rng=rng)
    assert trace.size == 401
    assert np.all(np.diff(trace) >= 0)
    assert final.conductance == pytest.approx(etcram_params.g_max)
    assert final.write_count == 400


def test_drift():
    state = DeviceState(1e-6, device.DeviceParams(1e-9, 1.6e-6))
    low = device.LOW_STATE_RETENTION
    assert device.drift(state, 473.15, 0.0, low).conductance == state.conductance
    assert device.drift(state, 473.15, 20 * 3600.0, low).conductance == pytest.approx(0.897e-6, rel=1e-9)
    high = device.HIGH_STATE_RETENTION
    assert device.drift(state, 473.15, 3 * 3600.0, high).conductance == pytest.approx(0.9991e-6, rel=1e-9)

    g = [device.drift(state, 473.15, t, low).conductance for t in np.geomspace(1.0, 1e9, 30)]
    assert np.all(np.diff(g) <= 0)
    assert min(g) >= device.G_FLOOR
    with pytest.raises(DomainError):
        device.drift(state, 473.15, -1.0, low)


def test_correct_pulse_width():
    assert device.correct_pulse_width(1000e-9).seconds == pytest.approx(888e-9)
    assert device.correct_pulse_width(200e-9).seconds == pytest.approx(96e-9)
    short = device.correct_pulse_width(50e-9)
    assert short.seconds == 0.0
    assert short.sub_transient
    a, b = device.correct_pulse_width(900e-9), device.correct_pulse_width(400e-9)
    assert a.seconds - b.seconds == pytest.approx(0.99 * 500e-9)
    with pytest.raises(DomainError):
        device.correct_pulse_width(0.0)
