import csv
import json
from io import StringIO

import numpy as np
import pytest
from rich.console import Console

from etcram import analysis, cli, datafiles


@pytest.fixture(autouse=True)
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def run(*argv):
    return cli.run(list(argv), console=Console(file=StringIO(), emoji=False))


def read_json(path):
    return json.loads(path.read_text())


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        cli.run(["--version"])
    assert info.value.code == 0
    assert cli.__version__ in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv", [["energy", "--bogus"], ["energy", "--device", "flash"], ["warp"], []]
)
def test_usage_errors(argv):
    with pytest.raises(SystemExit) as info:
        cli.run(argv)
    assert info.value.code == cli.EXIT_USAGE


def test_energy(workdir):
    assert run("energy", "--device", "sonos") == cli.EXIT_OK
    out = read_json(workdir / "energy.json")
    assert list(out) == ["sonos"]
    assert out["sonos"]["advantage"] == pytest.approx(9.4, abs=0.05)
    assert out["sonos"]["linearity_applies"] is True

    sidecar = read_json(workdir / "energy.json.run.json")
    assert sidecar["command"] == "energy"
    assert sidecar["seed"] == cli.DEFAULT_SEED
    assert sidecar["config"]["energy"]["devices"] == ["sonos"]
    assert set(sidecar["versions"]) == {"etcram", "numpy", "scipy"}


def test_energy_overrides(workdir):
    assert run("energy", "--device", "memristor", "--array-size-ratio", "10", "-o", "e.json") == cli.EXIT_OK
    assert read_json(workdir / "e.json")["memristor"]["advantage"] == 10.0


def test_states(workdir):
    assert run("states") == cli.EXIT_OK
    out = read_json(workdir / "states.json")
    assert out["states"] == pytest.approx(3180, rel=0.15)
    assert (out["g_lo_s"], out["g_hi_s"]) == (1e-9, 1e-3)


def test_states_missing_calibration(workdir):
    assert run("states", "--calib", "nowhere.csv") == cli.EXIT_DATA
    assert not (workdir / "states.json").exists()


def test_thermal_single_length(workdir):
    code = run("thermal", "--length", "100e-9", "--tolerance", "1.0", "--max-levels", "2", "-o", "t.csv")
    assert code == cli.EXIT_OK
    rows = read_rows(workdir / "t.csv")
    assert len(rows) == 1
    assert float(rows[0]["length_m"]) == 100e-9
    assert float(rows[0]["p_crit_w"]) > 0


def test_thermal_not_converged(workdir):
    code = run("thermal", "--length", "100e-9", "--tolerance", "1e-12", "--max-levels", "2")
    assert code == cli.EXIT_NONCONVERGENCE


def test_program_already_at_target(workdir):
    assert run("program", "--initial", "50e-9", "--target", "50e-9") == cli.EXIT_OK
    out = read_json(workdir / "program.json")
    assert out["pulses_used"] == 0
    assert out["converged"] is True


def test_program_not_converged(workdir):
    code = run("program", "--tolerance", "1e-9", "--max-pulses", "5")
    assert code == cli.EXIT_NONCONVERGENCE
    out = read_json(workdir / "program.json")
    assert out["converged"] is False
    assert out["pulses_used"] <= 5
    assert (workdir / "program.json.run.json").exists()


def test_program_out_of_range(workdir):
    assert run("program", "--target", "1e-5") == cli.EXIT_DATA


def test_program_trials(workdir):
    code = run("program", "--trials", "5", "--seed", "3")
    assert code in (cli.EXIT_OK, cli.EXIT_NONCONVERGENCE)
    rows = read_rows(workdir / "program.csv")
    assert len(rows) == 5
    assert (workdir / "program.csv.run.json").exists()


def test_mvm_sweep_without_errors(workdir):
    code = run("mvm-sweep", "--preset", "tiny", "--no-error", "--wire-resistance", "0", "-o", "s.csv")
    assert code == cli.EXIT_OK
    rows = read_rows(workdir / "s.csv")
    assert len(rows) == 4 * 3
    assert {r["array_rows"] for r in rows} == {"16", "32", "64"}
    assert all(float(r["normalized_rms"]) < 1e-9 for r in rows)


def test_mvm_sweep_rerun_from_sidecar(workdir):
    assert run("mvm-sweep", "--preset", "tiny", "--device", "etcram", "--device", "pcm", "--seed", "7", "-o", "a.csv") == 0
    assert run("mvm-sweep", "--config", "a.csv.run.json", "-o", "b.csv") == 0
    assert (workdir / "a.csv").read_bytes() == (workdir / "b.csv").read_bytes()
    assert (workdir / "a.csv.run.json").read_bytes() == (workdir / "b.csv.run.json").read_bytes()

    assert run("mvm-sweep", "--config", "a.csv.run.json", "--seed", "8", "-o", "c.csv") == 0


@pytest.mark.parametrize(
    "argv, ext",
    [
        (["program", "--seed", "11"], "json"),
        (["program", "--trials", "6", "--seed", "11"], "csv"),
        (["thermal", "--length", "100e-9", "--length", "200e-9", "--tolerance", "1.0", "--max-levels", "2"], "csv"),
    ],
)
def test_rerun_from_sidecar_is_byte_identical(workdir, argv, ext):
    first = run(*argv, "-o", f"a.{ext}")
    assert first in (cli.EXIT_OK, cli.EXIT_NONCONVERGENCE)
    assert run(argv[0], "--config", f"a.{ext}.run.json", "-o", f"b.{ext}") == first
    assert (workdir / f"a.{ext}").read_bytes() == (workdir / f"b.{ext}").read_bytes()
    assert (workdir / f"a.{ext}.run.json").read_bytes() == (workdir / f"b.{ext}.run.json").read_bytes()
    assert (workdir / "a.csv").read_bytes() != (workdir / "c.csv").read_bytes()


def test_mvm_sweep_matrix_files(workdir, rng):
    w = rng.standard_normal((16, 4))
    x = np.maximum(rng.standard_normal((3, 16)), 0.0)
    datafiles.write_matrix(workdir / "w.bin", w)
    datafiles.write_matrix(workdir / "x.csv", x)
    code = run("mvm-sweep", "--weights", "w.bin", "--inputs", "x.csv", "--rows", "8", "--rows", "16", "--device", "etcram")
    assert code == cli.EXIT_OK
    rows = read_rows(workdir / "mvm_sweep.csv")
    assert [r["array_rows"] for r in rows] == ["8", "16"]

    datafiles.write_matrix(workdir / "x.csv", x[:, :8])
    assert run("mvm-sweep", "--weights", "w.bin", "--inputs", "x.csv", "--device", "etcram") == cli.EXIT_DATA


def test_bad_config(workdir):
    (workdir / "cfg.json").write_text('{"bogus": 1}')
    assert run("energy", "--config", "cfg.json") == cli.EXIT_DATA
    (workdir / "cfg.json").write_text('{"energy": {"devices": ["flash"]}}')
    assert run("energy", "--config", "cfg.json") == cli.EXIT_DATA
    assert run("energy", "--config", "missing.json") == cli.EXIT_DATA


def test_config_precedence(workdir):
    (workdir / "cfg.json").write_text('{"seed": 5, "preset": "tiny", "sweep": {"rows": [16], "vectors": 4}}')
    args = cli.build_parser().parse_args(["mvm-sweep", "--config", "cfg.json", "--seed", "9", "--vectors", "2"])
    config = cli.resolve_config(args)
    assert config.seed == 9
    assert config.preset == "tiny"
    assert config.sweep.rows == [16]
    assert config.sweep.vectors == 2
    assert config.sweep.wire_resistances == [0.35]
    assert config.output_path().name == "mvm_sweep.csv"


def test_calibrate_tcr(workdir):
    assert run("calibrate", "--resistance", "12.0") == cli.EXIT_OK
    out = read_json(workdir / "calibration.json")
    assert out["kind"] == "tcr"
    assert [c["label"] for c in out["calibrations"]] == ["pt_tcr_8um", "pt_tcr_4um", "pt_tcr_2um"]
    assert out["mean_alpha_ohm_per_k"] == pytest.approx(0.018667, rel=1e-4)
    rises = out["temperature_rise_k"]
    assert list(rises) == ["pt_tcr_8um", "pt_tcr_4um", "pt_tcr_2um"]
    assert rises["pt_tcr_8um"] == [pytest.approx(0.0, abs=1e-6)]
    assert rises["pt_tcr_4um"][0] < 0


def test_calibrate_tcr_single_heater(workdir):
    assert run("calibrate", "--resistance", "16.0", "--heater", "pt_tcr_2um", "-o", "h.json") == cli.EXIT_OK
    rises = read_json(workdir / "h.json")["temperature_rise_k"]
    assert list(rises) == ["pt_tcr_2um"]
    assert rises["pt_tcr_2um"] == [pytest.approx(0.0, abs=1e-6)]
    assert run("calibrate", "--resistance", "16.0", "--heater", "pt_tcr_9um") == cli.EXIT_DATA


def test_explicit_missing_path_is_an_error(workdir):
    assert run("states", "--calib", str(workdir / "nowhere" / "etcram_sigma.csv")) == cli.EXIT_DATA
    assert not (workdir / "states.json").exists()
    assert run("calibrate", "-i", "pt_tcr_8um.csv") == cli.EXIT_DATA
    assert run("calibrate", "--kind", "spectrum", "-i", "example_spectrum.csv") == cli.EXIT_DATA
    assert run("thermal", "--stack", "elsewhere/thermal_stack.json") == cli.EXIT_DATA


def test_calibrate_spectrum_and_power_law(workdir):
    assert run("calibrate", "--kind", "spectrum", "-o", "s.json") == cli.EXIT_OK
    assert read_json(workdir / "s.json")["integrated_noise"] == pytest.approx(3e-14, rel=0.5)
    assert run("calibrate", "--kind", "power-law", "-o", "p.json") == cli.EXIT_OK
    assert read_json(workdir / "p.json")["exponent"] == pytest.approx(2.31, abs=0.2)


def test_calibrate_trace(workdir, rng):
    assert run("calibrate", "--kind", "trace") == cli.EXIT_DATA

    current = analysis.synthesize_noise(10_000, 1e4, floor=1e-10, corner=0.0, rng=rng, mean=1e-6)
    t = np.arange(current.size) / 1e4
    datafiles.write_table(workdir / "trace.csv", analysis.TRACE_COLUMNS, zip(t, current))
    assert run("calibrate", "--kind", "trace", "-i", "trace.csv", "-o", "n.json") == cli.EXIT_OK
    out = read_json(workdir / "n.json")
    assert out["sample_rate_hz"] == pytest.approx(1e4)
    assert out["integrated_noise"] == pytest.approx(1e-10 * (1e8 - 1e3), rel=0.2)
    spectrum = analysis.NoiseSpectrum.from_csv(workdir / "n_psd.csv")
    assert spectrum.frequencies.size == 10_000 // 50 // 2 + 1
    assert spectrum.frequencies[-1] == pytest.approx(5e3)
