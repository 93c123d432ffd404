"""Command-line front end: ``etcram <command> [options]``."""

from __future__ import annotations

import hashlib
import logging
import sys
from argparse import ArgumentParser
from dataclasses import replace
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveFloat, PositiveInt, ValidationError, field_validator
from rich.console import Console
from rich.logging import RichHandler

from . import __version__, analysis, crossbar, datafiles, device, programming, report, thermal
from .device import DEFAULT_RELATIVE_NOISE
from .errors import ConvergenceError, DataFileError, DomainError, SolverError


log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONVERGENCE = 0, 1, 2, 3

COMMANDS = ("mvm-sweep", "program", "thermal", "energy", "states", "calibrate")
CALIBRATIONS = ("tcr", "trace", "spectrum", "power-law")
DEFAULT_SEED = 0

# (matrix rows, matrix cols, input vectors, array sizes)
PRESETS = {
    "tiny": (64, 32, 10, (16, 32, 64)),
    "desk": (512, 512, 100, (72, 144, 288, 512)),
    "full": (4608, 512, 19_600, crossbar.DEFAULT_ROWS),
}

DEFAULT_OUTPUTS = {
    "mvm-sweep": "mvm_sweep.csv",
    "program": "program.json",
    "thermal": "thermal_sweep.csv",
    "energy": "energy.json",
    "states": "states.json",
    "calibrate": "calibration.json",
}

# workload entropy key, kept apart from the four-element per-partition keys
WORKLOAD_KEY = 0x57


class _Settings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    def input_path(self, name: str) -> Path:
        """The file named by setting ``name``; only the built-in default may fall back to shipped data."""
        fpath = getattr(self, name)
        return datafiles.resolve_path(fpath, shipped=fpath == type(self).model_fields[name].default)


class SweepSettings(_Settings):
    devices: list[str] = Field(default_factory=lambda: list(device.DEVICE_NAMES))
    rows: list[PositiveInt] | None = None
    matrix_rows: PositiveInt | None = None
    matrix_cols: PositiveInt | None = None
    vectors: PositiveInt | None = None
    wire_resistances: list[NonNegativeFloat] = [0.35]
    full_scale_voltage: PositiveFloat = 0.1
    encoding: Literal["bit_serial_1x8", "nibble_4x2"] = "bit_serial_1x8"
    interleave: bool = True
    superpose: bool = True
    zero_error: bool = False
    weights: Path | None = None
    inputs: Path | None = None

    @field_validator("devices")
    @classmethod
    def known_devices(cls, names: list[str]) -> list[str]:
        names = [n.lower() for n in names]
        unknown = [n for n in names if n not in device.DEVICE_NAMES]
        if unknown:
            raise ValueError(f"unknown devices {unknown}, expected {device.DEVICE_NAMES}")
        return names


class ProgramSettings(_Settings):
    device: str = "etcram"
    initial: PositiveFloat = 10e-9
    target: PositiveFloat = 50e-9
    tolerance: PositiveFloat = 0.006
    max_pulses: PositiveInt = 20
    relative_noise: NonNegativeFloat = DEFAULT_RELATIVE_NOISE
    selection: Literal["ladder", "lookup"] = "ladder"
    trials: PositiveInt = 1
    update_map: Path | None = None


class ThermalSettings(_Settings):
    stack: Path | None = Path("thermal_stack.json")
    lengths: list[PositiveFloat] = [50e-9, 75e-9, 100e-9, 150e-9, 200e-9, 300e-9, 400e-9, 500e-9]
    target_rise: NonNegativeFloat = 300.0
    tolerance: PositiveFloat = 0.005
    max_levels: PositiveInt = 5


class EnergySettings(_Settings):
    devices: list[str] = Field(default_factory=lambda: list(analysis.ENERGY_PRESETS))
    array_size_ratio: NonNegativeFloat | None = None
    overhead: NonNegativeFloat | None = None

    @field_validator("devices")
    @classmethod
    def known_scenarios(cls, names: list[str]) -> list[str]:
        names = [n.lower() for n in names]
        unknown = [n for n in names if n not in analysis.ENERGY_PRESETS]
        if unknown:
            raise ValueError(f"no energy scenario for {unknown}, expected {list(analysis.ENERGY_PRESETS)}")
        return names


class StatesSettings(_Settings):
    calib: Path = Path("etcram_sigma.csv")
    g_lo: PositiveFloat = 1e-9
    g_hi: PositiveFloat = 1e-3
    points_per_decade: PositiveInt = 100


class CalibrateSettings(_Settings):
    kind: Literal["tcr", "trace", "spectrum", "power-law"] = "tcr"
    inputs: list[Path] = []
    resistances: list[PositiveFloat] = []
    heater: str | None = None
    segments: PositiveInt = 50
    window: str = "boxcar"
    floor_band: tuple[PositiveFloat, PositiveFloat] = (1e3, 1.598e3)
    integration_band: tuple[PositiveFloat, PositiveFloat] = (1e3, 1e8)


class RunConfig(_Settings):
    """Effective settings of one run, echoed into the run sidecar."""

    command: Literal["mvm-sweep", "program", "thermal", "energy", "states", "calibrate"]
    seed: int = Field(default=DEFAULT_SEED, ge=0, lt=2**64)
    workers: PositiveInt = 1
    preset: Literal["tiny", "desk", "full"] = "desk"
    output: Path | None = None
    sweep: SweepSettings = Field(default_factory=SweepSettings)
    program: ProgramSettings = Field(default_factory=ProgramSettings)
    thermal: ThermalSettings = Field(default_factory=ThermalSettings)
    energy: EnergySettings = Field(default_factory=EnergySettings)
    states: StatesSettings = Field(default_factory=StatesSettings)
    calibrate: CalibrateSettings = Field(default_factory=CalibrateSettings)

    def output_path(self) -> Path:
        if self.output is not None:
            return self.output
        if self.command == "program" and self.program.trials > 1:
            return Path("program.csv")
        return Path(DEFAULT_OUTPUTS[self.command])

    def canonical(self) -> dict:
        # the output location does not change results
        return self.model_dump(mode="json", exclude={"output"})


class _ArgumentParser(ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common_options() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", dest="seed", type=int, help="Root seed of every random draw")
    common.add_argument("-c", "--config", dest="config", type=Path, help="JSON config file or run sidecar")
    common.add_argument("-o", "--output", dest="output", type=Path, help="Output file")
    common.add_argument("-w", "--workers", dest="workers", type=int, help="Worker threads for sweeps")
    common.add_argument(
        "--debug",
        help="Print debug messages.",
        action="store_const",
        dest="loglevel",
        const=logging.DEBUG,
        default=logging.WARNING,
    )
    common.add_argument(
        "--verbose",
        help="Print more verbose output.",
        action="store_const",
        dest="loglevel",
        const=logging.INFO,
    )
    return common


def build_parser() -> ArgumentParser:
    common = _common_options()
    parser = _ArgumentParser(prog="etcram", description="ETCRAM analog memory and crossbar simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("mvm-sweep", parents=[common], help="MVM error against array size")
    p.add_argument("--device", dest="sweep.devices", action="append", choices=device.DEVICE_NAMES)
    p.add_argument("--rows", dest="sweep.rows", action="append", type=int, help="Array rows (repeatable)")
    p.add_argument("--preset", dest="preset", choices=list(PRESETS), help="Workload size")
    p.add_argument("--matrix-rows", dest="sweep.matrix_rows", type=int)
    p.add_argument("--matrix-cols", dest="sweep.matrix_cols", type=int)
    p.add_argument("--vectors", dest="sweep.vectors", type=int, help="Number of input vectors")
    p.add_argument(
        "--wire-resistance", dest="sweep.wire_resistances", action="append", type=float, help="Ohms per segment (repeatable)"
    )
    p.add_argument("--full-scale", dest="sweep.full_scale_voltage", type=float, help="Input full-scale voltage")
    p.add_argument("--encoding", dest="sweep.encoding", choices=crossbar.SCHEMES)
    p.add_argument("--split-columns", dest="sweep.interleave", action="store_const", const=False, help="Place negative columns in a second block")
    p.add_argument("--per-cycle", dest="sweep.superpose", action="store_const", const=False, help="Solve every input cycle separately")
    p.add_argument("--no-error", dest="sweep.zero_error", action="store_const", const=True, help="Program conductances exactly")
    p.add_argument("--weights", dest="sweep.weights", type=Path, help="Weight matrix (CSV or binary)")
    p.add_argument("--inputs", dest="sweep.inputs", type=Path, help="Input vectors, one per row")

    p = sub.add_parser("program", parents=[common], help="Write-verify one device to a target conductance")
    p.add_argument("--device", dest="program.device", choices=device.DEVICE_NAMES)
    p.add_argument("--initial", dest="program.initial", type=float, help="Starting conductance, S")
    p.add_argument("--target", dest="program.target", type=float, help="Target conductance, S")
    p.add_argument("--tolerance", dest="program.tolerance", type=float, help="Fractional tolerance")
    p.add_argument("--max-pulses", dest="program.max_pulses", type=int)
    p.add_argument("--relative-noise", dest="program.relative_noise", type=float)
    p.add_argument("--selection", dest="program.selection", choices=programming.SELECTIONS)
    p.add_argument("--trials", dest="program.trials", type=int, help="Independent seeded write-verify runs")
    p.add_argument("--update-map", dest="program.update_map", type=Path, help="Update map CSV")

    p = sub.add_parser("thermal", parents=[common], help="Critical heater power against wire length")
    p.add_argument("--stack", dest="thermal.stack", type=Path, help="Thermal stack JSON")
    p.add_argument("--length", dest="thermal.lengths", action="append", type=float, help="Wire length, m (repeatable)")
    p.add_argument("--target-rise", dest="thermal.target_rise", type=float, help="Temperature rise, K")
    p.add_argument("--tolerance", dest="thermal.tolerance", type=float, help="Grid refinement tolerance")
    p.add_argument("--max-levels", dest="thermal.max_levels", type=int, help="Grid refinement levels")

    p = sub.add_parser("energy", parents=[common], help="Energy advantage over other devices")
    p.add_argument("--device", dest="energy.devices", action="append", choices=list(analysis.ENERGY_PRESETS))
    p.add_argument("--array-size-ratio", dest="energy.array_size_ratio", type=float)
    p.add_argument("--overhead", dest="energy.overhead", type=float, help="Per-input driver overhead fraction")

    p = sub.add_parser("states", parents=[common], help="Count distinguishable conductance states")
    p.add_argument("--calib", dest="states.calib", type=Path, help="Error model CSV")
    p.add_argument("--glo", dest="states.g_lo", type=float, help="Lowest conductance, S")
    p.add_argument("--ghi", dest="states.g_hi", type=float, help="Highest conductance, S")
    p.add_argument("--points-per-decade", dest="states.points_per_decade", type=int)

    p = sub.add_parser("calibrate", parents=[common], help="Fit calibration and measurement files")
    p.add_argument("--kind", dest="calibrate.kind", choices=CALIBRATIONS)
    p.add_argument("-i", "--input", dest="calibrate.inputs", action="append", type=Path, help="Input file (repeatable)")
    p.add_argument("--resistance", dest="calibrate.resistances", action="append", type=float, help="Heater resistance to convert, ohm")
    p.add_argument("--heater", dest="calibrate.heater", help="Label of the heater the resistances were measured on")
    p.add_argument("--segments", dest="calibrate.segments", type=int, help="PSD averaging segments")
    p.add_argument("--window", dest="calibrate.window", help="PSD segment window")

    return parser


def _merge(base: dict, over: dict) -> dict:
    merged = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = _merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def load_config(fpath: Path) -> dict:
    """Settings from a JSON config file, or the ``config`` block of a run sidecar."""
    doc = datafiles.read_json(fpath)
    if not isinstance(doc, dict):
        raise DataFileError(f"{fpath}: config must be a JSON object")
    if "config_sha256" in doc and isinstance(doc.get("config"), dict):
        doc = doc["config"]
    return doc


def resolve_config(args) -> RunConfig:
    """CLI flags over config file over built-in defaults."""
    settings = load_config(args.config) if args.config else {}
    flags: dict = {}
    for key, val in vars(args).items():
        if val is None or key in ("config", "loglevel"):
            continue
        section, _, name = key.rpartition(".")
        if section:
            flags.setdefault(section, {})[name] = val
        else:
            flags[name] = val
    return RunConfig.model_validate(_merge(settings, flags))


def sidecar_path(output: Path) -> Path:
    return output.with_name(output.name + ".run.json")


def write_sidecar(config: RunConfig, output: Path):
    canonical = config.canonical()
    datafiles.write_json(
        sidecar_path(output),
        {
            "command": config.command,
            "seed": config.seed,
            "config_sha256": hashlib.sha256(datafiles.dumps(canonical).encode()).hexdigest(),
            "config": canonical,
            "versions": {"etcram": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        },
    )


def cmd_mvm_sweep(config: RunConfig, console: Console) -> int:
    s = config.sweep
    matrix_rows, matrix_cols, vectors, rows_list = PRESETS[config.preset]
    rows_list = s.rows or rows_list
    if s.weights is not None:
        w = datafiles.read_matrix(datafiles.resolve_path(s.weights))
    else:
        w = None
    if s.inputs is not None:
        x = datafiles.read_matrix(datafiles.resolve_path(s.inputs))
    else:
        x = None
    if w is None or x is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, WORKLOAD_KEY]))
        w_syn, x_syn = crossbar.synthetic_workload(
            s.matrix_rows or matrix_rows, s.matrix_cols or matrix_cols, s.vectors or vectors, rng
        )
        w = w_syn if w is None else w
        x = x_syn if x is None else x
    log.info(f"workload: {w.shape[0]}x{w.shape[1]} matrix, {x.shape[0]} input vectors")

    devices = [device.device_preset(n, None if s.zero_error else "shipped") for n in s.devices]
    rows = []
    for rw in s.wire_resistances:
        cfg = crossbar.CrossbarConfig(rw, s.full_scale_voltage, s.interleave)
        rows.extend(
            crossbar.mvm_error_sweep(
                devices,
                rows_list,
                w,
                x,
                cfg,
                config.seed,
                crossbar.InputEncoding(s.encoding),
                workers=config.workers,
                superpose=s.superpose,
            )
        )
    crossbar.write_sweep(config.output_path(), rows)
    report.show(
        report.table(crossbar.SWEEP_COLUMNS, [r.as_row() for r in rows], title="Normalized MVM error"), console
    )
    return EXIT_OK


def cmd_program(config: RunConfig, console: Console) -> int:
    s = config.program
    params = device.device_preset(s.device)
    if s.update_map is not None:
        update_map = device.UpdateMap.from_csv(datafiles.resolve_path(s.update_map))
    else:
        update_map = device.programming_update_map()
    policy = programming.default_policy(update_map, s.tolerance, s.max_pulses, selection=s.selection)
    initial = device.DeviceState(s.initial, params)
    rng = np.random.default_rng(config.seed)

    if s.trials == 1:
        result = programming.write_verify(initial, s.target, policy, update_map, rng, s.relative_noise)
        datafiles.write_json(config.output_path(), result.to_dict())
        report.show(report.rich_tree(result), console)
        results = [result]
    else:
        results = [
            programming.write_verify(initial, s.target, policy, update_map, child, s.relative_noise)
            for child in rng.spawn(s.trials)
        ]
        datafiles.write_table(
            config.output_path(), programming.PROGRAM_SUMMARY_COLUMNS, (r.summary_row() for r in results)
        )
        converged = sum(r.converged for r in results)
        console.print(f"{converged} of {s.trials} trials converged to {s.target} S within {s.tolerance:.3%}")

    if not all(r.converged for r in results):
        log.error(f"write-verify to {s.target} S did not converge within {s.max_pulses} pulses")
        return EXIT_NONCONVERGENCE
    return EXIT_OK


def cmd_thermal(config: RunConfig, console: Console) -> int:
    s = config.thermal
    stack = thermal.ThermalStack.from_json(s.input_path("stack")) if s.stack else thermal.ThermalStack()
    mesh = thermal.MeshSpec(tolerance=s.tolerance, max_levels=s.max_levels)
    points = thermal.sweep_length(stack, s.lengths, s.target_rise, mesh, workers=config.workers)
    thermal.write_sweep(config.output_path(), points)
    report.show(report.table(thermal.SWEEP_COLUMNS, [p.as_row() for p in points], title="Critical power"), console)
    return EXIT_OK


def cmd_energy(config: RunConfig, console: Console) -> int:
    s = config.energy
    out = {}
    for name in s.devices:
        scenario, linear = analysis.energy_preset(name)
        if s.array_size_ratio is not None:
            scenario = replace(scenario, array_size_ratio=s.array_size_ratio)
        if s.overhead is not None:
            scenario = replace(scenario, per_input_overhead_fraction=s.overhead)
        out[name] = {
            "array_size_ratio": scenario.array_size_ratio,
            "linearity_applies": linear,
            "encoding_factor": analysis.encoding_energy_factor(
                scenario.cycles, scenario.target_cycles, scenario.per_input_overhead_fraction
            ),
            "advantage": analysis.overall_energy_advantage(scenario, linear),
        }
    datafiles.write_json(config.output_path(), out)
    rows = [[n, v["array_size_ratio"], v["linearity_applies"], v["advantage"]] for n, v in out.items()]
    report.show(report.table(["device", "array_size_ratio", "linearity", "advantage"], rows, title="Energy advantage"), console)
    return EXIT_OK


def cmd_states(config: RunConfig, console: Console) -> int:
    s = config.states
    model = device.ErrorModel.from_csv(s.input_path("calib"))
    n = programming.count_states(model, s.g_lo, s.g_hi, s.points_per_decade)
    datafiles.write_json(config.output_path(), {"g_lo_s": s.g_lo, "g_hi_s": s.g_hi, "states": n})
    console.print(f"{n:.0f} distinguishable states between {s.g_lo:g} S and {s.g_hi:g} S")
    return EXIT_OK


def _calibrate_tcr(s: CalibrateSettings, console: Console) -> dict:
    paths = s.inputs or [Path(f"pt_tcr_{size}.csv") for size in ("8um", "4um", "2um")]
    cals = [analysis.read_tcr(datafiles.resolve_path(p, shipped=not s.inputs), p.stem) for p in paths]
    heaters = analysis.heater_calibrations(cals)
    if s.heater is not None:
        heaters = [h for h in heaters if h.size_label == s.heater]
        if not heaters:
            raise DataFileError(f"no calibration labelled {s.heater}, expected one of {[c.size_label for c in cals]}")
    out = {
        "calibrations": [{"label": c.size_label, "alpha_ohm_per_k": c.alpha, "r0_ohm": c.r0} for c in cals],
        "mean_alpha_ohm_per_k": heaters[0].alpha,
    }
    if s.resistances:
        out["temperature_rise_k"] = {
            h.size_label: [analysis.temperature_from_resistance(h, r) for r in s.resistances] for h in heaters
        }
    report.show(
        report.table(["label", "alpha", "r0"], [[c.size_label, c.alpha, c.r0] for c in cals], title="TCR fits"),
        console,
    )
    return out


def _spectrum_summary(spectrum: analysis.NoiseSpectrum, s: CalibrateSettings) -> dict:
    variance = analysis.integrate_noise(spectrum, s.floor_band, s.integration_band)
    return {"integrated_noise": variance, "floor_band_hz": list(s.floor_band), "integration_band_hz": list(s.integration_band)}


def cmd_calibrate(config: RunConfig, console: Console) -> int:
    s = config.calibrate
    if s.kind == "tcr":
        out = _calibrate_tcr(s, console)
    elif s.kind == "trace":
        if not s.inputs:
            raise DataFileError("calibrate --kind trace needs an --input trace file")
        current, rate = analysis.read_trace(datafiles.resolve_path(s.inputs[0]))
        spectrum = analysis.psd_estimate(current, rate, s.segments, s.window)
        out = _spectrum_summary(spectrum, s) | {"sample_rate_hz": rate, "segments": s.segments}
        output = config.output_path()
        spectrum.to_csv(output.with_name(output.stem + "_psd.csv"))
    elif s.kind == "spectrum":
        path = s.inputs[0] if s.inputs else Path("example_spectrum.csv")
        out = _spectrum_summary(analysis.NoiseSpectrum.from_csv(datafiles.resolve_path(path, shipped=not s.inputs)), s)
    else:
        path = s.inputs[0] if s.inputs else Path("power_vs_feature.csv")
        exponent, prefactor, stderr = thermal.fit_power_law(thermal.read_power_points(datafiles.resolve_path(path, shipped=not s.inputs)))
        out = {"exponent": exponent, "prefactor": prefactor, "exponent_stderr": stderr}
    out["kind"] = s.kind
    datafiles.write_json(config.output_path(), out)
    if s.kind != "tcr":
        report.show(report.rich_tree(out, s.kind), console)
    return EXIT_OK


_DISPATCH: dict[str, Callable[[RunConfig, Console], int]] = {
    "mvm-sweep": cmd_mvm_sweep,
    "program": cmd_program,
    "thermal": cmd_thermal,
    "energy": cmd_energy,
    "states": cmd_states,
    "calibrate": cmd_calibrate,
}


def run(argv: list[str] | None = None, console: Console | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.loglevel,
        format="%(message)s",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
    )
    console = console or Console(emoji=False)

    try:
        config = resolve_config(args)
    except ValidationError as e:
        log.error(f"invalid configuration:\n{e}")
        return EXIT_DATA
    except DataFileError as e:
        log.error(str(e))
        return EXIT_DATA
    log.debug(f"effective config: {config.canonical()}")
    log.info(f"{config.command}: seed {config.seed}")

    try:
        code = _DISPATCH[config.command](config, console)
    except (DataFileError, DomainError) as e:
        log.error(str(e))
        return EXIT_DATA
    except (ConvergenceError, SolverError) as e:
        log.error(str(e))
        return EXIT_NONCONVERGENCE

    write_sidecar(config, config.output_path())
    return code


def main(argv: list[str] | None = None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
