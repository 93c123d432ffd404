"""Closed-loop write-verify programming and the measurements built on it."""

from __future__ import annotations

import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import field
from math import ceil, log10
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from . import datafiles
from ._dataclass import dataclass, frozen
from .device import (
    DEFAULT_RELATIVE_NOISE,
    DeviceParams,
    DeviceState,
    ErrorModel,
    PulseSpec,
    UpdateMap,
    apply_pulse,
    programming_update_map,
)
from .errors import DataFileError, DomainError


log = logging.getLogger(__name__)

SELECTIONS = ("ladder", "lookup")
PROGRAM_SUMMARY_COLUMNS = ["target_s", "final_s", "pulses_used", "final_error_fraction", "converged"]
MEASUREMENT_COLUMNS = ["v_volts", "t_seconds", "g_before_siemens", "g_after_siemens"]


@frozen
class ProgramPolicy:
    """Write-verify settings. Ladders are ordered coarse to fine."""

    tolerance: float
    max_pulses: int
    potentiation: tuple[PulseSpec, ...]
    depression: tuple[PulseSpec, ...]
    # "ladder": largest step that does not overshoot; "lookup": one-shot closest step
    selection: str = "ladder"

    def __post_init__(self):
        if not self.tolerance > 0:
            raise DomainError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_pulses < 1:
            raise DomainError(f"max_pulses must be at least 1, got {self.max_pulses}")
        if not self.potentiation or not self.depression:
            raise DomainError("pulse ladders must be non-empty")
        if self.selection not in SELECTIONS:
            raise DomainError(f"unknown selection {self.selection}, expected one of {SELECTIONS}")


def default_policy(
    update_map: UpdateMap | None = None,
    tolerance: float = 0.006,
    max_pulses: int = 20,
    potentiation_voltages: Sequence[float] = (2.6,),
    depression_voltages: Sequence[float] = (-2.0, -1.9, -1.8),
    selection: str = "ladder",
) -> ProgramPolicy:
    """Ladders crossing the reference write voltages with every duration of the map."""
    update_map = update_map or programming_update_map()

    def ladder(voltages):
        pulses = [PulseSpec(float(v), float(t)) for v in voltages for t in update_map.duration_grid]
        strength = np.abs(update_map.fraction([p.voltage for p in pulses], [p.duration for p in pulses]))
        order = np.argsort(-strength, kind="stable")
        return tuple(pulses[ii] for ii in order)

    return ProgramPolicy(
        tolerance, max_pulses, ladder(potentiation_voltages), ladder(depression_voltages), selection
    )


@dataclass
class ProgramResult:
    target: float
    pulses_used: int
    final_conductance: float
    final_error_fraction: float
    trajectory: list[tuple[int, float]]
    converged: bool
    state: DeviceState | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "target_s": self.target,
            "pulses_used": self.pulses_used,
            "final_s": self.final_conductance,
            "final_error_fraction": self.final_error_fraction,
            "converged": self.converged,
            "trajectory": [[n, g] for n, g in self.trajectory],
        }

    def to_json(self) -> str:
        return datafiles.dumps(self.to_dict())

    def summary_row(self) -> list:
        return [
            self.target,
            self.final_conductance,
            self.pulses_used,
            self.final_error_fraction,
            self.converged,
        ]


class _Ladder:
    """A pulse ladder with its nominal fractional steps precomputed."""

    def __init__(self, pulses: Sequence[PulseSpec], update_map: UpdateMap):
        self.pulses = list(pulses)
        self.fractions = np.atleast_1d(
            update_map.fraction([p.voltage for p in pulses], [p.duration for p in pulses])
        )

    def select(self, g: float, target: float, tolerance: float, threshold: float, selection: str):
        steps = g * self.fractions
        significant = np.abs(steps) > threshold
        if not significant.any():
            return None
        expected = g + steps

        if selection == "lookup":
            miss = np.where(significant, np.abs(expected - target), np.inf)
            return self.pulses[int(np.argmin(miss))]

        if g < target:
            safe = significant & (expected <= target * (1 + tolerance))
        else:
            safe = significant & (expected >= target * (1 - tolerance))
        if safe.any():
            # largest safe step
            return self.pulses[int(np.argmax(np.where(safe, np.abs(steps), -np.inf)))]
        # finest significant step
        return self.pulses[int(np.argmin(np.where(significant, np.abs(steps), np.inf)))]


def write_verify(
    state: DeviceState,
    target: float,
    policy: ProgramPolicy,
    update_map: UpdateMap,
    rng: np.random.Generator | None,
    relative_noise: float = DEFAULT_RELATIVE_NOISE,
) -> ProgramResult:
    params = state.params
    if not params.g_min <= target <= params.g_max:
        raise DomainError(f"target {target} S outside [{params.g_min}, {params.g_max}] S")

    up = _Ladder(policy.potentiation, update_map)
    down = _Ladder(policy.depression, update_map)

    g = state.conductance
    trajectory = [(0, g)]
    pulses = 0
    while abs(g - target) / target > policy.tolerance and pulses < policy.max_pulses:
        threshold = update_map.significance_sigma_multiple * params.sigma_at(g)
        ladder = up if g < target else down
        pulse = ladder.select(g, target, policy.tolerance, threshold, policy.selection)
        if pulse is None:
            log.debug(f"no significant pulse available at {g} S")
            break
        state = apply_pulse(state, pulse, update_map, relative_noise, rng)
        g = state.conductance
        pulses += 1
        trajectory.append((pulses, g))

    error = abs(g - target) / target
    converged = error <= policy.tolerance
    log.debug(f"write-verify to {target} S: {pulses} pulses, error {error:.3%}, converged={converged}")
    return ProgramResult(target, pulses, g, error, trajectory, converged, state)


@dataclass
class SigmaResult:
    sigma: float
    samples: np.ndarray
    failed_writes: int
    results: list[ProgramResult]


def characterize_sigma(
    factory: Callable[[], DeviceState],
    target: float,
    n_writes: int = 10,
    n_reads: int = 100,
    policy: ProgramPolicy | None = None,
    update_map: UpdateMap | None = None,
    rng: np.random.Generator | None = None,
    relative_noise: float = DEFAULT_RELATIVE_NOISE,
    read_share: float = 0.5,
    workers: int = 1,
) -> SigmaResult:
    """Write ``target`` n_writes times, reading each result n_reads times.

    Reads are perturbed by ``read_share`` of the device's sigma_G variance.
    Each write trial draws from its own child generator of ``rng``.
    """
    if n_writes < 2 or n_reads < 2:
        raise DomainError("need at least 2 writes and 2 reads")
    if not 0 <= read_share <= 1:
        raise DomainError(f"read_share must be within [0, 1], got {read_share}")
    update_map = update_map or programming_update_map()
    policy = policy or default_policy(update_map)
    rng = rng or np.random.default_rng()

    def trial(child: np.random.Generator):
        result = write_verify(factory(), target, policy, update_map, child, relative_noise)
        g = result.final_conductance
        read_std = np.sqrt(read_share) * result.state.params.sigma_at(g)
        return result, g + child.normal(0.0, 1.0, n_reads) * read_std

    children = rng.spawn(n_writes)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trials = list(pool.map(trial, children))
    else:
        trials = [trial(c) for c in children]

    results = [r for r, _ in trials]
    samples = np.stack([s for _, s in trials])
    failed = sum(not r.converged for r in results)
    if failed:
        log.warning(f"{failed} of {n_writes} writes to {target} S did not converge")
    return SigmaResult(float(np.std(samples)), samples, failed, results)


def count_states(model: ErrorModel, g_lo: float, g_hi: float, points_per_decade: int = 100) -> float:
    """Number of distinguishable levels, the integral of dG / sigma_G(G)."""
    if not 0 < g_lo < g_hi:
        raise DomainError(f"need 0 < g_lo < g_hi, got {g_lo}, {g_hi}")
    n = max(2, ceil(points_per_decade * log10(g_hi / g_lo)) + 1)
    g = np.geomspace(g_lo, g_hi, n)
    # dG = G du with u = ln G
    return float(trapezoid(g / model.sigma_at(g), np.log(g)))


def default_map_grid() -> tuple[np.ndarray, np.ndarray]:
    """-1.6 V to +2.4 V in 0.1 V steps, 100 ns to 800 ns pulses."""
    return np.round(np.arange(-16, 25) * 0.1, 10), np.geomspace(100e-9, 800e-9, 4)


class SyntheticDevice:
    """A device under test reset to ``g0`` before every pulse."""

    def __init__(
        self,
        params: DeviceParams,
        truth: UpdateMap,
        g0: float,
        relative_noise: float = DEFAULT_RELATIVE_NOISE,
    ):
        self.params = params
        self.truth = truth
        self.g0 = g0
        self.relative_noise = relative_noise

    def __call__(self, pulse: PulseSpec, rng: np.random.Generator) -> tuple[float, float]:
        state = DeviceState(self.g0, self.params)
        after = apply_pulse(state, pulse, self.truth, self.relative_noise, rng)
        return self.g0, after.conductance


def collect_measurements(
    device: Callable[[PulseSpec, np.random.Generator], tuple[float, float]],
    voltage_grid: Sequence[float],
    duration_grid: Sequence[float],
    trials: int,
    rng: np.random.Generator,
) -> list[tuple[float, float, float, float]]:
    rows = []
    for v in voltage_grid:
        for t in duration_grid:
            pulse = PulseSpec(float(v), float(t))
            for _ in range(trials):
                before, after = device(pulse, rng)
                rows.append((pulse.voltage, pulse.duration, before, after))
    return rows


def write_measurements(fpath: Path | str, rows: Sequence[tuple[float, float, float, float]]):
    datafiles.write_table(fpath, MEASUREMENT_COLUMNS, rows)


def build_update_map(
    source: Callable[[PulseSpec, np.random.Generator], tuple[float, float]] | Path | str,
    voltage_grid: Sequence[float] | None = None,
    duration_grid: Sequence[float] | None = None,
    model: ErrorModel | None = None,
    trials: int = 10,
    rng: np.random.Generator | None = None,
    significance_sigma_multiple: float = 3.0,
) -> UpdateMap:
    """Update map from a device under test or a measurement file.

    Each cell holds the mean dG/G0 of its trials; cells whose mean step is
    within the significance boundary of ``model`` are zeroed.
    """
    if isinstance(source, (str, Path)):
        table = datafiles.read_table(source, MEASUREMENT_COLUMNS)
        rows = list(zip(*(table[c] for c in MEASUREMENT_COLUMNS)))
        if voltage_grid is None:
            voltage_grid = np.unique(table["v_volts"])
        if duration_grid is None:
            duration_grid = np.unique(table["t_seconds"])
    else:
        default_v, default_t = default_map_grid()
        voltage_grid = default_v if voltage_grid is None else voltage_grid
        duration_grid = default_t if duration_grid is None else duration_grid
        rows = collect_measurements(source, voltage_grid, duration_grid, trials, rng or np.random.default_rng())

    v = np.asarray(voltage_grid, dtype=float)
    t = np.asarray(duration_grid, dtype=float)
    if v.size == 0 or t.size == 0 or np.any(np.diff(v) <= 0) or np.any(np.diff(t) <= 0):
        raise DomainError("map grids must be non-empty and strictly ascending")

    cells = defaultdict(list)
    for volt, dur, before, after in rows:
        ii = np.flatnonzero(np.isclose(v, volt, rtol=0, atol=1e-9))
        jj = np.flatnonzero(np.isclose(t, dur, rtol=1e-9, atol=0))
        if ii.size == 0 or jj.size == 0:
            raise DataFileError(f"measurement at {volt} V, {dur} s is off the map grid")
        cells[ii[0], jj[0]].append((before, after))

    frac = np.zeros((v.size, t.size))
    for (ii, jj), pairs in cells.items():
        before, after = np.array(pairs).T
        step = np.mean(after - before)
        g0 = np.mean(before)
        sigma = model.sigma_at(g0) if model is not None else 0.0
        if abs(step) > significance_sigma_multiple * sigma:
            frac[ii, jj] = np.mean((after - before) / before)
    missing = v.size * t.size - len(cells)
    if missing:
        log.warning(f"{missing} map cells have no measurements and are left at zero")
    return UpdateMap(v, t, frac, significance_sigma_multiple)


@dataclass
class ArrayProgramResult:
    targets: np.ndarray
    final: np.ndarray
    pulses: np.ndarray
    converged: np.ndarray

    def decade_statistics(self) -> list[tuple[float, float, float, float]]:
        """Rows of (decade floor, mean absolute error, mean percent error, success rate)."""
        decades = np.floor(np.log10(self.targets) + 1e-9)
        abs_err = np.abs(self.final - self.targets)
        rows = []
        for d in np.unique(decades):
            sel = decades == d
            rows.append(
                (
                    float(10.0**d),
                    float(abs_err[sel].mean()),
                    float((abs_err[sel] / self.targets[sel]).mean() * 100),
                    float(self.converged[sel].mean()),
                )
            )
        return rows

    @property
    def success_rate(self) -> float:
        return float(self.converged.mean())


def program_array(
    targets: np.ndarray,
    initial: float | np.ndarray,
    params: DeviceParams,
    policy: ProgramPolicy,
    update_map: UpdateMap,
    rng: np.random.Generator,
    relative_noise: float = DEFAULT_RELATIVE_NOISE,
) -> ArrayProgramResult:
    """Write-verify every cell of an array of targets, in row-major order."""
    targets = np.asarray(targets, dtype=float)
    start = np.broadcast_to(np.asarray(initial, dtype=float), targets.shape)
    final = np.empty_like(targets)
    pulses = np.zeros(targets.shape, dtype=int)
    converged = np.zeros(targets.shape, dtype=bool)
    for idx in np.ndindex(targets.shape):
        result = write_verify(
            DeviceState(float(start[idx]), params), float(targets[idx]), policy, update_map, rng, relative_noise
        )
        final[idx] = result.final_conductance
        pulses[idx] = result.pulses_used
        converged[idx] = result.converged
    return ArrayProgramResult(targets, final, pulses, converged)
