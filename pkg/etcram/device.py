"""Behavioral model of a single ETCRAM cell.

The cell is a conductance state machine: write pulses move the state by an
amount looked up in an update map, reads are Ohmic, and the total
write-and-read scatter is described by a state-dependent error curve. SONOS,
PCM and memristor devices are modeled only through their range and error
curve.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from . import datafiles
from ._dataclass import frozen
from .errors import DataFileError, DomainError, GridClampWarning, ReadWindowWarning


log = logging.getLogger(__name__)

# positivity floor for any sampled conductance, S
G_FLOOR = 1e-13
# Ohmic read window, V
READ_WINDOW = 0.05
DEFAULT_RELATIVE_NOISE = 0.10


@frozen(eq=False)
class ErrorModel:
    """Conductance error sigma_G(G) as log-log interpolated anchor points."""

    conductance: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.conductance, dtype=float)).copy()
        s = np.atleast_1d(np.asarray(self.sigma, dtype=float)).copy()
        if g.ndim != 1 or g.shape != s.shape:
            raise DomainError("error model anchors need matching 1D conductance and sigma")
        if g.size == 0:
            raise DomainError("error model needs at least one anchor")
        if not (np.all(g > 0) and np.all(s > 0)):
            raise DomainError("error model anchors must be strictly positive")
        if np.any(np.diff(g) <= 0):
            raise DomainError("error model anchors must be strictly ascending in conductance")
        g.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "conductance", g)
        object.__setattr__(self, "sigma", s)

    @classmethod
    def from_anchors(cls, anchors: Sequence[tuple[float, float]]) -> ErrorModel:
        if len(anchors) == 0:
            raise DomainError("error model needs at least one anchor")
        g, s = zip(*anchors)
        return cls(np.array(g), np.array(s))

    @classmethod
    def from_csv(cls, fpath: Path | str) -> ErrorModel:
        table = datafiles.read_table(fpath, ["g_siemens", "sigma_siemens"])
        try:
            return cls(table["g_siemens"], table["sigma_siemens"])
        except DomainError as e:
            raise DataFileError(f"{fpath}: {e}") from e

    def to_csv(self, fpath: Path | str):
        datafiles.write_table(fpath, ["g_siemens", "sigma_siemens"], zip(self.conductance, self.sigma))

    @property
    def anchors(self) -> list[tuple[float, float]]:
        return [(float(g), float(s)) for g, s in zip(self.conductance, self.sigma)]

    def scaled(self, k: float) -> ErrorModel:
        if not k > 0:
            raise DomainError(f"error scale must be positive, got {k}")
        return ErrorModel(self.conductance, self.sigma * k)

    def sigma_at(self, g):
        g_arr = np.asarray(g, dtype=float)
        if not np.all(g_arr > 0):
            raise DomainError(f"conductance must be positive, got {g}")
        # np.interp holds the end values, which is the constant extrapolation
        s = np.exp(np.interp(np.log(g_arr), np.log(self.conductance), np.log(self.sigma)))
        return float(s) if s.ndim == 0 else s


def sigma_at(model: ErrorModel, g):
    return model.sigma_at(g)


@frozen(eq=False)
class DeviceParams:
    g_min: float
    g_max: float
    error_model: ErrorModel | None = None
    # multi-level voltage inputs allowed
    iv_linear: bool = False
    label: str = "device"

    def __post_init__(self):
        if not 0 < self.g_min < self.g_max:
            raise DomainError(f"{self.label}: need 0 < g_min < g_max, got {self.g_min}, {self.g_max}")

    def sigma_at(self, g):
        if self.error_model is None:
            return 0.0 if np.ndim(g) == 0 else np.zeros(np.shape(g))
        return self.error_model.sigma_at(g)

    def with_error_model(self, model: ErrorModel | None) -> DeviceParams:
        return replace(self, error_model=model)


@frozen
class PulseSpec:
    voltage: float
    duration: float

    def __post_init__(self):
        if not self.duration > 0:
            raise DomainError(f"pulse duration must be positive, got {self.duration}")


@frozen
class CorrectedWidth:
    seconds: float
    sub_transient: bool


@frozen
class DeviceState:
    conductance: float
    params: DeviceParams
    write_count: int = 0

    def __post_init__(self):
        if not self.conductance > 0:
            raise DomainError(f"conductance must be positive, got {self.conductance}")
        if self.write_count < 0:
            raise DomainError(f"write count must be non-negative, got {self.write_count}")


@frozen
class RetentionParams:
    reference_temperature: float
    fraction_per_decade: float
    onset_time: float

    def __post_init__(self):
        if self.fraction_per_decade < 0:
            raise DomainError(f"fraction_per_decade must be >= 0, got {self.fraction_per_decade}")
        if not self.onset_time > 0:
            raise DomainError(f"onset_time must be positive, got {self.onset_time}")


def _padded_axis(axis: np.ndarray) -> np.ndarray:
    # lookups are clipped to the real axis first, so the pad point is never reached
    return np.append(axis, axis[0] + 1.0) if axis.size == 1 else axis


@frozen(eq=False)
class UpdateMap:
    """Fractional conductance change per pulse on a (voltage, log duration) grid."""

    voltage_grid: np.ndarray
    duration_grid: np.ndarray
    delta_fraction: np.ndarray
    significance_sigma_multiple: float = 3.0
    interpolator: RegularGridInterpolator = field(init=False, repr=False)

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.voltage_grid, dtype=float)).copy()
        t = np.atleast_1d(np.asarray(self.duration_grid, dtype=float)).copy()
        frac = np.asarray(self.delta_fraction, dtype=float)
        if v.size == 0 or t.size == 0:
            raise DomainError("update map grids must be non-empty")
        if frac.size != v.size * t.size:
            raise DomainError(f"update map needs {v.size}x{t.size} values, got {frac.shape}")
        frac = frac.reshape(v.size, t.size).copy()
        if np.any(np.diff(v) <= 0) or np.any(np.diff(t) <= 0):
            raise DomainError("update map grids must be strictly ascending")
        if not np.all(t > 0):
            raise DomainError("update map durations must be positive")
        if not np.all(np.isfinite(frac)):
            raise DomainError("update map contains non-finite values")
        wrong_sign = (frac != 0) & (np.sign(frac) != np.sign(v)[:, None])
        if np.any(wrong_sign):
            ii, jj = np.argwhere(wrong_sign)[0]
            raise DomainError(f"update map sign mismatch at {v[ii]} V, {t[jj]} s")
        if self.significance_sigma_multiple < 0:
            raise DomainError("significance multiple must be non-negative")

        for arr in (v, t, frac):
            arr.flags.writeable = False
        object.__setattr__(self, "voltage_grid", v)
        object.__setattr__(self, "duration_grid", t)
        object.__setattr__(self, "delta_fraction", frac)

        padded = frac
        if v.size == 1:
            padded = np.vstack([padded, padded])
        if t.size == 1:
            padded = np.hstack([padded, padded])
        interp = RegularGridInterpolator(
            (_padded_axis(v), _padded_axis(np.log10(t))), padded, method="linear"
        )
        object.__setattr__(self, "interpolator", interp)

    @classmethod
    def from_csv(cls, fpath: Path | str, significance_sigma_multiple: float = 3.0) -> UpdateMap:
        table = datafiles.read_table(fpath, ["v_volts", "t_seconds", "delta_fraction"])
        v = np.unique(table["v_volts"])
        t = np.unique(table["t_seconds"])
        if v.size * t.size != table["v_volts"].size:
            raise DataFileError(f"{fpath}: update map is not a rectangular grid")
        frac = np.full((v.size, t.size), np.nan)
        frac[np.searchsorted(v, table["v_volts"]), np.searchsorted(t, table["t_seconds"])] = table[
            "delta_fraction"
        ]
        if np.any(np.isnan(frac)):
            raise DataFileError(f"{fpath}: update map has duplicate or missing cells")
        try:
            return cls(v, t, frac, significance_sigma_multiple)
        except DomainError as e:
            raise DataFileError(f"{fpath}: {e}") from e

    def to_csv(self, fpath: Path | str):
        rows = (
            (v, t, self.delta_fraction[ii, jj])
            for ii, v in enumerate(self.voltage_grid)
            for jj, t in enumerate(self.duration_grid)
        )
        datafiles.write_table(fpath, ["v_volts", "t_seconds", "delta_fraction"], rows)

    def fraction(self, voltage, duration):
        """Bilinear lookup in (voltage, log10 duration), clamped to the grid edges."""
        v = np.asarray(voltage, dtype=float)
        t = np.asarray(duration, dtype=float)
        if not np.all(t > 0):
            raise DomainError("pulse duration must be positive")
        v_lo, v_hi = self.voltage_grid[0], self.voltage_grid[-1]
        t_lo, t_hi = self.duration_grid[0], self.duration_grid[-1]
        v_c = np.clip(v, v_lo, v_hi)
        t_c = np.clip(t, t_lo, t_hi)
        if np.any(v_c != v) or np.any(t_c != t):
            msg = f"pulse outside update map grid [{v_lo}, {v_hi}] V x [{t_lo}, {t_hi}] s, clamped"
            log.warning(msg)
            warnings.warn(msg, GridClampWarning, stacklevel=2)
        v_c, t_c = np.broadcast_arrays(v_c, np.log10(t_c))
        out = self.interpolator(np.stack([v_c.ravel(), t_c.ravel()], axis=-1)).reshape(v_c.shape)
        return float(out) if out.ndim == 0 else out

    def significant(self, g0: float, sigma: float) -> np.ndarray:
        """Mask of grid cells whose step from ``g0`` exceeds the significance boundary."""
        return np.abs(self.delta_fraction * g0) > self.significance_sigma_multiple * sigma


def synthetic_response(voltage, duration):
    """Ground-truth fractional update of the reference cell.

    Threshold-exponential in voltage above 1.2 V, square root in duration.
    Calibrated to about +2 % per +2.4 V / 1 us pulse; depression is bounded
    above -1.
    """
    v = np.asarray(voltage, dtype=float)
    drive = np.sqrt(np.asarray(duration, dtype=float) / 1e-6)
    over = np.maximum(np.abs(v) - 1.2, 0.0) / 0.3
    pot = 3.73e-4 * np.expm1(over) * drive
    dep = -(1.0 - np.exp(-1.51e-3 * np.expm1(over) * drive))
    return np.where(v > 1.2, pot, np.where(v < -1.2, dep, 0.0))


def synthetic_update_map(
    voltage_grid: Sequence[float],
    duration_grid: Sequence[float],
    response: Callable = synthetic_response,
    significance_sigma_multiple: float = 3.0,
) -> UpdateMap:
    v = np.asarray(voltage_grid, dtype=float)
    t = np.asarray(duration_grid, dtype=float)
    frac = response(v[:, None], t[None, :])
    return UpdateMap(v, t, frac, significance_sigma_multiple)


def programming_voltage_grid() -> np.ndarray:
    return np.round(np.arange(-28, 29) * 0.1, 10)


def programming_duration_grid() -> np.ndarray:
    # 100 ns to 1 ms, three points per decade
    return 10.0 ** (np.arange(-21, -8) / 3.0)


def programming_update_map() -> UpdateMap:
    return synthetic_update_map(programming_voltage_grid(), programming_duration_grid())


def read_current(
    state: DeviceState, v_read: float, window: float = READ_WINDOW, allow_nonlinear: bool = False
) -> float:
    if abs(v_read) > window and not allow_nonlinear:
        msg = f"read bias {v_read} V outside the {window} V Ohmic window"
        warnings.warn(msg, ReadWindowWarning, stacklevel=2)
    return state.conductance * v_read


def apply_pulse(
    state: DeviceState,
    pulse: PulseSpec,
    update_map: UpdateMap,
    relative_noise: float = DEFAULT_RELATIVE_NOISE,
    rng: np.random.Generator | None = None,
) -> DeviceState:
    g0 = state.conductance
    dg = g0 * update_map.fraction(pulse.voltage, pulse.duration)
    threshold = update_map.significance_sigma_multiple * state.params.sigma_at(g0)

    if abs(dg) <= threshold:
        dg = 0.0
    elif relative_noise > 0:
        if rng is None:
            raise DomainError("a random generator is required when relative_noise > 0")
        # a step never reverses its direction
        dg *= max(0.0, 1.0 + rng.normal(0.0, relative_noise))

    ceiling = max(state.params.g_max, g0)
    g = min(max(g0 + dg, G_FLOOR), ceiling)
    return replace(state, conductance=g, write_count=state.write_count + 1)


def pulse_train(
    state: DeviceState,
    pulse: PulseSpec,
    n: int,
    update_map: UpdateMap,
    relative_noise: float = DEFAULT_RELATIVE_NOISE,
    rng: np.random.Generator | None = None,
) -> tuple[DeviceState, np.ndarray]:
    """Apply ``n`` identical pulses, returning the final state and the n+1 point trace."""
    trace = np.empty(n + 1)
    trace[0] = state.conductance
    for ii in range(n):
        state = apply_pulse(state, pulse, update_map, relative_noise, rng)
        trace[ii + 1] = state.conductance
    return state, trace


def drift(state: DeviceState, temperature: float, elapsed: float, params: RetentionParams) -> DeviceState:
    if elapsed < 0:
        raise DomainError(f"elapsed time must be non-negative, got {elapsed}")
    if temperature != params.reference_temperature:
        log.debug(
            f"drift at {temperature} K uses the {params.reference_temperature} K calibration unchanged"
        )
    loss = params.fraction_per_decade * np.log10(1.0 + elapsed / params.onset_time)
    g = max(state.conductance * (1.0 - loss), G_FLOOR)
    return replace(state, conductance=float(g))


def calibrate_retention(
    drop_fraction: float, elapsed: float, onset_time: float, temperature: float
) -> RetentionParams:
    """Retention parameters whose drift loses ``drop_fraction`` after ``elapsed`` seconds."""
    if not (0 <= drop_fraction < 1 and elapsed > 0):
        raise DomainError("need 0 <= drop_fraction < 1 and elapsed > 0")
    per_decade = drop_fraction / np.log10(1.0 + elapsed / onset_time)
    return RetentionParams(temperature, float(per_decade), onset_time)


# 200 C bake: 10.3 % after 20 h from the low state, 0.09 % after 3 h from the high state
LOW_STATE_RETENTION = calibrate_retention(0.103, 20 * 3600.0, 200.0, 473.15)
HIGH_STATE_RETENTION = calibrate_retention(0.0009, 3 * 3600.0, 240.0, 473.15)


def correct_pulse_width(nominal: float, slope: float = 0.99, intercept: float = -102e-9) -> CorrectedWidth:
    """Actual pulse width delivered for a nominal setting, from a linear fit."""
    if not nominal > 0:
        raise DomainError(f"nominal pulse width must be positive, got {nominal}")
    actual = slope * nominal + intercept
    if actual < 0:
        log.warning(f"nominal width {nominal} s is below the driver transient, clamped to 0")
        return CorrectedWidth(0.0, True)
    return CorrectedWidth(actual, False)


_PRESETS = {
    "etcram": (1e-9, 1.6e-6, True, "ETCRAM"),
    "sonos": (10e-12, 16.0e-6, False, "SONOS"),
    "pcm": (0.47e-6, 25.0e-6, False, "PCM"),
    "memristor": (0.57e-6, 39.3e-6, False, "memristor"),
}
DEVICE_NAMES = list(_PRESETS)


def device_preset(name: str, error_model: ErrorModel | None | str = "shipped") -> DeviceParams:
    """Range and linearity of a named device with its shipped error curve.

    Pass ``error_model=None`` for an error-free device, or an ErrorModel to
    override the shipped curve.
    """
    key = name.lower()
    if key not in _PRESETS:
        raise DomainError(f"unknown device {name}, expected one of {', '.join(_PRESETS)}")
    g_min, g_max, iv_linear, label = _PRESETS[key]
    if isinstance(error_model, str):
        error_model = ErrorModel.from_csv(datafiles.data_path(f"{key}_sigma.csv"))
    return DeviceParams(g_min, g_max, error_model, iv_linear, label)


def device_presets() -> dict[str, DeviceParams]:
    return {name: device_preset(name) for name in _PRESETS}
