"""Peripheral-energy arithmetic, conductance noise spectra, and heater thermometry."""

from __future__ import annotations

import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import fft, signal
from scipy.integrate import trapezoid
from scipy.stats import linregress

from . import datafiles
from ._dataclass import frozen
from .errors import DataFileError, DomainError


log = logging.getLogger(__name__)

ROOM_TEMPERATURE = 293.15
SPECTRUM_COLUMNS = ["frequency_hz", "psd"]
TRACE_COLUMNS = ["t_seconds", "current_amperes"]
TCR_COLUMNS = ["temperature_k", "resistance_ohms"]


@frozen
class EnergyScenario:
    cycles: int
    per_input_overhead_fraction: float
    array_size_ratio: float
    label: str = ""
    target_cycles: int = 2

    def __post_init__(self):
        if self.cycles < 1 or self.target_cycles < 1:
            raise DomainError("cycle counts must be at least 1")
        if self.per_input_overhead_fraction < 0 or self.array_size_ratio < 0:
            raise DomainError("energy fractions and ratios must be non-negative")


def encoding_energy_factor(baseline_cycles: int = 8, target_cycles: int = 2, overhead: float = 0.36) -> float:
    """Energy saved by running ``target_cycles`` multi-level cycles instead of ``baseline_cycles``
    binary ones, when each multi-level input costs ``overhead`` more driver energy."""
    if baseline_cycles <= 0 or target_cycles <= 0 or overhead < 0:
        raise DomainError("cycle counts must be positive and overhead non-negative")
    return baseline_cycles / (target_cycles * (1 + overhead))


def driver_overhead_fraction(
    driver_energy: float = 110e-12,
    drivers: int = 1152,
    adc_energy: float = 300e-12,
    adcs: int = 256,
    rows: int = 4608,
    cols: int = 512,
    amplifier_factor: float = 2.0,
) -> float:
    """Input-driver energy of one array as a fraction of its output-circuit energy.

    ``amplifier_factor`` accounts for the column amplifier added in front of
    each converter.
    """
    if min(driver_energy, drivers, adc_energy, adcs, rows, cols, amplifier_factor) <= 0:
        raise DomainError("energies, counts and factors must be positive")
    per_driver = driver_energy / drivers
    per_output = adc_energy / adcs
    return rows * per_driver / (cols * per_output) / amplifier_factor


def overall_energy_advantage(scenario: EnergyScenario, linearity_applies: bool) -> float:
    factor = 1.0
    if linearity_applies:
        factor = encoding_energy_factor(scenario.cycles, scenario.target_cycles, scenario.per_input_overhead_fraction)
    return scenario.array_size_ratio * factor


# iso-accuracy array size ratios against ETCRAM, and whether the I-V linearity benefit is credited
ENERGY_PRESETS = {
    "sonos": (EnergyScenario(8, 0.36, 3.2, "SONOS"), True),
    "pcm": (EnergyScenario(8, 0.36, 22.0, "PCM"), True),
    "memristor": (EnergyScenario(8, 0.36, 64.0, "memristor"), False),
}


def energy_preset(name: str) -> tuple[EnergyScenario, bool]:
    try:
        return ENERGY_PRESETS[name.lower()]
    except KeyError:
        raise DomainError(f"no energy scenario for {name}, expected one of {', '.join(ENERGY_PRESETS)}")


@frozen(eq=False)
class NoiseSpectrum:
    frequencies: np.ndarray
    psd: np.ndarray
    averages: int = 1

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=float)
        s = np.asarray(self.psd, dtype=float)
        if f.ndim != 1 or f.shape != s.shape or f.size == 0:
            raise DomainError("spectrum needs matching non-empty frequency and psd arrays")
        if np.any(np.diff(f) <= 0):
            raise DomainError("spectrum frequencies must be strictly ascending")
        if np.any(s < 0):
            raise DomainError("spectral density must be non-negative")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "psd", s)

    @classmethod
    def from_csv(cls, fpath: Path | str) -> NoiseSpectrum:
        table = datafiles.read_table(fpath, SPECTRUM_COLUMNS)
        try:
            return cls(table["frequency_hz"], table["psd"])
        except DomainError as e:
            raise DataFileError(f"{fpath}: {e}") from e

    def to_csv(self, fpath: Path | str):
        datafiles.write_table(fpath, SPECTRUM_COLUMNS, zip(self.frequencies, self.psd))

    def band(self, f_lo: float, f_hi: float) -> tuple[np.ndarray, np.ndarray]:
        sel = (self.frequencies >= f_lo) & (self.frequencies <= f_hi)
        return self.frequencies[sel], self.psd[sel]


def psd_estimate(
    timeseries: np.ndarray,
    sample_rate: float,
    segments: int = 50,
    window: str = "boxcar",
    normalize: bool = True,
) -> NoiseSpectrum:
    """One-sided PSD averaged over ``segments`` non-overlapping segments.

    With ``normalize`` the density is divided by the squared mean of the
    series, giving a relative noise density in 1/Hz.
    """
    x = np.asarray(timeseries, dtype=float)
    if segments < 1 or x.size < 2 * segments:
        raise DomainError(f"{x.size} samples cannot be split into {segments} segments")
    nperseg = x.size // segments
    f, pxx = signal.welch(
        x[: nperseg * segments],
        fs=sample_rate,
        window=window,
        nperseg=nperseg,
        noverlap=0,
        detrend="constant",
        scaling="density",
        average="mean",
    )
    if normalize:
        mean = np.mean(x)
        if mean == 0:
            raise DomainError("cannot normalize the spectrum of a zero-mean series")
        pxx = pxx / mean**2
    return NoiseSpectrum(f, pxx, segments)


def synthesize_noise(
    n: int,
    sample_rate: float,
    floor: float,
    corner: float,
    alpha: float = 1.0,
    rng: np.random.Generator | None = None,
    mean: float = 1.0,
) -> np.ndarray:
    """Series whose relative one-sided PSD is floor * (1 + (corner / f) ** alpha)."""
    rng = rng or np.random.default_rng()
    f = fft.rfftfreq(n, 1.0 / sample_rate)
    shape = np.zeros_like(f)
    shape[1:] = floor * (1.0 + (corner / f[1:]) ** alpha)
    # E|X_k|^2 = n * fs * S_k / 2 for a one-sided density S_k
    amplitude = np.sqrt(shape * n * sample_rate / 2.0)
    spectrum = amplitude * (rng.standard_normal(f.size) + 1j * rng.standard_normal(f.size)) / np.sqrt(2.0)
    if n % 2 == 0:
        spectrum[-1] = amplitude[-1] * rng.standard_normal()
    return mean * (1.0 + fft.irfft(spectrum, n))


def fit_spectrum_slope(spectrum: NoiseSpectrum, band: tuple[float, float]) -> float:
    """Log-log slope of the spectrum within ``band``."""
    f, s = spectrum.band(*band)
    keep = (f > 0) & (s > 0)
    if keep.sum() < 2:
        raise DomainError(f"fewer than two usable points in {band} Hz")
    return float(linregress(np.log10(f[keep]), np.log10(s[keep])).slope)


def integrate_noise(
    spectrum: NoiseSpectrum,
    floor_band: tuple[float, float] = (1e3, 1.598e3),
    integration_band: tuple[float, float] = (1e3, 1e8),
    include_measured_below: bool = False,
) -> float:
    """Noise variance with the floor projected across the integration band.

    The floor is the mean density over ``floor_band``. With
    ``include_measured_below`` the measured density below the band is added
    by the trapezoid rule.
    """
    f_min, f_max = spectrum.frequencies[0], spectrum.frequencies[-1]
    if floor_band[0] < f_min or floor_band[1] > f_max:
        raise DomainError(f"floor band {floor_band} Hz outside the measured {f_min}-{f_max} Hz")
    _, floor_psd = spectrum.band(*floor_band)
    if floor_psd.size == 0:
        raise DomainError(f"no spectral points within the floor band {floor_band} Hz")
    f_lo, f_hi = integration_band
    variance = float(np.mean(floor_psd)) * (f_hi - f_lo)
    if include_measured_below:
        f, s = spectrum.band(0.0, f_lo)
        if f.size > 1:
            variance += float(trapezoid(s, f))
    return variance


def read_trace(fpath: Path | str) -> tuple[np.ndarray, float]:
    """Current samples and sample rate of a uniformly sampled trace."""
    table = datafiles.read_table(fpath, TRACE_COLUMNS)
    t = table["t_seconds"]
    if t.size < 2 or np.any(np.diff(t) <= 0):
        raise DataFileError(f"{fpath}: trace times must be strictly ascending")
    dt = np.diff(t)
    if np.ptp(dt) > 1e-6 * np.mean(dt):
        log.warning(f"{fpath}: sample spacing varies, using the mean interval")
    return table["current_amperes"], float(1.0 / np.mean(dt))


@frozen
class TcrCalibration:
    # slope of resistance against temperature, ohm/K
    alpha: float
    # resistance at room temperature, ohm
    r0: float
    size_label: str = ""

    def __post_init__(self):
        if not (self.alpha > 0 and self.r0 > 0):
            raise DomainError(f"TCR fit needs positive slope and resistance, got {self.alpha}, {self.r0}")


def tcr_fit(pairs: Sequence[tuple[float, float]], size_label: str = "") -> TcrCalibration:
    t, r = np.array(pairs, dtype=float).reshape(-1, 2).T
    if np.unique(t).size < 2:
        raise DomainError("TCR fit needs at least two distinct temperatures")
    fit = linregress(t - ROOM_TEMPERATURE, r)
    return TcrCalibration(float(fit.slope), float(fit.intercept), size_label)


def read_tcr(fpath: Path | str, size_label: str | None = None) -> TcrCalibration:
    table = datafiles.read_table(fpath, TCR_COLUMNS)
    label = Path(fpath).stem if size_label is None else size_label
    return tcr_fit(list(zip(table["temperature_k"], table["resistance_ohms"])), label)


def mean_calibration(cals: Sequence[TcrCalibration], r0: float) -> TcrCalibration:
    """Average slope of several heaters, applied around ``r0``."""
    if not cals:
        raise DomainError("no calibrations to average")
    alpha = float(np.mean([c.alpha for c in cals]))
    return TcrCalibration(alpha, r0, "average")


def heater_calibrations(cals: Sequence[TcrCalibration]) -> list[TcrCalibration]:
    """Each heater around its own room-temperature resistance, with the slope averaged over all heaters."""
    return [replace(mean_calibration(cals, c.r0), size_label=c.size_label) for c in cals]


def temperature_from_resistance(cal: TcrCalibration, r: float) -> float:
    """Temperature rise above room temperature, K."""
    if not r > 0:
        raise DomainError(f"resistance must be positive, got {r}")
    return (r - cal.r0) / cal.alpha
