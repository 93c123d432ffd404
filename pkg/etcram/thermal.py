"""Joule heating of the ETCRAM heater wire.

Two models: a lumped areal law P = dT * G * A, and a 2D steady-state
finite-volume conduction solve through a vacuum / wire / stack / substrate
cross-section with interfacial thermal conductances. The 2D plane holds the
wire length (x) and the vertical (y); the wire width only scales the source
density.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.stats import linregress

from . import datafiles
from ._dataclass import dataclass, frozen
from .errors import ConvergenceError, DataFileError, DomainError, SolverError


log = logging.getLogger(__name__)

VACUUM, WIRE, STACK, SUBSTRATE = 1, 2, 3, 4
DOMAIN_NAMES = {VACUUM: "vacuum", WIRE: "wire", STACK: "stack", SUBSTRATE: "substrate"}
SWEEP_COLUMNS = ["length_m", "p_crit_w", "grid_levels", "rise_per_watt"]
POWER_COLUMNS = ["feature_size_m", "power_w"]


@frozen
class ThermalStack:
    length: float = 100e-9
    vacuum_height: float = 500e-6
    wire_thickness: float = 5e-9
    stack_thickness: float = 250e-9
    substrate_thickness: float = 600e-6
    kappa_vacuum: float = 0.1
    kappa_wire: float = 10.0
    kappa_stack: float = 10.0
    kappa_substrate: float = 148.0
    # interfacial conductances, W/(m^2 K)
    g_vacuum_wire: float = 30.0
    g_wire_stack: float = 1e9
    g_stack_substrate: float = 1e9
    ambient: float = 293.15
    half_width: float = 50e-6

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise DomainError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.half_width <= self.length / 2:
            raise DomainError("the lateral half-width must exceed half the wire length")

    @property
    def width(self) -> float:
        return self.length

    @classmethod
    def from_json(cls, fpath: Path | str) -> ThermalStack:
        data = datafiles.read_json(fpath)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise DataFileError(f"{fpath}: unknown stack parameters {', '.join(sorted(unknown))}")
        try:
            return cls(**{k: float(v) for k, v in data.items()})
        except (TypeError, ValueError) as e:
            raise DataFileError(f"{fpath}: {e}") from e

    def to_json(self, fpath: Path | str):
        datafiles.write_json(fpath, asdict(self))

    def with_length(self, length: float) -> ThermalStack:
        return replace(self, length=length)

    def scaled(self, k: float) -> ThermalStack:
        """All conductivities and interfacial conductances multiplied by ``k``."""
        names = [f.name for f in fields(self) if f.name.startswith(("kappa_", "g_"))]
        return replace(self, **{n: getattr(self, n) * k for n in names})

    def kappa(self, domain: np.ndarray) -> np.ndarray:
        table = np.array([0.0, self.kappa_vacuum, self.kappa_wire, self.kappa_stack, self.kappa_substrate])
        return table[domain]

    def interface_resistance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """1/G_ij between domains, zero within one domain."""
        r = np.zeros((5, 5))
        for (d1, d2), g in {
            (VACUUM, WIRE): self.g_vacuum_wire,
            (VACUUM, STACK): self.g_vacuum_wire,
            (WIRE, STACK): self.g_wire_stack,
            (STACK, SUBSTRATE): self.g_stack_substrate,
        }.items():
            r[d1, d2] = r[d2, d1] = 1.0 / g
        return r[a, b]


@frozen
class MeshSpec:
    wire_cells: int = 5
    thickness_cells: int = 3
    substrate_cells: int = 8
    ratio: float = 1.5
    tolerance: float = 0.005
    max_levels: int = 5

    def __post_init__(self):
        if self.wire_cells % 2 == 0 or self.thickness_cells % 2 == 0:
            raise DomainError("wire cell counts must be odd so a cell sits at mid-channel")
        if not self.ratio >= 1:
            raise DomainError(f"grading ratio must be >= 1, got {self.ratio}")

    def level(self, n: int) -> MeshSpec:
        """The mesh after ``n`` refinements: counts doubled, grading ratio square-rooted."""
        mesh = self
        for _ in range(n):
            mesh = replace(
                mesh,
                wire_cells=2 * mesh.wire_cells + 1,
                thickness_cells=2 * mesh.thickness_cells + 1,
                substrate_cells=2 * mesh.substrate_cells,
                ratio=mesh.ratio**0.5,
            )
        return mesh


def _graded(length: float, first: float, ratio: float) -> np.ndarray:
    """Cell widths growing geometrically from ``first`` that sum to ``length``."""
    widths = []
    total, w = 0.0, first
    while total + w < length * (1 - 1e-12):
        widths.append(w)
        total += w
        w *= ratio
    rest = length - total
    if widths and rest < 0.5 * widths[-1]:
        widths[-1] += rest
    else:
        widths.append(rest)
    return np.array(widths)


@dataclass
class Grid:
    x_edges: np.ndarray
    y_edges: np.ndarray
    domain: np.ndarray
    center: tuple[int, int]

    @classmethod
    def build(cls, stack: ThermalStack, mesh: MeshSpec) -> Grid:
        half = stack.length / 2
        dx = stack.length / mesh.wire_cells
        outer = half + np.cumsum(_graded(stack.half_width - half, dx, mesh.ratio))
        wire = half * np.linspace(-1.0, 1.0, mesh.wire_cells + 1)
        x_edges = np.concatenate([-outer[::-1], wire, outer])

        t = stack.wire_thickness
        dy = t / mesh.thickness_cells
        stack_edges = -np.cumsum(_graded(stack.stack_thickness, dy, mesh.ratio))
        sub_first = stack.stack_thickness / mesh.substrate_cells
        sub_edges = -stack.stack_thickness - np.cumsum(
            _graded(stack.substrate_thickness, sub_first, mesh.ratio)
        )
        vac_edges = t + np.cumsum(_graded(stack.vacuum_height, dy, mesh.ratio))
        y_edges = np.concatenate(
            [sub_edges[::-1], stack_edges[::-1], np.linspace(0.0, t, mesh.thickness_cells + 1), vac_edges]
        )

        xc = 0.5 * (x_edges[:-1] + x_edges[1:])
        yc = 0.5 * (y_edges[:-1] + y_edges[1:])
        X, Y = np.meshgrid(xc, yc, indexing="ij")
        domain = np.full(X.shape, VACUUM, dtype=int)
        domain[Y < 0] = STACK
        domain[Y < -stack.stack_thickness] = SUBSTRATE
        domain[(Y > 0) & (Y < t) & (np.abs(X) < half)] = WIRE

        wire_bottom = sub_edges.size + stack_edges.size
        center = (xc.size // 2, wire_bottom + mesh.thickness_cells // 2)
        return cls(x_edges, y_edges, domain, center)

    @property
    def shape(self) -> tuple[int, int]:
        return self.domain.shape

    @property
    def dx(self) -> np.ndarray:
        return np.diff(self.x_edges)

    @property
    def dy(self) -> np.ndarray:
        return np.diff(self.y_edges)

    @property
    def x_centers(self) -> np.ndarray:
        return 0.5 * (self.x_edges[:-1] + self.x_edges[1:])

    @property
    def y_centers(self) -> np.ndarray:
        return 0.5 * (self.y_edges[:-1] + self.y_edges[1:])


@dataclass
class TemperatureField:
    grid: Grid
    # temperature rise above ambient, K
    rise: np.ndarray
    ambient: float
    power: float
    # heat leaving through the fixed-temperature sides, W
    boundary_heat_flow: float
    levels: int = 1
    history: list[float] = field(default_factory=list)

    @property
    def temperature(self) -> np.ndarray:
        return self.ambient + self.rise

    @property
    def domain(self) -> np.ndarray:
        return self.grid.domain

    @property
    def mid_channel_rise(self) -> float:
        return float(self.rise[self.grid.center])

    def scaled(self, power: float) -> TemperatureField:
        """Field at ``power``, valid because the problem is linear in the source."""
        k = power / self.power
        return TemperatureField(
            self.grid, self.rise * k, self.ambient, power, self.boundary_heat_flow * k, self.levels, self.history
        )


def _solve_on_grid(stack: ThermalStack, grid: Grid, power: float) -> TemperatureField:
    nx, ny = grid.shape
    dx, dy = grid.dx, grid.dy
    dom = grid.domain
    kap = stack.kappa(dom)
    index = np.arange(nx * ny).reshape(nx, ny)

    # x faces between (i, j) and (i + 1, j)
    half_x = 0.5 * dx[:, None] / kap
    gx = dy[None, :] / (half_x[:-1] + half_x[1:] + stack.interface_resistance(dom[:-1], dom[1:]))
    # y faces between (i, j) and (i, j + 1)
    half_y = 0.5 * dy[None, :] / kap
    gy = dx[:, None] / (half_y[:, :-1] + half_y[:, 1:] + stack.interface_resistance(dom[:, :-1], dom[:, 1:]))
    # fixed-temperature sides
    g_left = dy / half_x[0]
    g_right = dy / half_x[-1]

    diag = np.zeros((nx, ny))
    diag[:-1] += gx
    diag[1:] += gx
    diag[:, :-1] += gy
    diag[:, 1:] += gy
    diag[0] += g_left
    diag[-1] += g_right

    rows = np.concatenate([index[:-1].ravel(), index[1:].ravel(), index[:, :-1].ravel(), index[:, 1:].ravel()])
    cols = np.concatenate([index[1:].ravel(), index[:-1].ravel(), index[:, 1:].ravel(), index[:, :-1].ravel()])
    vals = -np.concatenate([gx.ravel(), gx.ravel(), gy.ravel(), gy.ravel()])
    matrix = sp.coo_matrix((vals, (rows, cols)), shape=(nx * ny, nx * ny)) + sp.diags(diag.ravel())

    # volumetric source P / (W L t), per unit depth of the cross-section
    density = power / (stack.width * stack.length * stack.wire_thickness)
    source = np.where(dom == WIRE, density * dx[:, None] * dy[None, :], 0.0)

    rise = spsolve(matrix.tocsc(), source.ravel()).reshape(nx, ny)
    if not np.all(np.isfinite(rise)):
        raise SolverError("heat conduction solve produced non-finite temperatures")
    outflow = stack.width * float(np.sum(g_left * rise[0]) + np.sum(g_right * rise[-1]))
    return TemperatureField(grid, rise, stack.ambient, power, outflow)


def _unit_field(stack: ThermalStack, mesh: MeshSpec) -> TemperatureField:
    """1 W field, refined until the mid-channel rise settles."""
    history = []
    for level in range(mesh.max_levels):
        grid = Grid.build(stack, mesh.level(level))
        unit = _solve_on_grid(stack, grid, 1.0)
        history.append(unit.mid_channel_rise)
        log.debug(f"L={stack.length:.3g} m level {level}: {grid.shape} cells, {history[-1]:.6g} K/W")
        if len(history) > 1 and abs(history[-1] - history[-2]) < mesh.tolerance * abs(history[-2]):
            unit.levels = level + 1
            unit.history = history
            return unit
    estimates = (history[-2], history[-1]) if len(history) > 1 else (history[-1], history[-1])
    raise ConvergenceError(
        f"mid-channel rise not converged after {mesh.max_levels} refinement levels", estimates
    )


def solve_temperature(stack: ThermalStack, power: float, mesh: MeshSpec = MeshSpec()) -> TemperatureField:
    if power < 0:
        raise DomainError(f"power must be non-negative, got {power}")
    return _unit_field(stack, mesh).scaled(power)


def critical_power(stack: ThermalStack, target_rise: float = 300.0, mesh: MeshSpec = MeshSpec()) -> float:
    """Power giving ``target_rise`` kelvin at mid-channel."""
    return _critical_power(stack, target_rise, mesh)[0]


def _critical_power(stack: ThermalStack, target_rise: float, mesh: MeshSpec) -> tuple[float, TemperatureField]:
    if target_rise < 0:
        raise DomainError(f"target rise must be non-negative, got {target_rise}")
    unit = _unit_field(stack, mesh)
    per_watt = unit.mid_channel_rise
    if not per_watt > 0:
        raise DomainError("stack has zero temperature rise per watt")
    p_crit = target_rise / per_watt
    if p_crit > 0:
        check = _solve_on_grid(stack, unit.grid, p_crit).mid_channel_rise
        if abs(check - target_rise) > 1e-3 * target_rise:
            raise SolverError(f"confirmation solve gave {check} K instead of {target_rise} K")
    return p_crit, unit


@dataclass
class LengthPoint:
    length: float
    p_crit: float
    grid_levels: int
    rise_per_watt: float

    def as_row(self) -> list:
        return [self.length, self.p_crit, self.grid_levels, self.rise_per_watt]


def sweep_length(
    stack: ThermalStack,
    lengths: Sequence[float],
    target_rise: float = 300.0,
    mesh: MeshSpec = MeshSpec(),
    workers: int = 1,
) -> list[LengthPoint]:
    """Critical power against wire length, with width equal to length."""
    lengths = [float(v) for v in lengths]
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise DomainError("lengths must be strictly ascending")
    if len(lengths) < 3:
        log.warning(f"length sweep with only {len(lengths)} points")

    def point(length):
        p, unit = _critical_power(stack.with_length(length), target_rise, mesh)
        log.info(f"L = {length:.3g} m: P_crit = {p:.4g} W ({unit.levels} levels)")
        return LengthPoint(length, p, unit.levels, unit.mid_channel_rise)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(point, lengths))
    return [point(v) for v in lengths]


def write_sweep(fpath: Path | str, points: Sequence[LengthPoint]):
    datafiles.write_table(fpath, SWEEP_COLUMNS, (p.as_row() for p in points))


def lumped_critical_power(delta_t: float, areal_conductance: float, area: float) -> float:
    if min(delta_t, areal_conductance, area) < 0:
        raise DomainError("lumped heating inputs must be non-negative")
    return delta_t * areal_conductance * area


def fit_power_law(points: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """(exponent, prefactor, exponent standard error) of P = c F^n by log-log least squares."""
    if len(points) < 3:
        raise DomainError(f"need at least 3 points for a power law fit, got {len(points)}")
    f, p = np.array(points, dtype=float).T
    if np.any(f <= 0) or np.any(p <= 0):
        raise DomainError("power law points must be positive")
    fit = linregress(np.log(f), np.log(p))
    return float(fit.slope), float(np.exp(fit.intercept)), float(fit.stderr)


def read_power_points(fpath: Path | str) -> list[tuple[float, float]]:
    table = datafiles.read_table(fpath, POWER_COLUMNS)
    return list(zip(table["feature_size_m"].tolist(), table["power_w"].tolist()))
