"""Crossbar matrix-vector multiplication with parasitic wire resistance.

Signed weights are stored as differential conductance pairs. Inputs are
quantized to 8 bits and applied over several read cycles, either one bit
per cycle or one 4-bit nibble per cycle. Each cycle solves the resistive
network of the array: drivers at the left end of every row, virtual grounds
at the bottom of every column, one wire segment between neighbouring cells.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.sparse.linalg import LinearOperator, cg, splu

from . import datafiles
from ._dataclass import dataclass, frozen
from .device import G_FLOOR, DeviceParams, ErrorModel
from .errors import DomainError, SolverError


log = logging.getLogger(__name__)

SCHEMES = ("bit_serial_1x8", "nibble_4x2")
# physical cells solved by one sparse LU shared by every drive; larger arrays use preconditioned CG
DIRECT_LIMIT = 300_000
# right-hand side entries held in memory at once
RHS_BUDGET = 20_000_000
SWEEP_COLUMNS = ["device", "array_rows", "rw_ohms", "encoding", "normalized_rms", "rms", "signal_range", "seed"]
DEFAULT_ROWS = (72, 144, 288, 576, 1152, 2304, 4608)


@frozen
class CrossbarConfig:
    # ohms per cell-to-cell segment, rows and columns alike
    wire_resistance: float = 0.35
    full_scale_voltage: float = 0.1
    interleave: bool = True
    solver_tolerance: float = 1e-9
    max_iterations: int = 10_000

    def __post_init__(self):
        if self.wire_resistance < 0:
            raise DomainError(f"wire_resistance must be >= 0, got {self.wire_resistance}")
        if not self.full_scale_voltage > 0:
            raise DomainError(f"full_scale_voltage must be positive, got {self.full_scale_voltage}")
        if not self.solver_tolerance > 0:
            raise DomainError(f"solver_tolerance must be positive, got {self.solver_tolerance}")


@frozen(eq=False)
class MappedArray:
    g_plus: np.ndarray
    g_minus: np.ndarray
    target_plus: np.ndarray
    target_minus: np.ndarray
    # siemens per weight unit
    weight_scale: float
    params: DeviceParams
    weights: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.g_plus.shape

    def physical_conductance(self, interleave: bool = True) -> np.ndarray:
        """rows x 2*cols conductances in physical column order."""
        if interleave:
            return np.stack([self.g_plus, self.g_minus], axis=2).reshape(self.shape[0], -1)
        return np.hstack([self.g_plus, self.g_minus])

    def target_weights(self) -> np.ndarray:
        return (self.target_plus - self.target_minus) / self.weight_scale

    def programmed_weights(self) -> np.ndarray:
        return (self.g_plus - self.g_minus) / self.weight_scale


@frozen
class InputEncoding:
    scheme: str = "bit_serial_1x8"
    bits: int = 8

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise DomainError(f"unknown encoding {self.scheme}, expected one of {SCHEMES}")
        if self.bits != 8:
            raise DomainError(f"only 8 bit inputs are supported, got {self.bits}")

    @property
    def cycles(self) -> int:
        return 8 if self.scheme == "bit_serial_1x8" else 2

    @property
    def significance(self) -> np.ndarray:
        if self.scheme == "bit_serial_1x8":
            return 2.0 ** np.arange(8)
        return np.array([1.0, 16.0])

    def unit_voltage(self, v_fs: float) -> float:
        """Voltage of one level in a cycle."""
        return v_fs if self.scheme == "bit_serial_1x8" else v_fs / 15


@dataclass
class ArraySolution:
    column_currents: np.ndarray
    driver_currents: np.ndarray
    residual: float
    iterations: int


@dataclass
class MvmResult:
    # cycles x vectors x physical columns
    analog_outputs: np.ndarray
    # vectors x logical columns, weight * input units
    recombined: np.ndarray
    ideal: np.ndarray
    rms_error: float
    normalized_rms_error: float
    signal_range: float


def map_weights(
    w: np.ndarray,
    params: DeviceParams,
    model: ErrorModel | None,
    rng: np.random.Generator | None,
    w_max: float | None = None,
) -> MappedArray:
    """Map signed weights onto differential pairs, one side held at g_min.

    Programming errors are drawn once from ``model`` and frozen. ``w_max``
    fixes the full-scale weight so that partitions of one matrix share a scale.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    if w.size == 0:
        raise DomainError("weight matrix is empty")
    w_max = float(np.max(np.abs(w))) if w_max is None else float(w_max)
    if not w_max > 0:
        raise DomainError("weight matrix is all zero, the conductance scale is undefined")
    if np.max(np.abs(w)) > w_max:
        raise DomainError(f"weights exceed the full-scale value {w_max}")

    scale = (params.g_max - params.g_min) / w_max
    target_plus = params.g_min + np.where(w > 0, w, 0.0) * scale
    target_minus = params.g_min + np.where(w < 0, -w, 0.0) * scale

    if model is None:
        g_plus, g_minus = target_plus.copy(), target_minus.copy()
    else:
        if rng is None:
            raise DomainError("a random generator is required to sample programming errors")
        noise = rng.standard_normal((2, *w.shape))
        g_plus = np.maximum(target_plus + noise[0] * model.sigma_at(target_plus), G_FLOOR)
        g_minus = np.maximum(target_minus + noise[1] * model.sigma_at(target_minus), G_FLOOR)

    for arr in (g_plus, g_minus, target_plus, target_minus):
        arr.flags.writeable = False
    return MappedArray(g_plus, g_minus, target_plus, target_minus, scale, params, w)


def quantize_inputs(x: np.ndarray, bits: int = 8, x_max: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not x_max > 0:
        raise DomainError(f"x_max must be positive, got {x_max}")
    if np.any(x < 0):
        raise DomainError("inputs must be non-negative")
    levels = 2**bits - 1
    # round half away from zero
    return np.floor(np.clip(x, 0, x_max) / x_max * levels + 0.5).astype(np.int64)


def encode_inputs(q: np.ndarray, encoding: InputEncoding, v_fs: float) -> np.ndarray:
    """Per-cycle row voltages, shape (cycles, *q.shape)."""
    q = np.asarray(q)
    if np.any(q < 0) or np.any(q > 255) or not np.issubdtype(q.dtype, np.integer):
        raise DomainError("quantized inputs must be integers within [0, 255]")
    if encoding.scheme == "bit_serial_1x8":
        levels = np.stack([(q >> k) & 1 for k in range(8)])
    else:
        levels = np.stack([q & 0xF, q >> 4])
    return levels * encoding.unit_voltage(v_fs)


class CrossbarSolver:
    """Nodal solve of one physical array for many drive vectors.

    Unknowns are the deviations of the row and column node voltages from the
    parasitic-free state (row nodes at the driver voltage, column nodes at
    0 V). Row nodes come first in row-major order, then column nodes in
    column-major order, so every wire is a run of consecutive unknowns and
    the wire network alone is tridiagonal.
    """

    def __init__(self, conductance: np.ndarray, config: CrossbarConfig):
        self.conductance = np.asarray(conductance, dtype=float)
        self.rows, self.cols = self.conductance.shape
        self.config = config
        self.n_cells = self.rows * self.cols
        self.iterations = 0
        self.lu = None
        self.preconditioner = None
        if config.wire_resistance == 0:
            return

        self.g_wire = 1.0 / config.wire_resistance
        self.matrix, self.banded = self._assemble()
        if self.n_cells <= DIRECT_LIMIT:
            try:
                self.lu = splu(
                    self.matrix.tocsc(),
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except RuntimeError as e:
                raise SolverError(f"singular crossbar network: {e}") from e
        else:
            try:
                factor = cholesky_banded(self.banded, lower=False)
            except np.linalg.LinAlgError as e:
                raise SolverError(f"wire preconditioner is not positive definite: {e}") from e
            n = 2 * self.n_cells
            self.preconditioner = LinearOperator(
                (n, n), matvec=lambda r: cho_solve_banded((factor, False), r), dtype=float
            )

    def _assemble(self):
        R, C, N = self.rows, self.cols, self.n_cells
        g = self.conductance
        gw = self.g_wire
        jj = np.tile(np.arange(C), R)
        ii = np.repeat(np.arange(R), C)

        # row node: link to driver or left neighbour, plus right neighbour
        diag_row = gw * (1 + (jj < C - 1)) + g.ravel()
        # column node: link to ground or lower neighbour, plus upper neighbour
        diag_col = gw * (1 + (np.arange(R) > 0))[None, :] + g.T
        diag = np.concatenate([diag_row, diag_col.ravel()])

        upper = np.zeros(2 * N - 1)
        upper[:N - 1] = np.where((jj < C - 1)[:-1], -gw, 0.0)
        col_link = np.tile(np.arange(R) < R - 1, C)
        upper[N:] = np.where(col_link[:-1], -gw, 0.0)

        banded = np.zeros((2, 2 * N))
        banded[0, 1:] = upper
        banded[1] = diag

        row_idx = ii * C + jj
        col_idx = N + jj * R + ii
        cells = g.ravel()
        coupling = sp.coo_matrix(
            (np.concatenate([-cells, -cells]), (np.concatenate([row_idx, col_idx]), np.concatenate([col_idx, row_idx]))),
            shape=(2 * N, 2 * N),
        )
        wires = sp.diags([upper, diag, upper], [-1, 0, 1], shape=(2 * N, 2 * N))
        return (wires + coupling).tocsr(), banded

    def _rhs(self, v: np.ndarray) -> np.ndarray:
        # v: rows x k
        drive = self.conductance[:, :, None] * v[:, None, :]
        return np.concatenate(
            [-drive.reshape(self.n_cells, -1), drive.transpose(1, 0, 2).reshape(self.n_cells, -1)]
        )

    def _solve_block(self, b: np.ndarray) -> tuple[np.ndarray, float]:
        if self.lu is not None:
            x = self.lu.solve(b)
        else:
            x = np.empty_like(b)
            for kk in range(b.shape[1]):
                count = 0

                def step(_):
                    nonlocal count
                    count += 1

                x[:, kk], info = cg(
                    self.matrix,
                    b[:, kk],
                    rtol=self.config.solver_tolerance,
                    atol=0.0,
                    maxiter=self.config.max_iterations,
                    M=self.preconditioner,
                    callback=step,
                )
                self.iterations += count
                if info != 0:
                    res = _relative_residual(self.matrix, x[:, kk : kk + 1], b[:, kk : kk + 1])
                    raise SolverError(f"crossbar CG stopped after {count} iterations (info={info})", res)
        residual = _relative_residual(self.matrix, x, b)
        if residual > max(self.config.solver_tolerance, 1e-12) * 10:
            raise SolverError(f"crossbar solve residual {residual:.3g} above tolerance", residual)
        return x, residual

    def solve(self, v: np.ndarray) -> ArraySolution:
        """Column ground currents and driver currents for row voltages ``v``.

        ``v`` is a rows vector or a rows x k matrix of drive vectors.
        """
        v = np.asarray(v, dtype=float)
        single = v.ndim == 1
        if v.ndim not in (1, 2) or v.shape[0] != self.rows:
            raise DomainError(f"drive of shape {v.shape} does not match an array with {self.rows} rows")
        v = v.reshape(self.rows, -1)

        if self.config.wire_resistance == 0:
            out = self.conductance.T @ v
            drivers = self.conductance.sum(axis=1)[:, None] * v
            residual = 0.0
        else:
            R, C, N = self.rows, self.cols, self.n_cells
            chunk = max(1, RHS_BUDGET // (2 * N))
            out = np.empty((C, v.shape[1]))
            drivers = np.empty((R, v.shape[1]))
            residual = 0.0
            for start in range(0, v.shape[1], chunk):
                sl = slice(start, start + chunk)
                x, res = self._solve_block(self._rhs(v[:, sl]))
                residual = max(residual, res)
                out[:, sl] = self.g_wire * x[N:].reshape(C, R, -1)[:, R - 1, :]
                drivers[:, sl] = -self.g_wire * x[:N].reshape(R, C, -1)[:, 0, :]
            log.debug(f"solved {R}x{C} array for {v.shape[1]} drives, residual {residual:.3g}")

        if single:
            out, drivers = out[:, 0], drivers[:, 0]
        return ArraySolution(out, drivers, residual, self.iterations)


def _relative_residual(matrix, x: np.ndarray, b: np.ndarray) -> float:
    norms = np.linalg.norm(b, axis=0)
    res = np.linalg.norm(b - matrix @ x, axis=0)
    ok = norms > 0
    if not ok.any():
        return float(np.max(res)) if res.size else 0.0
    return float(np.max(res[ok] / norms[ok]))


def solve_array(mapped: MappedArray, v: np.ndarray, config: CrossbarConfig) -> np.ndarray:
    """Current into each physical column's virtual ground."""
    solver = CrossbarSolver(mapped.physical_conductance(config.interleave), config)
    return solver.solve(v).column_currents


def differential_currents(currents: np.ndarray, interleave: bool) -> np.ndarray:
    """I_plus - I_minus per logical column, along the last axis."""
    if interleave:
        return currents[..., 0::2] - currents[..., 1::2]
    half = currents.shape[-1] // 2
    return currents[..., :half] - currents[..., half:]


def ideal_mvm(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Exact product x @ w for one input vector or a stack of them."""
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DomainError(f"cannot multiply inputs of shape {x.shape} with a {w.shape} matrix")
    return x @ w


def run_mvm(
    mapped: MappedArray,
    q: np.ndarray,
    encoding: InputEncoding,
    config: CrossbarConfig,
    input_scale: float = 1.0,
    superpose: bool = False,
    solver: CrossbarSolver | None = None,
) -> MvmResult:
    """Multi-cycle analog MVM of quantized inputs ``q`` (one vector or vectors x rows).

    ``input_scale`` is the input value of one quantization level. With
    ``superpose`` the network is solved once for the recombined drive, which
    equals the sum of the per-cycle solves because the network is linear.
    """
    q = np.asarray(q)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    rows, cols = mapped.shape
    if q.shape[1] != rows:
        raise DomainError(f"inputs have {q.shape[1]} entries, array has {rows} rows")
    if encoding.scheme == "nibble_4x2" and not mapped.params.iv_linear:
        log.info(f"{mapped.params.label} is not I-V linear, multi-level inputs are an idealization")

    solver = solver or CrossbarSolver(mapped.physical_conductance(config.interleave), config)
    v_fs = config.full_scale_voltage
    n = q.shape[0]

    if superpose:
        if np.any(q < 0) or np.any(q > 255):
            raise DomainError("quantized inputs must be within [0, 255]")
        unit = v_fs / 255
        drive = q.T * unit
        analog = solver.solve(drive).column_currents.T[None]
        recombined = differential_currents(analog[0], config.interleave) / unit
    else:
        voltages = encode_inputs(q, encoding, v_fs)
        drive = voltages.transpose(2, 0, 1).reshape(rows, -1)
        analog = solver.solve(drive).column_currents.T.reshape(encoding.cycles, n, -1)
        diff = differential_currents(analog, config.interleave)
        unit = encoding.unit_voltage(v_fs)
        recombined = np.tensordot(encoding.significance, diff, axes=1) / unit

    recombined = recombined / mapped.weight_scale * input_scale
    ideal = ideal_mvm(mapped.weights, q * input_scale)
    rms, signal_range, normalized = normalized_rms(recombined, ideal)
    if single:
        analog, recombined, ideal = analog[:, 0], recombined[0], ideal[0]
    return MvmResult(analog, recombined, ideal, rms, normalized, signal_range)


def partition_matrix(w: np.ndarray, array_rows: int) -> list[np.ndarray]:
    """Contiguous row blocks of at most ``array_rows`` rows."""
    if array_rows < 1:
        raise DomainError(f"array_rows must be at least 1, got {array_rows}")
    w = np.asarray(w)
    return [w[start : start + array_rows] for start in range(0, w.shape[0], array_rows)]


def normalized_rms(
    simulated: np.ndarray, ideal: np.ndarray, inner_fraction: float = 0.999
) -> tuple[float, float, float]:
    """(rms, signal_range, rms / signal_range) over partial dot products.

    The signal range is the zero-symmetric interval holding the inner
    ``inner_fraction`` of the ideal values.
    """
    simulated = np.ravel(simulated)
    ideal = np.ravel(ideal)
    if ideal.size == 0:
        raise DomainError("no dot products to compare")
    if simulated.shape != ideal.shape:
        raise DomainError(f"{simulated.size} simulated values against {ideal.size} ideal values")
    rms = float(np.sqrt(np.mean((simulated - ideal) ** 2)))
    signal_range = 2 * float(np.quantile(np.abs(ideal), inner_fraction))
    if signal_range > 0:
        normalized = rms / signal_range
    else:
        normalized = 0.0 if rms == 0 else float("inf")
    return rms, signal_range, normalized


@dataclass
class SweepRow:
    device: str
    array_rows: int
    rw_ohms: float
    encoding: str
    normalized_rms: float
    rms: float
    signal_range: float
    seed: int

    def as_row(self) -> list:
        return [getattr(self, name) for name in SWEEP_COLUMNS]


def synthetic_workload(
    rows: int, cols: int, n_vectors: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian weights and ReLU-rectified Gaussian inputs."""
    w = rng.standard_normal((rows, cols))
    x = np.maximum(rng.standard_normal((n_vectors, rows)), 0.0)
    return w, x


def _partition_seed(seed: int, device_index: int, array_rows: int, partition: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, device_index, array_rows, partition]))


def mvm_error_sweep(
    devices: Sequence[DeviceParams],
    rows_list: Sequence[int],
    w: np.ndarray,
    inputs: np.ndarray,
    config: CrossbarConfig,
    seed: int,
    encoding: InputEncoding = InputEncoding(),
    x_max: float | None = None,
    workers: int = 1,
    superpose: bool = True,
) -> list[SweepRow]:
    """Normalized MVM error of every device at every array size.

    The matrix is partitioned into arrays of each size; every partition is
    mapped with its own generator derived from (seed, device, size, partition)
    so the result does not depend on ``workers``.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[1] != w.shape[0]:
        raise DomainError(f"inputs have {inputs.shape[1]} entries, matrix has {w.shape[0]} rows")
    x_max = float(np.max(inputs)) if x_max is None else x_max
    if not x_max > 0:
        raise DomainError("inputs are all zero, the quantization range is undefined")
    q = quantize_inputs(inputs, encoding.bits, x_max)
    input_scale = x_max / (2**encoding.bits - 1)
    w_max = float(np.max(np.abs(w)))

    def task(dev_rows):
        dev_index, array_rows = dev_rows
        params = devices[dev_index]
        sim, ideal = [], []
        start = 0
        for p, block in enumerate(partition_matrix(w, array_rows)):
            rng = _partition_seed(seed, dev_index, array_rows, p)
            mapped = map_weights(block, params, params.error_model, rng, w_max=w_max)
            result = run_mvm(
                mapped,
                q[:, start : start + block.shape[0]],
                encoding,
                config,
                input_scale=input_scale,
                superpose=superpose,
            )
            sim.append(result.recombined)
            ideal.append(result.ideal)
            start += block.shape[0]
        rms, signal_range, normalized = normalized_rms(np.concatenate(sim), np.concatenate(ideal))
        log.info(f"{params.label} {array_rows} rows, {config.wire_resistance} ohm: normalized rms {normalized:.4%}")
        return SweepRow(
            params.label, array_rows, config.wire_resistance, encoding.scheme, normalized, rms, signal_range, seed
        )

    jobs = [(d, r) for d in range(len(devices)) for r in rows_list]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(task, jobs))
    return [task(job) for job in jobs]


def write_sweep(fpath: Path | str, rows: Sequence[SweepRow]):
    datafiles.write_table(fpath, SWEEP_COLUMNS, (r.as_row() for r in rows))
