"""Reading and writing the CSV, JSON and binary files the simulator exchanges."""

from __future__ import annotations

import csv
import json
import logging
from importlib.resources import files
from io import TextIOBase
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import DataFileError


log = logging.getLogger(__name__)

csv_fileext = ["csv", "txt"]
bin_fileext = ["bin", "etcmat", "f64"]
json_fileext = ["json"]

MATRIX_MAGIC = b"ETCMAT01"
MATRIX_HEADER = np.dtype([("magic", "S8"), ("rows", "<u4"), ("cols", "<u4")])


def filetype(fpath: Path):
    fileext = fpath.suffix[1:].lower()
    if fileext in csv_fileext:
        return "CSV"
    elif fileext in bin_fileext:
        return "BIN"
    elif fileext in json_fileext:
        return "JSON"
    else:
        return fileext.upper()


def data_path(name: str) -> Path:
    """Path of a calibration file shipped with the package."""
    return Path(str(files("etcram") / "data" / name))


def resolve_path(fpath: Path | str, shipped: bool = False) -> Path:
    """Return ``fpath`` if it exists.

    With ``shipped`` a missing file falls back to the packaged data file of
    the same name; any other missing file is an error.
    """
    fpath = Path(fpath)
    if fpath.exists():
        return fpath
    if shipped:
        packaged = data_path(fpath.name)
        if packaged.exists():
            log.info(f"using shipped calibration {packaged}")
            return packaged
    raise DataFileError(f"no such file: {fpath}")


def read_table(fpath: TextIOBase | Path | str, columns: Sequence[str]) -> dict[str, np.ndarray]:
    """Read a headed numeric CSV, checking that the header names ``columns`` in order."""
    if isinstance(fpath, str):
        fpath = Path(fpath)

    try:
        if isinstance(fpath, Path):
            with open(fpath, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
        else:
            rows = list(csv.reader(fpath))
    except OSError as e:
        raise DataFileError(f"cannot read {fpath}: {e}") from e

    rows = [r for r in rows if r and not r[0].lstrip().startswith("#")]
    if not rows:
        raise DataFileError(f"{fpath}: empty file")
    header = [h.strip() for h in rows[0]]
    if header != list(columns):
        raise DataFileError(f"{fpath}: expected header {','.join(columns)}, got {','.join(header)}")

    try:
        values = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as e:
        raise DataFileError(f"{fpath}: non-numeric value ({e})") from e
    values = values.reshape(-1, len(columns))
    if not np.all(np.isfinite(values)):
        raise DataFileError(f"{fpath}: non-finite value")
    return {name: values[:, ii] for ii, name in enumerate(columns)}


def format_value(val: Any) -> str:
    # repr of a python float round-trips exactly, so re-runs are byte identical
    if isinstance(val, (bool, np.bool_)):
        return str(bool(val)).lower()
    if isinstance(val, (int, np.integer)):
        return str(int(val))
    if isinstance(val, (float, np.floating)):
        return repr(float(val))
    return str(val)


def write_table(fpath: Path | str, columns: Sequence[str], rows: Iterable[Sequence[Any]]):
    fpath = Path(fpath)
    try:
        with open(fpath, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([format_value(v) for v in row])
    except OSError as e:
        raise DataFileError(f"cannot write {fpath}: {e}") from e
    log.info(f"wrote {fpath}")


def read_json(fpath: Path | str) -> Any:
    fpath = Path(fpath)
    try:
        return json.loads(fpath.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataFileError(f"cannot read {fpath}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataFileError(f"{fpath}: invalid JSON ({e})") from e


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(fpath: Path | str, obj: Any):
    fpath = Path(fpath)
    try:
        fpath.write_text(dumps(obj), encoding="utf-8")
    except OSError as e:
        raise DataFileError(f"cannot write {fpath}: {e}") from e
    log.info(f"wrote {fpath}")


def read_matrix(fpath: Path | str, ftype: str = "") -> np.ndarray:
    """Dense matrix from a header-less CSV or the binary container.

    The binary container is a 16 byte little-endian header (8 byte magic
    ``ETCMAT01``, uint32 rows, uint32 cols) followed by rows*cols float64
    values in row-major order.
    """
    fpath = Path(fpath)
    ftype = ftype.upper() or filetype(fpath)
    if ftype == "CSV":
        try:
            m = np.loadtxt(fpath, delimiter=",", ndmin=2, dtype=float)
        except OSError as e:
            raise DataFileError(f"cannot read {fpath}: {e}") from e
        except ValueError as e:
            raise DataFileError(f"{fpath}: malformed matrix ({e})") from e
    elif ftype == "BIN":
        try:
            raw = fpath.read_bytes()
        except OSError as e:
            raise DataFileError(f"cannot read {fpath}: {e}") from e
        if len(raw) < MATRIX_HEADER.itemsize:
            raise DataFileError(f"{fpath}: truncated header")
        header = np.frombuffer(raw, dtype=MATRIX_HEADER, count=1)[0]
        if header["magic"] != MATRIX_MAGIC:
            raise DataFileError(f"{fpath}: bad magic {header['magic']!r}")
        rows, cols = int(header["rows"]), int(header["cols"])
        body = raw[MATRIX_HEADER.itemsize :]
        if len(body) != rows * cols * 8:
            raise DataFileError(f"{fpath}: expected {rows}x{cols} values, got {len(body) // 8}")
        m = np.frombuffer(body, dtype="<f8").reshape(rows, cols).copy()
    else:
        raise DataFileError(f"unknown matrix file type {ftype}")

    if m.size == 0 or not np.all(np.isfinite(m)):
        raise DataFileError(f"{fpath}: empty or non-finite matrix")
    return m


def write_matrix(fpath: Path | str, m: np.ndarray, ftype: str = ""):
    fpath = Path(fpath)
    m = np.atleast_2d(np.asarray(m, dtype=float))
    ftype = ftype.upper() or filetype(fpath)
    try:
        if ftype == "CSV":
            with open(fpath, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerows([[format_value(v) for v in row] for row in m])
        elif ftype == "BIN":
            header = np.array([(MATRIX_MAGIC, m.shape[0], m.shape[1])], dtype=MATRIX_HEADER)
            fpath.write_bytes(header.tobytes() + m.astype("<f8").tobytes(order="C"))
        else:
            raise DataFileError(f"unknown matrix file type {ftype}")
    except OSError as e:
        raise DataFileError(f"cannot write {fpath}: {e}") from e
