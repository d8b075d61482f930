"""Reading and writing observation matrices, priors, configs and results.

Two matrix formats are supported behind one interface:

* CSV: ``M`` rows, ``2L`` columns ``re_0, im_0, re_1, im_1, ...``; lines
  starting with ``#`` are comments.
* Binary ``MVLS`` version 1: little-endian header ``<4sHII`` (magic,
  version, M, L) followed by ``2*M*L`` float64 values, real and imaginary
  parts interleaved, row-major.

Usage
-----
    from bench.dataio import codec_for_path

    codec = codec_for_path(path)
    Y = codec.read(path)
    codec.write(path, Y)

See ``FORMATS.md`` for the full schemas.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import struct
from pathlib import Path

import numpy as np

from estimation.circular import VonMises

logger = logging.getLogger(__name__)

BINARY_MAGIC = b"MVLS"
BINARY_VERSION = 1
BINARY_HEADER = struct.Struct("<4sHII")
# Shape declared in a CSV comment, e.g. "# M=20 L=4".
CSV_SHAPE = re.compile(r"\b([ML])=(\d+)")


class DataFormatError(ValueError):
    """Malformed data file; ``line`` (CSV) or ``offset`` (binary) locates it."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        super().__init__(message)
        self.line = line
        self.offset = offset

    def __str__(self):
        message = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {message}"
        if self.offset is not None:
            return f"byte offset {self.offset}: {message}"
        return message


class ConfigError(ValueError):
    """Invalid configuration entry; ``key`` names the offending key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


# ---------------------------------------------------------------------------
# Base class
# ---------------------------------------------------------------------------

class MatrixCodec:
    """Common interface of the matrix file formats."""

    name = ""
    suffixes: tuple[str, ...] = ()

    def read(self, path) -> np.ndarray:
        raise NotImplementedError

    def write(self, path, Y: np.ndarray) -> None:
        raise NotImplementedError


def _as_matrix(Y) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.complex128)
    if Y.ndim == 1:
        Y = Y[:, np.newaxis]
    if Y.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {Y.shape}")
    return Y


# ---------------------------------------------------------------------------
# CSV backend
# ---------------------------------------------------------------------------

class CsvMatrixCodec(MatrixCodec):
    name = "csv"
    suffixes = (".csv", ".txt")

    def read(self, path) -> np.ndarray:
        rows = []
        width = None
        declared: dict[str, int] = {}
        header_line = 0
        with open(path, newline="") as f:
            for lineno, line in enumerate(f, start=1):
                stripped = line.strip()
                if stripped.startswith("#"):
                    if not declared:
                        declared = {key: int(value) for key, value in CSV_SHAPE.findall(stripped)}
                        header_line = lineno if declared else 0
                    continue
                if not stripped:
                    continue
                cells = [cell.strip() for cell in stripped.split(",")]
                if len(cells) % 2:
                    raise DataFormatError(f"odd number of columns ({len(cells)})", line=lineno)
                if width is None:
                    width = len(cells)
                elif len(cells) != width:
                    raise DataFormatError(f"expected {width} columns, got {len(cells)}", line=lineno)
                try:
                    values = [float(cell) for cell in cells]
                except ValueError as exc:
                    raise DataFormatError(f"not a number: {exc}", line=lineno) from None
                if not all(math.isfinite(v) for v in values):
                    raise DataFormatError("non-finite value", line=lineno)
                rows.append(values)
        if not rows:
            raise DataFormatError("no data rows", line=0)
        if "M" in declared and declared["M"] != len(rows):
            raise DataFormatError(f"header declares M={declared['M']} but the file has {len(rows)} rows",
                                  line=header_line)
        if "L" in declared and 2 * declared["L"] != width:
            raise DataFormatError(f"header declares L={declared['L']} but rows have {width} columns",
                                  line=header_line)
        flat = np.array(rows, dtype=float)
        return flat[:, 0::2] + 1j * flat[:, 1::2]

    def write(self, path, Y) -> None:
        Y = _as_matrix(Y)
        M, L = Y.shape
        with open(path, "w", newline="") as f:
            f.write(f"# M={M} L={L} columns: re_0,im_0,...,re_{L - 1},im_{L - 1}\n")
            writer = csv.writer(f, lineterminator="\n")
            for row in Y:
                cells = []
                for value in row:
                    cells.extend((repr(float(value.real)), repr(float(value.imag))))
                writer.writerow(cells)


# ---------------------------------------------------------------------------
# Binary backend
# ---------------------------------------------------------------------------

class BinaryMatrixCodec(MatrixCodec):
    name = "binary"
    suffixes = (".mvls", ".bin")

    def read(self, path) -> np.ndarray:
        data = Path(path).read_bytes()
        if len(data) < BINARY_HEADER.size:
            raise DataFormatError("truncated header", offset=len(data))
        magic, version, M, L = BINARY_HEADER.unpack_from(data, 0)
        if magic != BINARY_MAGIC:
            raise DataFormatError(f"bad magic {magic!r}", offset=0)
        if version != BINARY_VERSION:
            raise DataFormatError(f"unsupported version {version}", offset=4)
        expected = BINARY_HEADER.size + 16 * M * L
        if len(data) != expected:
            raise DataFormatError(f"expected {expected} bytes, got {len(data)}", offset=min(len(data), expected))
        values = np.frombuffer(data, dtype="<f8", offset=BINARY_HEADER.size)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise DataFormatError("non-finite value", offset=BINARY_HEADER.size + 8 * int(bad[0]))
        pairs = values.reshape(M, L, 2)
        return pairs[..., 0] + 1j * pairs[..., 1]

    def write(self, path, Y) -> None:
        Y = _as_matrix(Y)
        M, L = Y.shape
        pairs = np.empty((M, L, 2), dtype="<f8")
        pairs[..., 0] = Y.real
        pairs[..., 1] = Y.imag
        with open(path, "wb") as f:
            f.write(BINARY_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, M, L))
            f.write(pairs.tobytes())


CODECS = {codec.name: codec for codec in (CsvMatrixCodec(), BinaryMatrixCodec())}


def codec_for_path(path, fmt: str | None = None, sniff: bool = True) -> MatrixCodec:
    """Codec named by ``fmt``, else sniffed from the magic bytes (when ``sniff``) or the suffix."""
    if fmt:
        try:
            return CODECS[fmt]
        except KeyError:
            raise ValueError(f"unknown format {fmt!r}; choose from {sorted(CODECS)}") from None
    path = Path(path)
    if sniff and path.exists():
        with open(path, "rb") as f:
            if f.read(len(BINARY_MAGIC)) == BINARY_MAGIC:
                return CODECS["binary"]
        return CODECS["csv"]
    for codec in CODECS.values():
        if path.suffix.lower() in codec.suffixes:
            return codec
    return CODECS["csv"]


# ---------------------------------------------------------------------------
# Config and prior files
# ---------------------------------------------------------------------------

def parse_key_value(lines) -> dict[str, str]:
    """Flat ``key = value`` entries; ``#`` comments and quotes are stripped."""
    entries = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        entries[key] = value.strip().strip('"').strip("'")
    return entries


def read_key_value_config(path) -> dict[str, str]:
    with open(path) as f:
        return parse_key_value(f)


def read_priors(path) -> list[VonMises]:
    """Priors from a JSON list of ``{"mean_direction": .., "concentration": ..}``."""
    try:
        with open(path) as f:
            entries = json.load(f)
    except json.JSONDecodeError as exc:
        raise DataFormatError(exc.msg, line=exc.lineno) from None
    if not isinstance(entries, list) or not entries:
        raise DataFormatError("prior file must hold a non-empty JSON list")
    priors = []
    for index, entry in enumerate(entries):
        try:
            priors.append(VonMises(float(entry["mean_direction"]), float(entry["concentration"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"prior {index}: {exc}") from None
    return priors


# ---------------------------------------------------------------------------
# Result files
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows_csv(path, columns, rows) -> None:
    """CSV with a header line; floats written with ``repr``."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[column]) for column in columns])


def read_rows_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def to_jsonable(value):
    """Plain JSON types; complex as ``{"re", "im"}``, non-finite floats as strings."""
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, complex):
        return {"re": value.real, "im": value.imag}
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else repr(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.complexfloating):
        return {"re": float(value.real), "im": float(value.imag)}
    return value


def write_json(path, payload) -> None:
    """Write ``payload`` through :func:`to_jsonable`."""
    with open(path, "w") as f:
        json.dump(to_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")
