"""Matrix file format and small serialization helpers.

Two on-disk encodings are accepted for every matrix:

* CSV, rows = volumes, optional single header line.
* Binary: a 24-byte little-endian header ``b"SCRB", u32 T, u32 V, u32 0,
  f64 tr_seconds`` followed by T*V float64 values in row-major order.

Readers detect the binary form by its magic bytes.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .data import ScanMatrix, ValidationError

MAGIC = b"SCRB"
_HEADER = struct.Struct("<4sIII d")
HEADER_SIZE = _HEADER.size  # 24


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def encode_binary(values: np.ndarray, tr_seconds: float = 1.0) -> bytes:
    values = np.atleast_2d(np.asarray(values, dtype="<f8"))
    T, V = values.shape
    return _HEADER.pack(MAGIC, T, V, 0, float(tr_seconds)) + values.tobytes(order="C")


def decode_binary(data: bytes) -> tuple[np.ndarray, float]:
    if len(data) < HEADER_SIZE or data[:4] != MAGIC:
        raise ValidationError("not a SCRB binary matrix")
    magic, T, V, _, tr = _HEADER.unpack_from(data)
    payload = data[HEADER_SIZE:]
    if len(payload) != 8 * T * V:
        raise ValidationError(
            f"SCRB payload holds {len(payload)} bytes, expected {8 * T * V}"
        )
    values = np.frombuffer(payload, dtype="<f8").reshape(T, V).astype(float)
    return values, tr


def encode_csv(values: np.ndarray, header: list[str] | None = None) -> str:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header is not None:
        writer.writerow(header)
    for row in values:
        writer.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def decode_csv(text: str) -> np.ndarray:
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValidationError("empty CSV matrix")
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]
    try:
        values = np.array([[float(c) for c in r] for r in rows], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"non-numeric CSV entry: {exc}") from None
    if values.ndim != 2:
        raise ValidationError("ragged CSV matrix")
    return values


def read_matrix(path, tr_seconds: float | None = None) -> tuple[np.ndarray, float | None]:
    """Read a matrix file in either encoding; returns (values, tr or None)."""
    data = Path(path).read_bytes()
    if data[:4] == MAGIC:
        values, tr = decode_binary(data)
        return values, tr if tr_seconds is None else tr_seconds
    return decode_csv(data.decode("utf-8")), tr_seconds


def write_matrix(path, values, tr_seconds: float = 1.0, fmt: str | None = None) -> None:
    """Write ``values``; format chosen from ``fmt`` or the file suffix (.csv vs binary)."""
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "bin")
    if fmt == "csv":
        atomic_write_text(path, encode_csv(values))
    else:
        atomic_write_bytes(path, encode_binary(values, tr_seconds))


def read_scan(path, tr_seconds: float | None = None, **labels) -> ScanMatrix:
    values, tr = read_matrix(path, tr_seconds)
    return ScanMatrix(values, tr if tr is not None else 1.0, **labels)


def write_flags_csv(path, flags) -> None:
    flags = np.asarray(flags, dtype=bool)
    atomic_write_text(path, "".join(f"{int(f)}\n" for f in flags))


def read_flags_csv(path) -> np.ndarray:
    values = decode_csv(Path(path).read_text(encoding="utf-8"))
    return values[:, 0].astype(bool)
