"""Versioned binary envelopes, CSV helpers and the error taxonomy.

Envelope layout::

    magic     4 bytes (b"TDCK" checkpoints, b"TDDS" datasets)
    version   uint32 little-endian
    hlen      uint32 little-endian
    header    hlen bytes of UTF-8 JSON (sorted keys); includes "arrays":
              a list of [name, shape] in declaration order
    payload   every array as little-endian float64, in header order
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"TDCK"
DATASET_MAGIC = b"TDDS"


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""


class DataError(RuntimeError):
    """Unreadable or incompatible dataset / checkpoint file."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def write_envelope(path, magic: bytes, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["arrays"] = [[name, list(np.shape(arr))] for name, arr in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_envelope(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != magic:
        raise DataError(f"{path}: bad magic, expected {magic!r}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except ValueError as exc:
        raise DataError(f"{path}: corrupt header") from exc
    offset = 12 + hlen
    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(raw):
            raise DataError(f"{path}: truncated payload at array {name!r}")
        arrays[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty CSV")
    return rows[0], rows[1:]


def write_loss_trace(path, trace) -> None:
    write_csv(path, ["epoch", "loss"], ((i, float(v)) for i, v in enumerate(trace)))
