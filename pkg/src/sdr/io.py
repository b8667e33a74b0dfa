"""File formats: checkpoints, datasets (csv / raw binary) and atomic writes.

Checkpoint layout (all integers little-endian)::

    b"SDR1" | u32 version | u64 meta_len | meta (UTF-8 ``key=value`` lines)
    | u64 n_tensors | per tensor: u32 name_len, name, u64 rows, u64 cols,
      rows*cols float64 | u64 FNV-1a checksum of every preceding byte
"""
from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import fnv1a64

MAGIC = b"SDR1"
VERSION = 1


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class ParseError(ValueError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.lineno = lineno


def atomic_write(path, data: bytes) -> None:
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


@dataclass
class Checkpoint:
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<I", VERSION)
        meta = "".join(f"{k}={v}\n" for k, v in self.meta.items()).encode("utf-8")
        out += struct.pack("<Q", len(meta)) + meta
        out += struct.pack("<Q", len(self.tensors))
        for name, arr in self.tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            if arr.ndim == 1:
                arr = arr[None, :]
            if arr.ndim != 2:
                raise FormatError(f"{name}: only 1-D/2-D tensors are storable")
            raw = name.encode("utf-8")
            out += struct.pack("<I", len(raw)) + raw
            out += struct.pack("<QQ", *arr.shape)
            out += np.ascontiguousarray(arr).tobytes()
        out += struct.pack("<Q", fnv1a64(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 28 or data[:4] != MAGIC:
            raise FormatError("not an SDR1 checkpoint")
        (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
        if fnv1a64(data[:-8]) != stored:
            raise ChecksumError("checkpoint checksum mismatch; refusing to load")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 8
        (meta_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        meta = {}
        for line in data[pos:pos + meta_len].decode("utf-8").splitlines():
            key, _, value = line.partition("=")
            meta[key] = value
        pos += meta_len
        (count,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            rows, cols = struct.unpack_from("<QQ", data, pos)
            pos += 16
            nbytes = rows * cols * 8
            arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos)
            tensors[name] = arr.astype(np.float64).reshape(rows, cols)
            pos += nbytes
        if pos != len(data) - 8:
            raise FormatError("trailing bytes in checkpoint")
        return cls(meta, tensors)

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return len(self.samples)

    @property
    def dim(self):
        return self.samples.shape[1]

    def take(self, idx) -> "Dataset":
        return Dataset(self.samples[idx], None if self.labels is None else self.labels[idx])


def write_csv(path, data: Dataset) -> None:
    d = data.dim
    header = [f"x{j}" for j in range(d)] + (["label"] if data.labels is not None else [])
    lines = [",".join(header)]
    for i, row in enumerate(data.samples):
        fields = [format(float(v), ".17g") for v in row]
        if data.labels is not None:
            fields.append(str(int(data.labels[i])))
        lines.append(",".join(fields))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_csv(path) -> Dataset:
    """Header row, then one sample per line; a final ``label`` column is optional."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        has_label = bool(header) and header[-1].strip().lower() == "label"
        width = len(header)
        rows, labels = [], []
        for lineno, fields in enumerate(reader, 2):
            if not fields:
                continue
            if len(fields) != width:
                raise ParseError(path, lineno, f"expected {width} fields, got {len(fields)}")
            raw = fields[:-1] if has_label else fields
            try:
                values = [float(v) for v in raw]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in values):
                raise ParseError(path, lineno, "non-finite value")
            rows.append(values)
            if has_label:
                try:
                    labels.append(int(fields[-1]))
                except ValueError:
                    raise ParseError(path, lineno, f"bad label {fields[-1]!r}") from None
    d = width - 1 if has_label else width
    samples = np.asarray(rows, dtype=np.float64).reshape(len(rows), d)
    return Dataset(samples, np.asarray(labels, dtype=np.int64) if has_label else None)


def write_raw(path, data: Dataset) -> None:
    n, d = data.samples.shape
    payload = struct.pack("<QQ", n, d) + np.ascontiguousarray(data.samples, dtype="<f8").tobytes()
    atomic_write(path, payload)


def read_raw(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise ParseError(path, 1, "missing (n, d) header")
    n, d = struct.unpack_from("<QQ", data, 0)
    if len(data) != 16 + 8 * n * d:
        raise ParseError(path, 1, f"payload size does not match n={n}, d={d}")
    samples = np.frombuffer(data, dtype="<f8", offset=16).astype(np.float64).reshape(n, d)
    bad = np.flatnonzero(~np.isfinite(samples).all(axis=1))
    if bad.size:
        raise ParseError(path, int(bad[0]) + 1, "non-finite value")
    return Dataset(samples)


def ingest(path, fmt: str | None = None) -> Dataset:
    if fmt is None:
        fmt = "csv" if str(path).endswith(".csv") else "raw-binary"
    if fmt == "csv":
        return read_csv(path)
    if fmt in ("raw", "raw-binary", "bin"):
        return read_raw(path)
    raise ValueError(f"unknown format {fmt!r}")
