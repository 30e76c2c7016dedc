"""File formats: atomic CSV/JSON emission and the FSNP snapshot container.

FSNP layout (all integers little-endian)::

    magic    4 bytes  b"FSNP"
    version  u32
    param_len u64
    probe_n  u64
    probe_k  u64
    records  repeated until EOF:
        step   i64
        epoch  i64
        params     param_len float64 (little-endian)
        probe      probe_n * probe_k float64, row-major
"""

from __future__ import annotations

import csv
import io as _io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import FuncspaceError, ShapeError

FSNP_MAGIC = b"FSNP"
FSNP_VERSION = 1
_HEADER = struct.Struct("<4sIQQQ")
_RECORD_HEAD = struct.Struct("<qq")


class FormatError(FuncspaceError, ValueError):
    """A binary file does not follow its declared layout."""


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    """Shortest round-tripping text for a number (repr of float64)."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return "" if x is None else str(x)


def write_csv(path, header, rows) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    atomic_write_bytes(path, buf.getvalue().encode())


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode())


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_matrix_csv(path, labels, values) -> None:
    """Square labelled matrix: first column is the row label."""
    labels = [_label(l) for l in labels]
    write_csv(path, ["label", *labels], ([lab, *row] for lab, row in zip(labels, np.asarray(values))))


def _label(l):
    return ":".join(str(x) for x in l) if isinstance(l, (tuple, list)) else str(l)


# FSNP --------------------------------------------------------------------------------


def encode_fsnp(records, param_len: int, probe_shape) -> bytes:
    """Serialize ``(step, epoch, params, probe_outputs)`` tuples."""
    n, k = probe_shape
    parts = [_HEADER.pack(FSNP_MAGIC, FSNP_VERSION, param_len, n, k)]
    for step, epoch, params, probe in records:
        params = np.asarray(params, dtype="<f8")
        probe = np.asarray(probe, dtype="<f8")
        if params.shape != (param_len,) or probe.shape != (n, k):
            raise ShapeError(
                f"record shapes {params.shape}/{probe.shape} do not match header {param_len}/{(n, k)}"
            )
        parts.append(_RECORD_HEAD.pack(int(step), int(epoch)))
        parts.append(params.tobytes())
        parts.append(np.ascontiguousarray(probe).tobytes())
    return b"".join(parts)


def decode_fsnp(data: bytes):
    """Inverse of :func:`encode_fsnp`; returns ``(header dict, records)``."""
    if len(data) < _HEADER.size:
        raise FormatError("truncated FSNP header")
    magic, version, param_len, n, k = _HEADER.unpack_from(data, 0)
    if magic != FSNP_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FSNP_MAGIC!r}")
    if version != FSNP_VERSION:
        raise FormatError(f"unsupported FSNP version {version}")
    rec_size = _RECORD_HEAD.size + 8 * (param_len + n * k)
    body = len(data) - _HEADER.size
    if rec_size == 0 or body % rec_size:
        raise FormatError(f"payload of {body} bytes is not a whole number of {rec_size}-byte records")
    records = []
    off = _HEADER.size
    for _ in range(body // rec_size):
        step, epoch = _RECORD_HEAD.unpack_from(data, off)
        off += _RECORD_HEAD.size
        params = np.frombuffer(data, dtype="<f8", count=param_len, offset=off).astype(np.float64)
        off += 8 * param_len
        probe = np.frombuffer(data, dtype="<f8", count=n * k, offset=off).astype(np.float64).reshape(n, k)
        off += 8 * n * k
        records.append((step, epoch, params, probe))
    header = {"version": version, "param_len": param_len, "probe_n": n, "probe_k": k}
    return header, records


def save_fsnp(path, records, param_len, probe_shape) -> None:
    atomic_write_bytes(path, encode_fsnp(records, param_len, probe_shape))


def load_fsnp(path):
    return decode_fsnp(Path(path).read_bytes())
