"""Matrix files, atomic writes and run manifests.

Binary layout (all little-endian)::

    b"CLP1" | rows: uint64 | cols: uint64 | rows*cols float64, row-major
"""
from __future__ import annotations

import hashlib
import os
import struct
import sys
import tempfile
from pathlib import Path

import numpy as np

__all__ = [
    "MAGIC",
    "MatrixFileError",
    "atomic_write_bytes",
    "atomic_write_text",
    "read_matrix",
    "write_matrix",
    "write_csv_matrix",
    "sha256_file",
    "write_manifest",
]

MAGIC = b"CLP1"
_HEADER = struct.Struct("<4sQQ")


class MatrixFileError(ValueError):
    pass


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


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _check_finite(m, source):
    bad = np.argwhere(~np.isfinite(m))
    if bad.size:
        r, c = bad[0]
        raise MatrixFileError(f"{source}: non-finite value at row {r}, col {c}")


def _format_float(x: float) -> str:
    return repr(float(x))


def write_csv_matrix(path, m) -> None:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    lines = [",".join(_format_float(x) for x in row) for row in m]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_matrix(path, m) -> None:
    """Write a 2-D float64 matrix; ``.csv`` paths get headerless CSV."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise MatrixFileError(f"expected a 2-D matrix, got shape {m.shape}")
    _check_finite(m, str(path))
    if str(path).lower().endswith(".csv"):
        write_csv_matrix(path, m)
        return
    payload = np.ascontiguousarray(m, dtype="<f8").tobytes()
    atomic_write_bytes(path, _HEADER.pack(MAGIC, m.shape[0], m.shape[1]) + payload)


def _read_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise MatrixFileError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise MatrixFileError(f"{path}: empty CSV")
    if len({len(r) for r in rows}) != 1:
        raise MatrixFileError(f"{path}: ragged CSV rows")
    return np.array(rows, dtype=np.float64)


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        m = _read_csv(path)
    else:
        data = path.read_bytes()
        if len(data) < _HEADER.size:
            raise MatrixFileError(
                f"{path}: truncated header, expected {_HEADER.size} bytes, got {len(data)}")
        magic, rows, cols = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise MatrixFileError(f"{path}: bad magic {magic!r}")
        expected = _HEADER.size + 8 * rows * cols
        if len(data) != expected:
            raise MatrixFileError(
                f"{path}: expected {expected} bytes, got {len(data)}")
        m = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols)
        m = m.astype(np.float64)
    _check_finite(m, str(path))
    return m


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, command: str, inputs=(), config_text: str = "", seed=None,
                   extra: dict | None = None) -> Path:
    """Plain-text manifest: command, input digests, config hash, seed, versions.

    Only file names (not directories) are recorded so that identical runs in
    different locations produce identical manifests.
    """
    from . import __version__

    lines = [f"command = {command}"]
    for p in inputs:
        lines.append(f"input = {Path(p).name} sha256:{sha256_file(p)}")
    lines.append("config_sha256 = " + hashlib.sha256(config_text.encode()).hexdigest())
    if seed is not None:
        lines.append(f"seed = {seed}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    lines.append(f"clipica_version = {__version__}")
    lines.append(f"numpy_version = {np.__version__}")
    lines.append(f"python_version = {sys.version_info.major}.{sys.version_info.minor}")
    path = Path(out_dir) / "manifest.txt"
    atomic_write_text(path, "\n".join(lines) + "\n")
    return path
