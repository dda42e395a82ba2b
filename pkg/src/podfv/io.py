"""On-disk artifact formats.

Snapshot files (``podfv-snap v1``)::

    podfv-snap v1\\n
    <field kind> <N_h> <N_s>\\n
    <metadata as one JSON line>\\n
    N_h * N_s little-endian float64, column-major (one snapshot per column)
    N_s little-endian float64 snapshot times

Archives (``podfv-basis v1``, ``podfv-rom v1``) share one container::

    <magic>\\n
    <header as one JSON line: arrays (name, shape), metadata, content hash>\\n
    each array as little-endian float64 in column-major order, header order

The content hash is a 64-bit BLAKE2b digest of the array bytes and the
metadata, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

__all__ = [
    "ArtifactError",
    "content_hash",
    "read_archive",
    "read_snapshots",
    "write_archive",
    "write_snapshots",
]

SNAP_MAGIC = "podfv-snap v1"


class ArtifactError(ValueError):
    """Malformed or mismatched artifact file."""


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_to_builtin)


def _to_builtin(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def content_hash(arrays: dict, meta: dict | None = None) -> str:
    h = hashlib.blake2b(digest_size=8)
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(np.asfortranarray(a).tobytes(order="F"))
    if meta:
        h.update(_json(meta).encode())
    return h.hexdigest()


def write_snapshots(path, kind: str, matrix, times, meta=None) -> None:
    matrix = np.asarray(matrix, dtype="<f8")
    times = np.asarray(times, dtype="<f8")
    if matrix.ndim != 2 or matrix.shape[1] != len(times):
        raise ArtifactError("snapshot matrix must be (N_h, N_s) with one time per column")
    with open(path, "wb") as fh:
        fh.write(f"{SNAP_MAGIC}\n{kind} {matrix.shape[0]} {matrix.shape[1]}\n".encode())
        fh.write((_json(meta or {}) + "\n").encode())
        fh.write(matrix.tobytes(order="F"))
        fh.write(times.tobytes())


def read_snapshots(path):
    """Return ``(kind, matrix, times, meta)``."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode(errors="replace").strip()
        if magic != SNAP_MAGIC:
            raise ArtifactError(f"{path}: not a {SNAP_MAGIC} file")
        try:
            kind, nh, ns = fh.readline().decode().split()
            meta = json.loads(fh.readline().decode())
            nh, ns = int(nh), int(ns)
        except ValueError as exc:  # includes decode and JSON errors
            raise ArtifactError(f"{path}: malformed header ({exc})") from exc
        payload = fh.read()
    if len(payload) % 8:
        raise ArtifactError(f"{path}: payload is not a whole number of float64 values")
    data = np.frombuffer(payload, dtype="<f8")
    if data.size != nh * ns + ns:
        raise ArtifactError(f"{path}: expected {nh * ns + ns} values, found {data.size}")
    matrix = data[: nh * ns].reshape((nh, ns), order="F").astype(float)
    return kind, matrix, data[nh * ns :].astype(float), meta


def write_archive(path, magic: str, arrays: dict, meta: dict) -> str:
    """Write arrays plus metadata; returns the content hash."""
    names = list(arrays)
    blobs = [np.asarray(arrays[n], dtype="<f8") for n in names]
    digest = content_hash(dict(zip(names, blobs)), meta)
    header = {
        "arrays": [{"name": n, "shape": list(b.shape)} for n, b in zip(names, blobs)],
        "meta": meta,
        "hash": digest,
    }
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n".encode())
        fh.write((_json(header) + "\n").encode())
        for b in blobs:
            fh.write(b.tobytes(order="F"))
    return digest


def read_archive(path, magic: str):
    """Return ``(arrays, meta, hash)``; raises :class:`ArtifactError` on a
    wrong magic line, a truncated payload or bytes that do not match the
    recorded content hash."""
    path = Path(path)
    with open(path, "rb") as fh:
        got = fh.readline().decode(errors="replace").strip()
        if got != magic:
            raise ArtifactError(f"{path}: expected {magic!r}, found {got!r}")
        try:
            header = json.loads(fh.readline().decode())
        except ValueError as exc:
            raise ArtifactError(f"{path}: malformed header ({exc})") from exc
        payload = fh.read()
    if len(payload) % 8:
        raise ArtifactError(f"{path}: payload is not a whole number of float64 values")
    data = np.frombuffer(payload, dtype="<f8")
    arrays = {}
    off = 0
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) if shape else 1
        if off + size > data.size:
            raise ArtifactError(f"{path}: truncated array {spec['name']}")
        arrays[spec["name"]] = data[off : off + size].reshape(shape, order="F").astype(float)
        off += size
    if off != data.size:
        raise ArtifactError(f"{path}: {data.size - off} trailing values after the last array")
    if content_hash(arrays, header["meta"]) != header["hash"]:
        raise ArtifactError(f"{path}: content hash mismatch")
    return arrays, header["meta"], header["hash"]
