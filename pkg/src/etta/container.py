"""Named-array container files.

Layout::

    8 bytes   magic  b"ETTAVIT1"
    8 bytes   little-endian uint64 manifest length M
    M bytes   UTF-8 JSON manifest
    ...       raw little-endian arrays, back to back, in manifest order

The manifest is ``{"version": 1, "kind": str, "meta": {...},
"arrays": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}`` with
offsets relative to the start of the data section. Only ``<f4`` and ``<i8``
arrays are allowed. Serialisation is canonical (sorted keys, fixed
separators) so identical contents give identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ETTAVIT1"
VERSION = 1
_DTYPES = {"<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


class FormatError(ValueError):
    """Container is malformed, truncated or inconsistent."""


def _canonical_dtype(a: np.ndarray) -> str:
    if np.issubdtype(a.dtype, np.floating):
        return "<f4"
    if np.issubdtype(a.dtype, np.integer):
        return "<i8"
    raise TypeError(f"unsupported dtype {a.dtype}")


def write_arrays(path, arrays: dict[str, np.ndarray], kind: str, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        dt = _canonical_dtype(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes()
        entries.append(
            {"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {"version": VERSION, "kind": kind, "meta": meta or {}, "arrays": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def read_arrays(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(manifest, arrays)``; raises :class:`FormatError` on any defect."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + mlen > len(raw):
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {manifest.get('version') if isinstance(manifest, dict) else None}")
    if kind is not None and manifest.get("kind") != kind:
        raise FormatError(f"{path}: expected kind {kind!r}, found {manifest.get('kind')!r}")
    data = memoryview(raw)[16 + mlen :]
    arrays: dict[str, np.ndarray] = {}
    expected = 0
    for e in manifest.get("arrays", []):
        try:
            dt = _DTYPES[e["dtype"]]
            shape = tuple(int(s) for s in e["shape"])
            off, nbytes = int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed manifest entry {e!r}") from None
        if off != expected or nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: inconsistent extent for {e.get('name')!r}")
        if off + nbytes > len(data):
            raise FormatError(f"{path}: truncated data for {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(data[off : off + nbytes], dtype=dt).reshape(shape).copy()
        expected = off + nbytes
    if expected != len(data):
        raise FormatError(f"{path}: {len(data) - expected} trailing bytes")
    return manifest, arrays
