"""Self-describing binary container: JSON header + raw little-endian payload blocks.

Used for both trace datasets (.nardat) and checkpoints (.narckpt). The header
carries a format version, arbitrary metadata, and a table of named arrays
(dtype, shape, byte offset). Payload arrays are restricted to float64 and
int32 so files round-trip bit-exactly and stay readable cross-language.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = b"NARC"
FORMAT_VERSION = 1

_DTYPES = {"f8": np.dtype("<f8"), "i4": np.dtype("<i4")}


class FormatError(Exception):
    """Unreadable or version-incompatible container."""


def _canonical(arr) -> np.ndarray:
    a = np.asarray(arr)
    if a.dtype.kind == "f":
        return np.ascontiguousarray(a, dtype="<f8")
    if a.dtype.kind in "iub":
        return np.ascontiguousarray(a, dtype="<i4")
    raise FormatError(f"unsupported dtype {a.dtype}")


def write_container(path, meta: dict, arrays: dict) -> None:
    """Write metadata plus named arrays. Deterministic byte layout."""
    blocks = []
    table = []
    offset = 0
    for name in arrays:
        a = _canonical(arrays[name])
        code = "f8" if a.dtype.kind == "f" else "i4"
        table.append({"name": name, "dtype": code, "shape": list(a.shape), "offset": offset})
        raw = a.tobytes()
        blocks.append(raw)
        offset += len(raw)
    header = {"version": FORMAT_VERSION, "meta": meta, "arrays": table}
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(hjson).to_bytes(8, "little"))
        f.write(hjson)
        for raw in blocks:
            f.write(raw)


def read_container(path):
    """Return (meta, arrays). Raises FormatError on bad magic/version, IOError on truncation."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic in {path}")
        hlen = int.from_bytes(f.read(8), "little")
        hjson = f.read(hlen)
        if len(hjson) != hlen:
            raise IOError(f"truncated header in {path}")
        header = json.loads(hjson.decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise FormatError(f"container version {header.get('version')} != {FORMAT_VERSION}")
        payload = f.read()
    arrays = {}
    for entry in header["arrays"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + n * dt.itemsize
        if end > len(payload):
            raise IOError(f"truncated payload in {path}")
        arrays[entry["name"]] = np.frombuffer(payload[start:end], dtype=dt).reshape(shape).copy()
    return header["meta"], arrays


def content_digest(path) -> str:
    """Stable 64-bit content hash of a file, hex-encoded."""
    h = hashlib.blake2b(digest_size=8)
    h.update(Path(path).read_bytes())
    return h.hexdigest()
