"""Exact, deterministic weight serialization.

Container layout (all little-endian):

    line 1: magic + format version, ``SEQDETW1``
    line 2: a JSON header: {"meta": {...}, "entries": [{"name", "shape"}, ...]}
    then:   the raw float64 bytes of each entry, in header order

Float64 payloads round-trip bit-exactly, and the bytes depend only on the
content (no timestamps), so identical runs produce identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["MAGIC", "save_weights", "load_weights"]

MAGIC = "SEQDETW1"


def save_weights(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "entries": entries},
                        sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(MAGIC.encode() + b"\n")
        fh.write(header.encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def load_weights(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n").decode()
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header = json.loads(fh.readline().decode())
        arrays: dict[str, np.ndarray] = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated payload for {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return arrays, header["meta"]
