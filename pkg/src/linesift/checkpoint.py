"""Bit-exact tensor checkpointing.

A checkpoint is a pair of files: a plain-text manifest listing one tensor
per line as ``name<TAB>shape<TAB>byte_offset`` (shape as comma-separated
extents, empty for scalars) and a single binary blob of little-endian
64-bit floats concatenated in manifest order. Round-trips are bit-exact,
including NaN payloads.
"""

from __future__ import annotations

import os

import numpy as np

MANIFEST_NAME = "manifest.txt"
BLOB_NAME = "weights.bin"


def save_tensors(directory: str, arrays: dict[str, np.ndarray]) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    offset = 0
    with open(os.path.join(directory, BLOB_NAME), "wb") as blob:
        for name in sorted(arrays):
            if "\t" in name or "\n" in name:
                raise ValueError(f"tensor name {name!r} contains separators")
            # note: ascontiguousarray would promote 0-d arrays to shape (1,)
            arr = np.asarray(arrays[name], dtype="<f8")
            shape = ",".join(str(d) for d in arr.shape)
            lines.append(f"{name}\t{shape}\t{offset}")
            blob.write(arr.tobytes(order="C"))
            offset += arr.nbytes
    with open(os.path.join(directory, MANIFEST_NAME), "w") as mf:
        mf.write("\n".join(lines) + ("\n" if lines else ""))


def load_tensors(directory: str) -> dict[str, np.ndarray]:
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    blob_path = os.path.join(directory, BLOB_NAME)
    out: dict[str, np.ndarray] = {}
    with open(blob_path, "rb") as blob:
        raw = blob.read()
    with open(manifest_path) as mf:
        for line in mf:
            line = line.rstrip("\n")
            if not line:
                continue
            name, shape_s, offset_s = line.split("\t")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            count = int(np.prod(shape)) if shape else 1
            offset = int(offset_s)
            arr = np.frombuffer(
                raw, dtype="<f8", count=count, offset=offset
            ).reshape(shape)
            out[name] = arr.astype(np.float64, copy=True)
    return out
