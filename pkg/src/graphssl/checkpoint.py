"""Versioned text checkpoints: named scalars plus named float64 arrays.

Layout:

    graphssl-checkpoint v1
    meta <key> <value>
    array <name> <dim0> <dim1> ...
    <row of repr() doubles per line>
    ...
    end

repr() round-trips every finite double exactly, so save/load is value-exact.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

MAGIC = "graphssl-checkpoint v1"


def save_document(path, meta: dict[str, str], arrays: dict[str, np.ndarray]) -> None:
    with open(path, "w") as fh:
        fh.write(MAGIC + "\n")
        for key, value in meta.items():
            if any(ch.isspace() for ch in key):
                raise ValidationError(f"meta key may not contain whitespace: {key!r}")
            fh.write(f"meta {key} {value}\n")
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"array {name} {dims}".rstrip() + "\n")
            if arr.size:
                rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(1, -1)
                for row in rows:
                    fh.write(" ".join(repr(float(v)) for v in row) + "\n")
        fh.write("end\n")


def load_document(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValidationError(f"{path}: not a {MAGIC!r} document")
    meta: dict[str, str] = {}
    arrays: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        if line == "end":
            return meta, arrays
        if line.startswith("meta "):
            _, key, value = line.split(" ", 2)
            meta[key] = value
            i += 1
            continue
        if line.startswith("array "):
            parts = line.split(" ")
            name = parts[1]
            shape = tuple(int(d) for d in parts[2:])
            if 0 in shape:
                n_rows = 0
            else:
                n_rows = 1 if len(shape) <= 1 else int(np.prod(shape[:-1]))
            width = shape[-1] if shape else 1
            values = []
            for r in range(n_rows):
                row = lines[i + 1 + r].split(" ")
                if len(row) != width and shape:
                    raise ValidationError(f"{path}: array {name} row {r} has {len(row)} values, want {width}")
                values.extend(float(v) for v in row)
            arr = np.asarray(values, dtype=np.float64).reshape(shape)
            arrays[name] = arr
            i += 1 + n_rows
            continue
        raise ValidationError(f"{path}: unexpected line {i + 1}: {line!r}")
    raise ValidationError(f"{path}: missing end marker")
