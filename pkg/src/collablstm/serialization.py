"""Deterministic key-value text format for model parameters.

::

    collablstm-model 1
    kind <kind>
    <key> <value tokens ...>       # any number of metadata lines
    arrays <count>
    <name> <rows> <cols>
    <row 1 values>
    ...

Values use ``repr`` (shortest round-trip decimal), so identical parameters
give identical bytes and loading is exact.  1-D arrays are stored as a
single row.
"""
from __future__ import annotations

import numpy as np

from .errors import ArchiveFormatError

MAGIC = "collablstm-model"
VERSION = 1


def dumps(kind: str, meta: dict, arrays: dict) -> str:
    out = [f"{MAGIC} {VERSION}", f"kind {kind}"]
    for key, value in meta.items():
        if isinstance(value, (list, tuple)):
            value = " ".join(str(v) for v in value)
        out.append(f"{key} {value}".rstrip())
    out.append(f"arrays {len(arrays)}")
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=np.float64)
        mat = a.reshape(1, -1) if a.ndim == 1 else a
        out.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            out.append(" ".join(repr(v) for v in row.tolist()))
    return "\n".join(out) + "\n"


def loads(text: str, vector_names=(), path=None):
    """Parse ``text``; returns ``(kind, meta, arrays)``.

    ``meta`` maps each key to its list of whitespace-separated tokens.
    Arrays whose name (or suffix after the last ``.``) is in
    ``vector_names`` are returned 1-D.
    """
    lines = text.split("\n")
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            raise ArchiveFormatError("unexpected end of model file", path, pos)
        pos += 1
        return lines[pos - 1]

    head = take().split()
    if len(head) != 2 or head[0] != MAGIC:
        raise ArchiveFormatError(f"not a {MAGIC} file", path, 1)
    if int(head[1]) != VERSION:
        raise ArchiveFormatError(f"unsupported version {head[1]}", path, 1)
    kind_line = take().split()
    if len(kind_line) != 2 or kind_line[0] != "kind":
        raise ArchiveFormatError("expected 'kind <name>'", path, pos)
    kind = kind_line[1]
    meta = {}
    while True:
        parts = take().split()
        if not parts:
            raise ArchiveFormatError("blank line in metadata", path, pos)
        if parts[0] == "arrays":
            count = int(parts[1])
            break
        meta[parts[0]] = parts[1:]
    arrays = {}
    for _ in range(count):
        parts = take().split()
        if len(parts) != 3:
            raise ArchiveFormatError("expected '<name> <rows> <cols>'", path, pos)
        name, rows, cols = parts[0], int(parts[1]), int(parts[2])
        if name in arrays:
            raise ArchiveFormatError(f"duplicate array {name!r}", path, pos)
        mat = np.empty((rows, cols))
        for r in range(rows):
            vals = take().split()
            if len(vals) != cols:
                raise ArchiveFormatError(f"{name}: row {r} has {len(vals)} values, expected {cols}", path, pos)
            mat[r] = [float(v) for v in vals]
        if name.rsplit(".", 1)[-1] in vector_names:
            mat = mat.reshape(-1)
        arrays[name] = mat
    return kind, meta, arrays
