"""Plain-text grid dumps.

Format::

    N <N> fields <k>
    <field 0, row-major, comma separated, N*N values>
    ...

Solid cells are written as ``nan``.
"""
from __future__ import annotations

import numpy as np


def write_grid(path, fields, mask=None):
    fields = [np.asarray(f, dtype=float) for f in fields]
    if not fields:
        raise ValueError("no fields to write")
    N = fields[0].shape[0]
    with open(path, "w") as fh:
        fh.write(f"N {N} fields {len(fields)}\n")
        for f in fields:
            if f.shape != (N, N):
                raise ValueError("all fields must be N x N")
            v = f.copy()
            if mask is not None:
                v[~mask] = np.nan
            fh.write(",".join("nan" if np.isnan(x) else repr(float(x)) for x in v.ravel()))
            fh.write("\n")


def read_grid(path):
    """Returns a list of ``(N, N)`` arrays."""
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 4 or head[0] != "N" or head[2] != "fields":
            raise ValueError(f"bad grid header: {' '.join(head)}")
        N, k = int(head[1]), int(head[3])
        out = []
        for _ in range(k):
            vals = np.array([float(x) for x in fh.readline().strip().split(",")])
            if vals.size != N * N:
                raise ValueError("field size does not match header")
            out.append(vals.reshape(N, N))
    return out
