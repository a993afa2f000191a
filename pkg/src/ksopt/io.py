"""Plain-text and binary exchange formats used for cross-checking results."""

from __future__ import annotations

import json
import os

import numpy as np
import scipy.sparse as sp

__all__ = [
    "export_coo",
    "load_coo",
    "dump_trajectory",
    "load_trajectory",
    "write_csv",
    "save_tt",
    "load_tt",
]

_FMT = "%.17g"


def export_coo(matrix, path) -> None:
    """Write a sparse matrix as `row col value` triples, 17 significant digits."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"{coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {_FMT % v}\n")


def load_coo(path) -> sp.csr_matrix:
    with open(path) as fh:
        nrows, ncols, nnz = (int(t) for t in fh.readline().split())
        rows = np.empty(nnz, dtype=int)
        cols = np.empty(nnz, dtype=int)
        vals = np.empty(nnz)
        for i in range(nnz):
            r, c, v = fh.readline().split()
            rows[i], cols[i], vals[i] = int(r), int(c), float(v)
    return sp.coo_matrix((vals, (rows, cols)), shape=(nrows, ncols)).tocsr()


def dump_trajectory(grid, values, path) -> None:
    """One field per file: header `n nt T`, then one line per nodal value.

    Values are written slice by slice in lexicographic node order.
    """
    arr = np.asarray(values, dtype=float).ravel()
    with open(path, "w") as fh:
        fh.write(f"{grid.n} {grid.nt} {_FMT % grid.T}\n")
        for v in arr:
            fh.write(f"{_FMT % v}\n")


def load_trajectory(path):
    with open(path) as fh:
        header = fh.readline().split()
        n, nt, T = int(header[0]), int(header[1]), float(header[2])
        vals = np.array([float(line) for line in fh if line.strip()])
    return (n, nt, T), vals


def write_csv(path, header, rows) -> None:
    """Deterministic CSV: floats at 17 significant digits, no timing fields."""
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for cell in row:
                if isinstance(cell, float):
                    cells.append(_FMT % cell)
                else:
                    cells.append(str(cell))
            fh.write(",".join(cells) + "\n")


def save_tt(cores, path) -> None:
    """Binary tensor-train dump plus a text manifest alongside it.

    Layout: for each core, float64 entries in row-major order, concatenated;
    the manifest records mode count, mode sizes and ranks.
    """
    mode_sizes = [c.shape[1] for c in cores]
    ranks = [cores[0].shape[0]] + [c.shape[-1] for c in cores]
    flat = np.concatenate([np.ascontiguousarray(c, dtype=np.float64).ravel() for c in cores])
    with open(path, "wb") as fh:
        flat.tofile(fh)
    manifest = {
        "num_modes": len(cores),
        "mode_sizes": mode_sizes,
        "ranks": ranks,
        "core_shapes": [list(c.shape) for c in cores],
        "dtype": "float64",
        "byte_order": "little" if np.little_endian else "big",
    }
    with open(str(path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_tt(path):
    with open(str(path) + ".manifest.json") as fh:
        manifest = json.load(fh)
    flat = np.fromfile(path, dtype=np.float64)
    cores = []
    offset = 0
    for shape in manifest["core_shapes"]:
        size = int(np.prod(shape))
        cores.append(flat[offset : offset + size].reshape(shape))
        offset += size
    if offset != flat.size:
        raise ValueError(f"tensor-train file {os.fspath(path)} has trailing data")
    return cores
