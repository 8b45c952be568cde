"""File formats: adjacency (Matrix Market or edge-list CSV), model CSVs, cell tables."""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sps

from .errors import InputError, InvalidGraph
from .graph import AdjacencyGraph
from .ingest import CELL_COLUMNS, CellTable
from .model import ModelData, load_model


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_table(path, required=None) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f"{path}: file is empty")
    header = [c.strip() for c in rows[0]]
    for col in required or ():
        if col not in header:
            raise InputError(f"{path}: missing required column {col!r} (header is {','.join(header)})")
    body = rows[1:]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise InputError(f"{path}: line {k} has {len(r)} fields, expected {len(header)}")
    return header, body


def _floats(path, rows, idx) -> np.ndarray:
    try:
        return np.array([[float(r[i]) for i in idx] for r in rows], dtype=float).reshape(len(rows), len(idx))
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric value ({exc})") from None


def read_adjacency(path) -> AdjacencyGraph:
    """Adjacency from ``.mtx`` (Matrix Market coordinate) or an edge-list CSV with header ``i,j``.

    Edge-list CSVs carry 0-based node indices; the node count is one more than
    the largest index unless a ``# n=<count>`` first line is present.
    """
    path = Path(path)
    if path.suffix.lower() == ".mtx":
        try:
            m = scipy.io.mmread(str(path))
        except (ValueError, IndexError) as exc:
            raise InputError(f"{path}: not a valid Matrix Market file ({exc})") from None
        m = sps.coo_matrix(m)
        if m.shape[0] != m.shape[1]:
            raise InvalidGraph(f"{path}: adjacency must be square, got {m.shape}")
        m.sum_duplicates()
        if m.nnz and not np.allclose(m.data, 1.0):
            raise InvalidGraph(f"{path}: weighted adjacency is not supported (entries must be 0/1)")
        if np.any(m.row == m.col):
            raise InvalidGraph(f"{path}: adjacency has diagonal entries (self-loops)")
        csr = m.tocsr()
        if (csr != csr.T).nnz:
            raise InvalidGraph(f"{path}: adjacency is not symmetric")
        return AdjacencyGraph.from_edges(m.shape[0], np.column_stack([m.row, m.col]))
    with open(path, newline="") as fh:
        first = fh.readline().strip()
    n = None
    if first.startswith("#") and "n=" in first:
        n = int(first.split("n=")[1].split()[0])
        header, body = _read_table_skip_comment(path)
    else:
        header, body = _read_table(path, ("i", "j"))
    idx = (header.index("i"), header.index("j"))
    e = _floats(path, body, idx)
    if np.any(e != np.round(e)):
        raise InvalidGraph(f"{path}: node indices must be integers")
    e = e.astype(np.int64)
    if n is None:
        n = int(e.max()) + 1 if len(e) else 0
    return AdjacencyGraph.from_edges(n, e)


def _read_table_skip_comment(path):
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()[1:]
    tmp = [r for r in csv.reader(lines) if r]
    header = [c.strip() for c in tmp[0]] if tmp else []
    if "i" not in header or "j" not in header:
        raise InputError(f"{path}: missing required column 'i' or 'j'")
    return header, tmp[1:]


def write_adjacency(path, graph: AdjacencyGraph) -> None:
    """Matrix Market ``pattern symmetric``; lower triangle, sorted, 1-based."""
    e = graph.edges
    lower = np.column_stack([e[:, 1], e[:, 0]]) + 1
    lower = lower[np.lexsort((lower[:, 0], lower[:, 1]))]
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate pattern symmetric\n")
        fh.write(f"{graph.n} {graph.n} {len(lower)}\n")
        for i, j in lower:
            fh.write(f"{i} {j}\n")


def read_response(path) -> np.ndarray:
    header, body = _read_table(path, ("y",))
    return _floats(path, body, [header.index("y")])[:, 0]


def read_design(path) -> tuple[tuple[str, ...], np.ndarray]:
    header, body = _read_table(path)
    return tuple(header), _floats(path, body, range(len(header)))


def read_model(response_path, design_path) -> ModelData:
    y = read_response(response_path)
    names, x = read_design(design_path)
    return load_model(y, x, names)


def write_columns(path, names, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*columns):
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row])


def write_model(response_path, design_path, model: ModelData) -> None:
    write_columns(response_path, ["y"], [model.y])
    write_columns(design_path, list(model.columns), list(model.x.T))


def read_cells(path) -> CellTable:
    header, body = _read_table(path, CELL_COLUMNS)
    a = _floats(path, body, [header.index(c) for c in CELL_COLUMNS])
    return CellTable.from_arrays(*a.T)
