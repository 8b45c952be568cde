"""Neighbourhood structure for ICAR models: adjacency, Laplacian, connectivity."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sps
from scipy.sparse.csgraph import connected_components

from .errors import DimensionMismatch, EmptyGraph, InvalidConfig, InvalidGraph, NoEdges


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    """Unweighted undirected graph on ``n`` areal units.

    ``edges`` is an ``(m, 2)`` int array of unordered pairs stored as
    ``i < j``, deduplicated and sorted lexicographically.
    """

    n: int
    edges: np.ndarray

    @classmethod
    def from_edges(cls, n, pairs) -> "AdjacencyGraph":
        n = int(n)
        if n <= 0:
            raise EmptyGraph("graph has no nodes")
        e = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise InvalidGraph(f"edge index outside [0, {n})")
        if np.any(e[:, 0] == e[:, 1]):
            bad = e[e[:, 0] == e[:, 1]][0, 0]
            raise InvalidGraph(f"self-loop at node {bad}")
        e = np.sort(e, axis=1)
        e = np.unique(e, axis=0) if e.size else e
        e.setflags(write=False)
        return cls(n, e)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n).astype(float)

    def adjacency_matrix(self) -> sps.csr_matrix:
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        w = sps.coo_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(self.n, self.n))
        return w.tocsr()


@dataclass(frozen=True, eq=False)
class IcarStructure:
    graph: AdjacencyGraph
    laplacian: sps.coo_matrix
    degrees: np.ndarray
    num_components: int
    component_labels: np.ndarray

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def rank_deficiency(self) -> int:
        return self.num_components

    @property
    def connected(self) -> bool:
        return self.num_components == 1

    @cached_property
    def laplacian_csr(self) -> sps.csr_matrix:
        return self.laplacian.tocsr()

    def component_sizes(self) -> list[int]:
        return sorted(np.bincount(self.component_labels).tolist(), reverse=True)


def _canonical_coo(m: sps.spmatrix) -> sps.coo_matrix:
    m = sps.coo_matrix(m)
    m.sum_duplicates()
    order = np.lexsort((m.col, m.row))
    return sps.coo_matrix((m.data[order], (m.row[order], m.col[order])), shape=m.shape)


def build_icar(g: AdjacencyGraph) -> IcarStructure:
    """Laplacian ``R = D - W`` plus connectivity of ``g``."""
    if g.n == 0:
        raise EmptyGraph("graph has no nodes")
    if g.n >= 2 and g.num_edges == 0:
        raise NoEdges(f"graph on {g.n} nodes has no edges; the ICAR precision would be zero")
    w = g.adjacency_matrix()
    d = g.degrees()
    lap = _canonical_coo(sps.diags(d) - w)
    ncomp, labels = connected_components(w, directed=False)
    d.setflags(write=False)
    return IcarStructure(g, lap, d, int(ncomp), labels)


def grid_graph(nrows: int, ncols: int, scheme: str = "rook", mask=None) -> tuple[AdjacencyGraph, np.ndarray]:
    """Adjacency among the cells of an ``nrows x ncols`` grid.

    Cells are indexed row-major. With ``mask`` (boolean, shape ``(nrows, ncols)``)
    only the selected cells are kept, renumbered in row-major order; the second
    return value maps new node index -> row-major cell index.
    """
    if scheme not in ("rook", "queen"):
        raise InvalidConfig(f"unknown adjacency scheme {scheme!r}")
    keep = np.ones((nrows, ncols), bool) if mask is None else np.asarray(mask, bool)
    cell_ids = np.flatnonzero(keep.ravel())
    node_of = -np.ones(nrows * ncols, dtype=np.int64)
    node_of[cell_ids] = np.arange(len(cell_ids))

    offsets = [(0, 1), (1, 0)]
    if scheme == "queen":
        offsets += [(1, 1), (1, -1)]
    rr, cc = np.divmod(cell_ids, ncols)
    pairs = []
    for dr, dc in offsets:
        r2, c2 = rr + dr, cc + dc
        ok = (r2 >= 0) & (r2 < nrows) & (c2 >= 0) & (c2 < ncols)
        a = cell_ids[ok]
        b = r2[ok] * ncols + c2[ok]
        both = keep.ravel()[b]
        pairs.append(np.column_stack([node_of[a[both]], node_of[b[both]]]))
    edges = np.concatenate(pairs) if pairs else np.empty((0, 2), np.int64)
    return AdjacencyGraph.from_edges(len(cell_ids), edges), cell_ids


def lattice_graph(n0: int, scheme: str = "rook") -> AdjacencyGraph:
    """Regular ``n0 x n0`` lattice, nodes numbered row-major."""
    if n0 < 2:
        raise InvalidConfig(f"lattice side must be >= 2, got {n0}")
    g, _ = grid_graph(n0, n0, scheme)
    return g


def quadratic_form(icar: IcarStructure, v) -> float:
    """``v' R v`` as a sum of squared differences over edges."""
    v = np.asarray(v, dtype=float)
    if v.shape != (icar.n,):
        raise DimensionMismatch(f"expected vector of length {icar.n}, got shape {v.shape}")
    e = icar.graph.edges
    diff = v[e[:, 0]] - v[e[:, 1]]
    return float(diff @ diff)


def laplacian_matvec(icar: IcarStructure, v: np.ndarray) -> np.ndarray:
    return icar.laplacian_csr @ v
