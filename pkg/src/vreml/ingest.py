"""Aggregate point (cell-level) observations onto a regular grid.

Each non-empty grid cell ``k`` becomes an areal unit with response
``Z_k = standardize(log(1 + mean count))`` and covariates
``(1, log(1 + mean library size), log(1 + n_k), centre_x, centre_y)`` where
``n_k`` is the number of points in the cell and the centres are standardized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, DisconnectedGrid, InvalidConfig, NonFiniteInput, TooFewCells, ZeroVarianceResponse
from .graph import AdjacencyGraph, build_icar, grid_graph
from .model import ModelData, load_model

CELL_COLUMNS = ("x", "y", "count", "library_size")
COVARIATE_NAMES = ("intercept", "log1p_mean_library", "log1p_cell_count", "center_x", "center_y")


@dataclass(frozen=True, eq=False)
class CellTable:
    x: np.ndarray
    y: np.ndarray
    count: np.ndarray
    library_size: np.ndarray

    @classmethod
    def from_arrays(cls, x, y, count, library_size) -> "CellTable":
        cols = [np.asarray(a, dtype=float).ravel() for a in (x, y, count, library_size)]
        if len({len(c) for c in cols}) != 1:
            raise DimensionMismatch("cell table columns have different lengths")
        if not all(np.all(np.isfinite(c)) for c in cols):
            raise NonFiniteInput("cell table contains non-finite values")
        if np.any(cols[2] < 0) or np.any(cols[3] < 0):
            raise InvalidConfig("counts and library sizes must be nonnegative")
        return cls(*cols)

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True, eq=False)
class GridDataset:
    z: np.ndarray
    covariates: np.ndarray
    mean_count: np.ndarray
    mean_library: np.ndarray
    cell_count: np.ndarray
    grid_row: np.ndarray
    grid_col: np.ndarray
    center_x: np.ndarray
    center_y: np.ndarray
    graph: AdjacencyGraph
    grid_shape: tuple[int, int]  # (rows, cols)
    cell_size: tuple[float, float]
    dropped_rows: int
    connected: bool
    component_sizes: tuple[int, ...]

    @property
    def num_cells(self) -> int:
        return len(self.z)


def _standardize(v: np.ndarray) -> np.ndarray:
    sd = v.std(ddof=1)
    centred = v - v.mean()
    return centred / sd if sd > 0 else centred


def _axis(lo, hi, ncells, width):
    span = hi - lo
    if width is not None:
        if not width > 0:
            raise InvalidConfig(f"cell width must be positive, got {width}")
        ncells = max(1, math.ceil(span / width))
        return ncells, float(width)
    if ncells < 1:
        raise InvalidConfig(f"grid must have at least one cell per side, got {ncells}")
    return int(ncells), (span / ncells if span > 0 else 1.0)


def bin_cells(cells: CellTable, grid: int | tuple[int, int] | None = None, cell_width: float | None = None,
              bounds: tuple[float, float, float, float] | None = None, scheme: str = "rook",
              require_connected: bool = True) -> GridDataset:
    """Bin ``cells`` onto a grid and build the areal data set.

    ``grid`` is cells per side (``n`` or ``(nx, ny)``); alternatively give an
    absolute ``cell_width``. The grid spans ``bounds = (xmin, xmax, ymin, ymax)``,
    by default the bounding box of the points; points outside are dropped.
    """
    if (grid is None) == (cell_width is None):
        raise InvalidConfig("give exactly one of grid or cell_width")
    x, y = cells.x, cells.y
    if bounds is None:
        if len(cells) == 0:
            raise TooFewCells("cell table is empty")
        bounds = (x.min(), x.max(), y.min(), y.max())
    xmin, xmax, ymin, ymax = map(float, bounds)
    inside = (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)
    dropped = int(np.sum(~inside))

    if isinstance(grid, (tuple, list)):
        gx, gy = grid
    else:
        gx = gy = grid
    nx, wx = _axis(xmin, xmax, gx if grid is not None else None, cell_width)
    ny, wy = _axis(ymin, ymax, gy if grid is not None else None, cell_width)

    ix = np.clip(np.floor((x[inside] - xmin) / wx).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor((y[inside] - ymin) / wy).astype(np.int64), 0, ny - 1)
    lin = iy * nx + ix
    ncell = nx * ny
    n_k = np.bincount(lin, minlength=ncell)
    sum_y = np.bincount(lin, weights=cells.count[inside], minlength=ncell)
    sum_l = np.bincount(lin, weights=cells.library_size[inside], minlength=ncell)
    occupied = n_k > 0
    m = int(occupied.sum())
    if m < 2:
        raise TooFewCells(f"only {m} non-empty grid cell(s); use a finer grid")

    graph, cell_ids = grid_graph(ny, nx, scheme, mask=occupied.reshape(ny, nx))
    n_k = n_k[cell_ids]
    ybar = sum_y[cell_ids] / n_k
    lbar = sum_l[cell_ids] / n_k
    rows, cols = np.divmod(cell_ids, nx)
    cx = xmin + (cols + 0.5) * wx
    cy = ymin + (rows + 0.5) * wy

    log_y = np.log1p(ybar)
    if not log_y.std(ddof=1) > 0:
        raise ZeroVarianceResponse("all grid cells have the same mean count; the standardized response is undefined")
    z = _standardize(log_y)
    design = np.column_stack([np.ones(m), np.log1p(lbar), np.log1p(n_k.astype(float)),
                              _standardize(cx), _standardize(cy)])

    icar = build_icar(graph) if graph.num_edges else None
    sizes = tuple(icar.component_sizes()) if icar is not None else (1,) * m
    connected = icar is not None and icar.connected
    if require_connected and not connected:
        raise DisconnectedGrid(
            f"grid adjacency among the {m} non-empty cells has {len(sizes)} components "
            f"(largest sizes {list(sizes[:5])})", sizes)
    return GridDataset(z, design, ybar, lbar, n_k, rows, cols, cx, cy, graph, (ny, nx), (wx, wy),
                       dropped, connected, sizes)


def dataset_to_model(g: GridDataset) -> tuple[ModelData, AdjacencyGraph]:
    if not g.connected:
        raise DisconnectedGrid(f"grid adjacency has {len(g.component_sizes)} components", g.component_sizes)
    return load_model(g.z, g.covariates, COVARIATE_NAMES), g.graph
