import math
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"
LATTICE5 = FIXTURES / "lattice5"


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def dense_projection(x):
    """I - X (X'X)^{-1} X' formed explicitly."""
    return np.eye(x.shape[0]) - x @ np.linalg.solve(x.T @ x, x.T)


def dense_constrained_inverse(a):
    """Pseudo-inverse of C A C (C the centring matrix) by eigendecomposition."""
    n = a.shape[0]
    c = np.eye(n) - np.full((n, n), 1.0 / n)
    w, v = np.linalg.eigh(c @ a @ c)
    keep = np.abs(w) > 1e-9 * np.abs(w).max()
    return (v[:, keep] / w[keep]) @ v[:, keep].T, w[keep]


def random_connected_graph(rng, n, extra=None):
    """Random spanning tree plus a few extra edges."""
    perm = rng.permutation(n)
    edges = [(perm[k], perm[rng.integers(0, k)]) for k in range(1, n)]
    for _ in range(extra if extra is not None else n // 2):
        i, j = rng.choice(n, 2, replace=False)
        edges.append((i, j))
    return np.array(edges)


def group_by(cells, nx, ny):
    """Plain-Python per-cell count and means over the bounding-box grid,
    keyed by ``(grid_row, grid_col)``."""
    xmin, xmax, ymin, ymax = cells.x.min(), cells.x.max(), cells.y.min(), cells.y.max()
    wx, wy = (xmax - xmin) / nx, (ymax - ymin) / ny
    acc = defaultdict(lambda: [0, [], []])
    for x, y, c, lib in zip(cells.x, cells.y, cells.count, cells.library_size):
        key = (min(int(math.floor((y - ymin) / wy)), ny - 1), min(int(math.floor((x - xmin) / wx)), nx - 1))
        acc[key][0] += 1
        acc[key][1].append(c)
        acc[key][2].append(lib)
    return {k: (n, math.fsum(cs) / n, math.fsum(ls) / n) for k, (n, cs, ls) in acc.items()}


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one ``(criterion, passed, detail)`` line for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(name, passed, detail=""):
        lines.append((name, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in lines:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
