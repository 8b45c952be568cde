"""Response, design and the projection onto the complement of ``col(X)``."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.sparse.linalg import LinearOperator

from .errors import DimensionMismatch, NonFiniteInput, RankDeficientDesign

RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class ModelData:
    y: np.ndarray
    x: np.ndarray
    gram_inverse: np.ndarray
    columns: tuple[str, ...]
    # orthonormal basis of col(X); the projection is applied through it
    q: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @cached_property
    def log_det_gram(self) -> float:
        sign, logdet = np.linalg.slogdet(self.x.T @ self.x)
        return float(logdet)

    def project(self, v: np.ndarray) -> np.ndarray:
        """``P v = v - X (X'X)^{-1} X' v`` without forming ``P``."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionMismatch(f"expected length {self.n}, got {v.shape[0]}")
        return v - self.q @ (self.q.T @ v)

    def projection_operator(self) -> LinearOperator:
        return LinearOperator((self.n, self.n), matvec=self.project, matmat=self.project,
                              rmatvec=self.project, dtype=float)

    def has_intercept(self) -> bool:
        one = np.ones(self.n)
        return bool(np.linalg.norm(self.project(one)) <= 1e-8 * np.sqrt(self.n))


def load_model(y, x, columns=None) -> ModelData:
    y = np.asarray(y, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f"response has {y.shape[0]} rows, design has shape {x.shape}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
        raise NonFiniteInput("response or design contains non-finite values")
    n, p = x.shape
    if p == 0:
        raise DimensionMismatch("design has no columns")
    if p >= n:
        raise RankDeficientDesign(f"design has p={p} columns but only n={n} rows")
    u, s, _ = np.linalg.svd(x, full_matrices=False)
    if s[-1] <= RANK_TOL * s[0]:
        rank = int(np.sum(s > RANK_TOL * s[0]))
        raise RankDeficientDesign(f"design has rank {rank} < {p} columns")
    if columns is None:
        columns = tuple(f"x{j}" for j in range(p))
    columns = tuple(columns)
    if len(columns) != p:
        raise DimensionMismatch("column names do not match design width")
    gram_inv = np.linalg.inv(x.T @ x)
    for a in (y, x, gram_inv, u):
        a.setflags(write=False)
    return ModelData(y, x, gram_inv, columns, u)


def projected_quadratic(m: ModelData, v) -> float:
    """``v' P v`` computed as ``|Pv|^2``."""
    w = m.project(v)
    return float(w @ w)


def recover_beta(m: ModelData, mu) -> np.ndarray:
    """Least squares for ``beta`` given the spatial effect, ``(X'X)^{-1} X'(Y - mu)``."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (m.n,):
        raise DimensionMismatch(f"expected length {m.n}, got shape {mu.shape}")
    return np.linalg.lstsq(m.x, m.y - mu, rcond=None)[0]


def fitted_values(m: ModelData, beta, mu) -> np.ndarray:
    return m.x @ beta + mu
