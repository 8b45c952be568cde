"""Linear algebra on the sum-to-zero subspace ``E = {v : 1'v = 0}``.

Everything is done in reduced coordinates: with ``H`` an ``n x (n-1)`` matrix
of orthonormal columns spanning ``E``, an operator ``A`` that is positive
definite on ``E`` is represented by ``A_E = H'AH``. The constrained inverse is
``Sigma = H A_E^{-1} H'`` (zero on ``span{1}``) and its pseudo-determinant is
``|Sigma|_+ = 1 / det(A_E)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps
from scipy.sparse.linalg import LinearOperator

from .errors import DimensionMismatch, InvalidConfig, NotPositiveDefiniteOnE


@dataclass(frozen=True, eq=False)
class SumToZeroBasis:
    columns: np.ndarray
    kind: str = "helmert"

    @property
    def n(self) -> int:
        return self.columns.shape[0]

    def restrict(self, v: np.ndarray) -> np.ndarray:
        """Coordinates ``H'v`` of (the E-component of) ``v``."""
        return self.columns.T @ v

    def lift(self, theta: np.ndarray) -> np.ndarray:
        return self.columns @ theta

    def restrict_operator(self, m) -> np.ndarray:
        """``H'MH`` for a dense, sparse or ``LinearOperator`` ``M``."""
        h = self.columns
        if isinstance(m, LinearOperator):
            mh = m.matmat(h)
        elif sps.issparse(m):
            mh = np.asarray(m @ h)
        else:
            m = np.asarray(m, dtype=float)
            if m.shape != (self.n, self.n):
                raise DimensionMismatch(f"operator shape {m.shape} does not match n={self.n}")
            mh = m @ h
        if mh.shape != h.shape:
            raise DimensionMismatch(f"operator shape does not match n={self.n}")
        out = h.T @ mh
        return 0.5 * (out + out.T)


def _helmert(n: int) -> np.ndarray:
    # column k (k = 1..n-1): k ones, then -k, then zeros, scaled to unit norm
    h = np.zeros((n, n - 1))
    for k in range(1, n):
        h[:k, k - 1] = 1.0
        h[k, k - 1] = -float(k)
        h[:, k - 1] /= np.sqrt(k * (k + 1.0))
    return h


def _centering_eigenbasis(n: int) -> np.ndarray:
    c = np.eye(n) - np.full((n, n), 1.0 / n)
    w, v = np.linalg.eigh(c)
    h = v[:, w > 0.5]
    # sign convention: first entry with |h_ij| > tiny is positive
    for j in range(h.shape[1]):
        idx = np.flatnonzero(np.abs(h[:, j]) > 1e-12)[0]
        if h[idx, j] < 0:
            h[:, j] = -h[:, j]
    return h


def make_basis(n: int, kind: str = "helmert") -> SumToZeroBasis:
    """Orthonormal basis of ``E``.

    ``kind="helmert"`` is the deterministic closed form used everywhere by
    default; ``kind="eigen"`` takes eigenvectors of the centring matrix and is
    only meant for cross-checking basis invariance.
    """
    if n < 2:
        raise InvalidConfig(f"sum-to-zero basis needs n >= 2, got {n}")
    if kind == "helmert":
        h = _helmert(n)
    elif kind == "eigen":
        h = _centering_eigenbasis(n)
    else:
        raise InvalidConfig(f"unknown basis kind {kind!r}")
    h.setflags(write=False)
    return SumToZeroBasis(h, kind)


class ConstrainedOperator:
    """Cholesky-factored ``A_E``; exposes the constrained inverse of ``A``.

    Raises :class:`NotPositiveDefiniteOnE` when ``A_E`` cannot be factored.
    """

    def __init__(self, reduced: np.ndarray, basis: SumToZeroBasis):
        reduced = np.asarray(reduced, dtype=float)
        m = basis.n - 1
        if reduced.shape != (m, m):
            raise DimensionMismatch(f"reduced operator must be {m}x{m}, got {reduced.shape}")
        if not np.all(np.isfinite(reduced)):
            raise NotPositiveDefiniteOnE("operator has non-finite entries")
        try:
            self._chol = sla.cho_factor(reduced, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteOnE(
                "operator is not positive definite on the sum-to-zero subspace"
            ) from exc
        if np.any(np.diag(self._chol[0]) <= 0):
            raise NotPositiveDefiniteOnE("operator is not positive definite on the sum-to-zero subspace")
        self.reduced = reduced
        self.basis = basis

    @property
    def n(self) -> int:
        return self.basis.n

    def solve_reduced(self, b_e: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._chol, b_e, check_finite=False)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """``x = Sigma b``; for ``b`` in ``E`` this is the unique ``x`` in ``E`` with ``Ax = b``."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise DimensionMismatch(f"expected length {self.n}, got {b.shape[0]}")
        return self.basis.lift(self.solve_reduced(self.basis.restrict(b)))

    @cached_property
    def reduced_inverse(self) -> np.ndarray:
        inv = sla.cho_solve(self._chol, np.eye(self.n - 1), check_finite=False)
        return 0.5 * (inv + inv.T)

    def dense(self) -> np.ndarray:
        """``Sigma`` on the full space. Test and small-n reporting only."""
        h = self.basis.columns
        s = h @ self.reduced_inverse @ h.T
        return 0.5 * (s + s.T)

    def log_det_reduced(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._chol[0]))))

    def pseudo_log_det(self) -> float:
        """``log |Sigma|_+ = -log det(A_E)``."""
        return -self.log_det_reduced()

    def trace_reduced(self, m_e: np.ndarray) -> float:
        """``tr(M_E A_E^{-1})`` for a symmetric reduced ``M_E``."""
        return float(np.sum(m_e * self.reduced_inverse))

    def trace_product(self, m) -> float:
        """``tr(M Sigma)``; exact."""
        m_e = self.basis.restrict_operator(m)
        return float(np.trace(self.solve_reduced(m_e)))


def constrained_inverse(a, basis: SumToZeroBasis) -> ConstrainedOperator:
    return ConstrainedOperator(basis.restrict_operator(a), basis)


def pseudo_log_det(op: ConstrainedOperator) -> float:
    return op.pseudo_log_det()


def trace_product(op: ConstrainedOperator, m) -> float:
    return op.trace_product(m)
