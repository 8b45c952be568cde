"""The restricted ICAR problem in sum-to-zero coordinates, and its constant.

Constant convention (shared by :func:`vreml.variational.elbo` and
:func:`vreml.oracle.restricted_loglik`): the restricted log-likelihood is the
exact log of ``integral over E of p(Y | u, tau_y) p(u | tau_u) du`` where

* ``p(Y | u, tau_y)`` is the Gaussian likelihood with ``beta`` integrated out
  under a flat prior::

      (2 pi)^{-(n-p)/2} tau_y^{(n-p)/2} |X'X|^{-1/2} exp(-tau_y/2 (Y-u)'P(Y-u))

* ``p(u | tau_u)`` is the ICAR density normalised on ``E`` (Lebesgue measure in
  any orthonormal coordinates of ``E``)::

      (2 pi)^{-(n-r)/2} tau_u^{(n-r)/2} |R|_+^{1/2} exp(-tau_u/2 u'Ru)

With these normalisers the restricted log-likelihood coincides with the
textbook REML likelihood of ``Y ~ N(X beta, tau_y^{-1} I + tau_u^{-1} R^+)``
under a flat prior on ``beta``, and the ELBO at the exact posterior equals it.
The parameter-free part is :attr:`ReducedProblem.log_normalizer`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch, Disconnected
from .graph import IcarStructure
from .model import ModelData
from .subspace import ConstrainedOperator, SumToZeroBasis, make_basis

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class ReducedProblem:
    model: ModelData
    icar: IcarStructure
    basis: SumToZeroBasis
    k: np.ndarray  # H'RH
    p_e: np.ndarray  # H'PH
    py_e: np.ndarray  # H'PY
    ypy: float
    log_det_k: float

    @property
    def n(self) -> int:
        return self.model.n

    @property
    def p(self) -> int:
        return self.model.p

    @property
    def r(self) -> int:
        return self.icar.rank_deficiency

    @property
    def log_normalizer(self) -> float:
        """Parameter-free constant of the restricted joint density."""
        n, p, r = self.n, self.p, self.r
        return (-0.5 * (n - p) * LOG_2PI - 0.5 * self.model.log_det_gram
                - 0.5 * (n - r) * LOG_2PI + 0.5 * self.log_det_k)

    def precision(self, tau_y: float, tau_u: float) -> np.ndarray:
        """Reduced ``H'(tau_y P + tau_u R)H``."""
        return tau_y * self.p_e + tau_u * self.k

    def factor(self, tau_y: float, tau_u: float) -> ConstrainedOperator:
        return ConstrainedOperator(self.precision(tau_y, tau_u), self.basis)


def _build(model: ModelData, icar: IcarStructure, basis: SumToZeroBasis) -> ReducedProblem:
    if model.n != icar.n:
        raise DimensionMismatch(f"model has {model.n} rows but graph has {icar.n} nodes")
    if not icar.connected:
        raise Disconnected(
            f"adjacency graph has {icar.num_components} connected components "
            f"(sizes {icar.component_sizes()[:5]}); a single sum-to-zero constraint needs a connected graph"
        )
    h = basis.columns
    k = basis.restrict_operator(icar.laplacian_csr)
    z = h.T @ model.q
    p_e = np.eye(model.n - 1) - z @ z.T
    p_e = 0.5 * (p_e + p_e.T)
    py = model.project(model.y)
    sign, log_det_k = np.linalg.slogdet(k)
    for a in (k, p_e):
        a.setflags(write=False)
    return ReducedProblem(model, icar, basis, k, p_e, h.T @ py, float(py @ py), float(log_det_k))


@lru_cache(maxsize=16)
def _cached(model, icar, kind):
    return _build(model, icar, make_basis(model.n, kind))


def reduce_problem(model: ModelData, icar: IcarStructure, basis: SumToZeroBasis | None = None) -> ReducedProblem:
    """Reduced form of ``(model, icar)``; cached per object pair for the default bases."""
    if basis is None:
        return _cached(model, icar, "helmert")
    return _build(model, icar, basis)
