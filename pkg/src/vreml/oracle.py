"""Exact small-n references: restricted log-likelihood, constrained posterior,
and direct REML / ML maximisation over the two precisions.

Nothing here goes through the coordinate-ascent code; these functions are the
yardstick the variational fit is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize, root

from .errors import InvalidConfig, NonFiniteObjective, NotPositiveDefiniteOnE, SizeGuardExceeded
from .graph import IcarStructure
from .model import ModelData, projected_quadratic
from .problem import LOG_2PI, reduce_problem

POSTERIOR_MAX_N = 500
MAXIMIZE_MAX_N = 2500
METHODS = ("exact_reml", "exact_mle")


@dataclass(frozen=True)
class OracleEstimates:
    tau_y_hat: float
    tau_u_hat: float
    objective_value: float
    method: str
    evaluations: int
    gradient_norm: float
    # maximiser ran to the edge of the search region (a variance component -> 0)
    boundary: bool = False

    @property
    def sigma_sq_eps(self) -> float:
        return 1.0 / self.tau_y_hat

    @property
    def sigma_sq_u(self) -> float:
        return 1.0 / self.tau_u_hat


def _check_taus(tau_y, tau_u):
    if not (tau_y > 0 and tau_u > 0):
        raise InvalidConfig(f"precisions must be positive, got tau_y={tau_y}, tau_u={tau_u}")


def restricted_loglik(tau_y: float, tau_u: float, model: ModelData, icar: IcarStructure, basis=None) -> float:
    """Restricted log-likelihood, integrating ``u`` over E in closed form."""
    _check_taus(tau_y, tau_u)
    pr = reduce_problem(model, icar, basis)
    op = pr.factor(tau_y, tau_u)
    b = tau_y * pr.py_e
    n, p, r = pr.n, pr.p, pr.r
    return (pr.log_normalizer
            + 0.5 * (n - p) * math.log(tau_y) + 0.5 * (n - r) * math.log(tau_u)
            - 0.5 * tau_y * pr.ypy
            + 0.5 * (n - r) * LOG_2PI - 0.5 * op.log_det_reduced()
            + 0.5 * float(b @ op.solve_reduced(b)))


def restricted_score(tau_y: float, tau_u: float, model: ModelData, icar: IcarStructure) -> np.ndarray:
    """Gradient of :func:`restricted_loglik` with respect to ``(log tau_y, log tau_u)``.

    Differentiates the closed form directly: with ``A = tau_y P_E + tau_u K``
    and ``m = A^{-1} tau_y H'PY``,
    ``dl/dtau_y = (n-p)/(2 tau_y) - (Y'PY - 2 m'H'PY + m'P_E m + tr(A^{-1}P_E))/2`` and
    ``dl/dtau_u = (n-r)/(2 tau_u) - (m'K m + tr(A^{-1}K))/2``.
    """
    _check_taus(tau_y, tau_u)
    pr = reduce_problem(model, icar)
    op = pr.factor(tau_y, tau_u)
    m = op.solve_reduced(tau_y * pr.py_e)
    inv = op.reduced_inverse
    d_y = 0.5 * (pr.n - pr.p) / tau_y - 0.5 * (pr.ypy - 2.0 * float(pr.py_e @ m) + float(m @ pr.p_e @ m)
                                               + float(np.sum(inv * pr.p_e)))
    d_u = 0.5 * (pr.n - pr.r) / tau_u - 0.5 * (float(m @ pr.k @ m) + float(np.sum(inv * pr.k)))
    return np.array([tau_y * d_y, tau_u * d_u])


def exact_posterior(tau_y: float, tau_u: float, model: ModelData, icar: IcarStructure) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and dense covariance of ``u`` on E at fixed precisions.

    Solved in the full space through the bordered system
    ``[[A, 1], [1', 0]]`` with ``A = tau_y P + tau_u R``, so no basis of E is
    involved: the top-left block of its inverse is the constrained inverse.
    """
    _check_taus(tau_y, tau_u)
    n = model.n
    if n > POSTERIOR_MAX_N:
        raise SizeGuardExceeded(f"dense posterior limited to n <= {POSTERIOR_MAX_N}, got {n}")
    p_dense = np.eye(n) - model.q @ model.q.T
    a = tau_y * p_dense + tau_u * icar.laplacian.toarray()
    bordered = np.zeros((n + 1, n + 1))
    bordered[:n, :n] = a
    bordered[:n, n] = bordered[n, :n] = 1.0
    try:
        inv = np.linalg.inv(bordered)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteOnE("precision is singular on E") from exc
    sigma = inv[:n, :n]
    sigma = 0.5 * (sigma + sigma.T)
    # positive definite on E  <=>  Sigma + 11'/n positive definite
    if np.linalg.eigvalsh(sigma + np.full((n, n), 1.0 / n))[0] <= 0:
        raise NotPositiveDefiniteOnE("precision is not positive definite on E")
    mu = sigma @ (tau_y * model.project(model.y))
    return mu, sigma


def marginal_loglik(tau_y: float, tau_u: float, model: ModelData, icar: IcarStructure) -> float:
    """Profile log-likelihood of the sum-to-zero contrasts ``H'Y``.

    ``H'Y ~ N(H'X beta, tau_y^{-1} I + tau_u^{-1} K^{-1})`` with ``K = H'RH`` and
    ``beta`` at its GLS estimate. The full-data likelihood of ``Y`` is not used:
    the ICAR covariance is zero along the constant vector, so with an intercept
    in ``X`` that direction is fitted exactly and the likelihood grows without
    bound as ``tau_y -> inf``. Dropping only that direction keeps the ML
    character (the remaining fixed effects are profiled, not integrated out).

    Uses ``(tau_y^{-1} I + tau_u^{-1} K^{-1})^{-1} = tau_y I - tau_y^2 B^{-1}``
    with ``B = tau_y I + tau_u K``.
    """
    _check_taus(tau_y, tau_u)
    pr = reduce_problem(model, icar)
    m = pr.n - 1
    b_e = tau_y * np.eye(m) + tau_u * pr.k
    try:
        chol = sla.cho_factor(b_e, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteOnE("marginal covariance is singular") from exc
    logdet_b = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    logdet_v = -m * math.log(tau_y) - m * math.log(tau_u) - pr.log_det_k + logdet_b

    def vinv(v):
        return tau_y * v - tau_y ** 2 * sla.cho_solve(chol, v)

    y, x = _contrasts(pr)
    vx = vinv(x)
    gamma = np.linalg.solve(x.T @ vx, vx.T @ y)
    e = y - x @ gamma
    return -0.5 * m * LOG_2PI - 0.5 * logdet_v - 0.5 * float(e @ vinv(e))


def _contrasts(pr):
    """``H'Y`` and an orthonormal basis of ``col(H'X)`` (the intercept drops out)."""
    h = pr.basis.columns
    u, s, _ = np.linalg.svd(h.T @ pr.model.x, full_matrices=False)
    keep = s > 1e-10 * max(s[0], 1.0)
    return h.T @ pr.model.y, u[:, keep]


def _objective(method):
    if method == "exact_reml":
        return restricted_loglik
    if method == "exact_mle":
        return marginal_loglik
    raise InvalidConfig(f"unknown oracle method {method!r}; expected one of {METHODS}")


def maximize(method: str, model: ModelData, icar: IcarStructure, *, grid_points: int = 21,
             half_width: float = 6.0) -> OracleEstimates:
    """Maximise the REML or ML objective over ``(log tau_y, log tau_u)``.

    A ``grid_points x grid_points`` grid spanning ``+-half_width`` log-units
    around the method-of-moments start picks the basin; Nelder-Mead refines
    inside that box (REML additionally solves its score equation). An optimum
    within half a log-unit of the box edge is flagged as ``boundary``: the
    likelihood is then still increasing towards a zero variance component.
    """
    f = _objective(method)
    if model.n > MAXIMIZE_MAX_N:
        raise SizeGuardExceeded(f"oracle maximisation limited to n <= {MAXIMIZE_MAX_N}, got {model.n}")
    evals = 0
    start = math.log((model.n - model.p) / projected_quadratic(model, model.y))

    def obj(z):
        nonlocal evals
        evals += 1
        if np.any(np.abs(np.asarray(z) - start) > half_width):
            return -np.inf  # outside the searched region
        try:
            v = f(math.exp(z[0]), math.exp(z[1]), model, icar)
        except (NotPositiveDefiniteOnE, OverflowError):
            return -np.inf
        return v if math.isfinite(v) else -np.inf

    axis = np.linspace(-half_width, half_width, grid_points)
    best, best_z = -np.inf, None
    for dy in axis:
        for du in axis:
            z = (start + dy, start + du)
            v = obj(z)
            if v > best:
                best, best_z = v, z
    if best_z is None:
        raise NonFiniteObjective(f"{method} objective is non-finite on the whole starting grid")

    res = minimize(lambda z: -obj(z), np.asarray(best_z), method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-13, "maxiter": 5000, "maxfev": 10000,
                            "initial_simplex": np.asarray(best_z) + np.array([[0, 0], [0.3, 0], [0, 0.3]])})
    z = res.x
    value = -res.fun
    if method == "exact_reml":
        # The surface can be very flat along one direction, where function
        # values cannot resolve the maximiser; finish on the score equation.
        z, value = _polish(obj, lambda w: restricted_score(math.exp(w[0]), math.exp(w[1]), model, icar), z, value)
        grad = restricted_score(math.exp(z[0]), math.exp(z[1]), model, icar)
    else:
        grad = _log_gradient(obj, z)
    return OracleEstimates(
        tau_y_hat=math.exp(z[0]),
        tau_u_hat=math.exp(z[1]),
        objective_value=float(value),
        method=method,
        evaluations=evals,
        gradient_norm=float(np.linalg.norm(grad)),
        boundary=bool(np.any(np.abs(z - start) > half_width - 0.5)),
    )


def _polish(obj, score, z, value):
    try:
        sol = root(score, z, method="hybr", options={"xtol": 1e-13})
    except (NotPositiveDefiniteOnE, OverflowError, InvalidConfig):
        return z, value
    if not (sol.success and np.all(np.isfinite(sol.x))):
        return z, value
    v = obj(sol.x)
    # keep the root only if it is (numerically) no worse than the simplex point
    if v >= value - 1e-9 * (1.0 + abs(value)):
        return sol.x, v
    return z, value


def _log_gradient(obj, z, h=1e-5):
    g = np.zeros(2)
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        g[i] = (obj(z + e) - obj(z - e)) / (2 * h)
    return g
