"""Randomized invariant suite behind ``vreml verify``.

Each check tracks the worst observed deviation against a fixed tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from . import oracle
from .graph import IcarStructure, build_icar, grid_graph
from .model import ModelData, load_model
from .problem import reduce_problem
from .errors import VremlError
from .simulate import standardize
from .subspace import ConstrainedOperator, make_basis
from .variational import FitConfig, VariationalState, elbo, elbo_gradients, fit, update_posterior


@dataclass
class Check:
    name: str
    tolerance: float
    worst: float = 0.0
    count: int = 0

    def record(self, deviation: float) -> None:
        self.count += 1
        if not (deviation <= self.worst):  # also catches nan
            self.worst = deviation

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def random_instance(rng: np.random.Generator, n: int, interior: bool = True,
                    max_tries: int = 100) -> tuple[ModelData, IcarStructure]:
    """Simulated ICAR data on the first ``n`` cells (row-major) of a near-square grid.

    With ``interior`` the draw is repeated until the exact REML maximiser is
    finite, i.e. neither variance component is estimated as zero.
    """
    rows = max(2, int(math.isqrt(n)))
    cols = math.ceil(n / rows)
    mask = (np.arange(rows * cols) < n).reshape(rows, cols)
    graph, cells = grid_graph(rows, cols, "rook", mask)
    icar = build_icar(graph)
    r, c = np.divmod(cells, cols)
    x = np.column_stack([np.ones(n), standardize(r.astype(float)), standardize(c.astype(float))])
    basis = make_basis(n)
    chol_k = np.linalg.cholesky(basis.restrict_operator(icar.laplacian_csr))
    for _ in range(max_tries):
        s_u = math.exp(rng.uniform(math.log(0.5), math.log(3.0)))
        s_e = math.exp(rng.uniform(math.log(0.2), math.log(1.5)))
        beta = rng.normal(0.0, 1.0, 3)
        theta = math.sqrt(s_u) * sla.solve_triangular(chol_k, rng.standard_normal(n - 1), lower=True, trans="T")
        y = x @ beta + basis.lift(theta) + math.sqrt(s_e) * rng.standard_normal(n)
        model = load_model(y, x, ("intercept", "row", "col"))
        if not interior or not oracle.maximize("exact_reml", model, icar).boundary:
            return model, icar
    raise RuntimeError(f"no interior instance in {max_tries} draws")


def random_state(rng: np.random.Generator, model: ModelData, icar: IcarStructure) -> VariationalState:
    """A valid but generally non-optimal variational state."""
    pr = reduce_problem(model, icar)
    ty, tu = np.exp(rng.uniform(math.log(0.1), math.log(10.0), 2))
    w = rng.standard_normal((pr.n - 1, 3))
    a_e = pr.precision(ty * rng.uniform(0.5, 2), tu * rng.uniform(0.5, 2)) + w @ w.T
    mu = pr.basis.lift(rng.standard_normal(pr.n - 1))
    return VariationalState(mu, ConstrainedOperator(a_e, pr.basis), float(ty), float(tu))


# Plain coordinate ascent can crawl along a flat ridge of the ELBO, where a
# small ELBO change says little about the distance to the optimum; the
# precision-level checks therefore use accelerated fits.
ACCEL_TOL = 1e-12
ACCEL_SWEEPS = 2000
PLAIN_SWEEPS = 3000


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def run_checks(n: int = 36, trials: int = 25, seed: int = 0, sabotage: str | None = None) -> list[Check]:
    checks = {
        "monotone": Check("ELBO nondecreasing per sweep and per block (scaled drop)", 1e-9),
        "jensen": Check("Jensen: ELBO - restricted loglik at every evaluated state", 1e-8),
        "exact": Check("ELBO at exact posterior = restricted loglik (scaled)", 1e-8),
        "posterior": Check("(Sigma, mu) update = exact posterior (norm)", 1e-8),
        "stationary": Check("fixed-point residuals at convergence (scaled)", 1e-6),
        "oracle": Check("VREML precisions vs exact REML maximiser (relative)", 1e-4),
        "grad": Check("analytic vs finite-difference gradients (relative)", 1e-4),
    }
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        model, icar = random_instance(rng, n)
        pr = reduce_problem(model, icar)

        try:
            plain = fit(model, icar, FitConfig(tol=1e-12, max_sweeps=PLAIN_SWEEPS, record_blocks=True,
                                               sabotage=sabotage))
            fast = fit(model, icar, FitConfig(tol=ACCEL_TOL, max_sweeps=ACCEL_SWEEPS, accelerate=True,
                                              sabotage=sabotage))
        except VremlError:
            # a fit that blows up (e.g. a precision diverging) is a failed trial
            for key in ("monotone", "stationary", "oracle"):
                checks[key].record(math.inf)
            plain = fast = None
        if fast is not None:
            for seq in (plain.elbo_trace, plain.block_trace, fast.elbo_trace):
                for a, b in zip(seq[:-1], seq[1:]):
                    checks["monotone"].record(max(0.0, (a - b) / (1.0 + abs(a))))
            for rep in (plain, fast):
                for value, (ty, tu) in zip(rep.elbo_trace, rep.tau_trace):
                    checks["jensen"].record(value - oracle.restricted_loglik(ty, tu, model, icar))
            res = fast.fixed_point_residuals
            checks["stationary"].record(max(res.values()) if fast.converged else math.inf)
            est = oracle.maximize("exact_reml", model, icar)
            checks["oracle"].record(max(_rel(fast.tau_y, est.tau_y_hat), _rel(fast.tau_u, est.tau_u_hat)))

        ty, tu = np.exp(rng.uniform(math.log(0.1), math.log(10.0), 2))
        mu, op = update_posterior(pr, ty, tu)
        ll = oracle.restricted_loglik(ty, tu, model, icar)
        val = elbo(VariationalState(mu, op, ty, tu), model, icar)
        checks["exact"].record(abs(val - ll) / (1.0 + abs(ll)))
        checks["jensen"].record(val - ll)
        mu_star, sigma_star = oracle.exact_posterior(ty, tu, model, icar)
        checks["posterior"].record(max(np.linalg.norm(mu - mu_star), np.linalg.norm(op.dense() - sigma_star)))

        state = random_state(rng, model, icar)
        checks["jensen"].record(elbo(state, model, icar) - oracle.restricted_loglik(state.tau_y, state.tau_u, model, icar))
        for dev in gradient_deviations(state, model, icar, rng):
            checks["grad"].record(dev)
    return list(checks.values())


def gradient_deviations(state: VariationalState, model: ModelData, icar: IcarStructure,
                        rng: np.random.Generator, directions: int = 5) -> list[float]:
    """Relative gaps between analytic and central-difference ELBO derivatives."""
    g = elbo_gradients(state, model, icar)
    pr = reduce_problem(model, icar)

    def at(**kw):
        s = VariationalState(kw.get("mu", state.mu), state.sigma, kw.get("tau_y", state.tau_y),
                             kw.get("tau_u", state.tau_u))
        return elbo(s, model, icar)

    out = []
    h = 1e-6 * state.tau_y
    out.append(_rel((at(tau_y=state.tau_y + h) - at(tau_y=state.tau_y - h)) / (2 * h), g.d_tau_y))
    h = 1e-6 * state.tau_u
    out.append(_rel((at(tau_u=state.tau_u + h) - at(tau_u=state.tau_u - h)) / (2 * h), g.d_tau_u))
    for _ in range(directions):
        d = pr.basis.lift(rng.standard_normal(pr.n - 1))
        d /= np.linalg.norm(d)
        h = 1e-5 * max(1.0, float(np.linalg.norm(state.mu)))
        fd = (at(mu=state.mu + h * d) - at(mu=state.mu - h * d)) / (2 * h)
        out.append(_rel(fd, float(g.d_mu @ d)))
    return out


def format_table(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'property':<{width}}  {'tolerance':>9}  {'worst':>10}  result"]
    for c in checks:
        lines.append(f"{c.name:<{width}}  {c.tolerance:>9.0e}  {c.worst:>10.3e}  {'PASS' if c.passed else 'FAIL'}")
    return "\n".join(lines)
