"""Lattice simulation study: data generation, replication loop, metrics.

Random streams are Philox generators keyed by ``(seed, replication, purpose)``,
so any replication can be regenerated on its own and serial and threaded runs
agree bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from . import oracle
from .errors import InvalidConfig, VremlError
from .graph import IcarStructure, build_icar, lattice_graph
from .ingest import CellTable
from .model import ModelData, fitted_values, load_model, recover_beta
from .subspace import make_basis
from .problem import reduce_problem
from .variational import FitConfig, fit, update_posterior

log = logging.getLogger(__name__)

METHODS = ("vreml", "exact_reml", "exact_mle")
STREAM_THETA = 0
STREAM_NOISE = 1

RAW_FIELDS = ("replication", "method", "status", "tau_y", "tau_u", "sigma_sq_eps_hat", "sigma_sq_u_hat",
              "mspe", "mae", "u_mspe", "u_mspe_zero", "sq_err_sigma_u_sq", "sq_err_sigma_eps_sq",
              "iterations", "converged", "error")
AGG_FIELDS = ("method", "n0", "n", "n_ok", "n_failed", "mean_mspe", "mean_mae", "mean_u_mspe",
              "mean_u_mspe_zero", "rmse_sigma_u_sq", "rmse_sigma_eps_sq")


@dataclass(frozen=True)
class SimConfig:
    n0: int
    n_sim: int = 200
    beta: tuple[float, ...] = (1.0, 1.2, -1.0)
    sigma_eps_sq: float = 0.7
    sigma_u_sq: float = 1.3
    seed: int = 42
    methods: tuple[str, ...] = ("vreml",)
    scheme: str = "rook"
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if int(self.n0) < 3:
            raise InvalidConfig(f"n0 must be >= 3, got {self.n0}")
        if int(self.n_sim) < 1:
            raise InvalidConfig(f"n_sim must be >= 1, got {self.n_sim}")
        if not (self.sigma_eps_sq > 0 and self.sigma_u_sq > 0):
            raise InvalidConfig("variances must be positive")
        if len(self.beta) != 3:
            raise InvalidConfig("beta must have 3 entries (intercept, row, column)")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise InvalidConfig(f"methods must be a non-empty subset of {METHODS}, got {self.methods}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise InvalidConfig("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class SimResult:
    config: SimConfig
    raw: list[dict]
    aggregates: dict[str, dict]


def rng_stream(seed: int, replication: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(replication), purpose])))


def standardize(v: np.ndarray) -> np.ndarray:
    return (v - v.mean()) / v.std(ddof=1)


@dataclass(frozen=True, eq=False)
class _Lattice:
    icar: IcarStructure
    x: np.ndarray
    h: np.ndarray
    chol_k: np.ndarray  # lower Cholesky factor of H'RH


@lru_cache(maxsize=8)
def _lattice(n0: int, scheme: str) -> _Lattice:
    icar = build_icar(lattice_graph(n0, scheme))
    rows, cols = np.divmod(np.arange(n0 * n0), n0)
    x = np.column_stack([np.ones(n0 * n0), standardize(rows.astype(float)), standardize(cols.astype(float))])
    basis = make_basis(n0 * n0)
    k = basis.restrict_operator(icar.laplacian_csr)
    return _Lattice(icar, x, basis.columns, np.linalg.cholesky(k))


def generate(config: SimConfig, replication: int) -> tuple[ModelData, IcarStructure, np.ndarray]:
    """One simulated data set: ``Y = X beta + u + eps`` with ``u = H theta``."""
    lat = _lattice(int(config.n0), config.scheme)
    n = lat.x.shape[0]
    z = rng_stream(config.seed, replication, STREAM_THETA).standard_normal(n - 1)
    # theta ~ N(0, sigma_u^2 K^{-1}) via theta = sigma_u L^{-T} z
    theta = math.sqrt(config.sigma_u_sq) * sla.solve_triangular(lat.chol_k, z, lower=True, trans="T")
    u = lat.h @ theta
    eps = math.sqrt(config.sigma_eps_sq) * rng_stream(config.seed, replication, STREAM_NOISE).standard_normal(n)
    y = lat.x @ np.asarray(config.beta, dtype=float) + u + eps
    return load_model(y, lat.x, ("intercept", "row", "col")), lat.icar, u


def _fit_method(method: str, model: ModelData, icar: IcarStructure, fit_config: FitConfig):
    if method == "vreml":
        rep = fit(model, icar, fit_config)
        return rep.tau_y, rep.tau_u, rep.state.mu, rep.sweeps, rep.converged
    est = oracle.maximize(method, model, icar)
    mu, _ = update_posterior(reduce_problem(model, icar), est.tau_y_hat, est.tau_u_hat)
    return est.tau_y_hat, est.tau_u_hat, mu, est.evaluations, not est.boundary


def replicate(config: SimConfig, replication: int) -> list[dict]:
    """Rows of the raw table for one replication, one per method."""
    model, icar, u_true = generate(config, replication)
    rows = []
    for method in config.methods:
        row = dict.fromkeys(RAW_FIELDS, "")
        row.update(replication=replication, method=method)
        try:
            ty, tu, mu, iters, conv = _fit_method(method, model, icar, config.fit)
        except VremlError as exc:
            log.warning("replication %d, %s failed: %s", replication, method, exc)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
            continue
        beta = recover_beta(model, mu)
        resid = model.y - fitted_values(model, beta, mu)
        s_eps, s_u = 1.0 / ty, 1.0 / tu
        row.update(
            status="ok", tau_y=ty, tau_u=tu, sigma_sq_eps_hat=s_eps, sigma_sq_u_hat=s_u,
            mspe=float(np.mean(resid ** 2)), mae=float(np.mean(np.abs(resid))),
            u_mspe=float(np.mean((mu - u_true) ** 2)), u_mspe_zero=float(np.mean(u_true ** 2)),
            sq_err_sigma_u_sq=(s_u - config.sigma_u_sq) ** 2,
            sq_err_sigma_eps_sq=(s_eps - config.sigma_eps_sq) ** 2,
            iterations=int(iters), converged=bool(conv),
        )
        rows.append(row)
    return rows


def aggregate(config: SimConfig, raw: list[dict]) -> dict[str, dict]:
    out = {}
    for method in config.methods:
        rows = [r for r in raw if r["method"] == method]
        ok = [r for r in rows if r["status"] == "ok"]

        def mean(key):
            return float(np.mean([r[key] for r in ok])) if ok else float("nan")

        out[method] = {
            "method": method, "n0": int(config.n0), "n": int(config.n0) ** 2,
            "n_ok": len(ok), "n_failed": len(rows) - len(ok),
            "mean_mspe": mean("mspe"), "mean_mae": mean("mae"), "mean_u_mspe": mean("u_mspe"),
            "mean_u_mspe_zero": mean("u_mspe_zero"),
            "rmse_sigma_u_sq": math.sqrt(mean("sq_err_sigma_u_sq")),
            "rmse_sigma_eps_sq": math.sqrt(mean("sq_err_sigma_eps_sq")),
        }
    return out


def run_study(config: SimConfig, threads: int = 1) -> SimResult:
    reps = range(int(config.n_sim))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(lambda k: replicate(config, k), reps))
    else:
        chunks = [replicate(config, k) for k in reps]
    raw = [row for chunk in chunks for row in chunk]
    failed = sum(r["status"] != "ok" for r in raw)
    if failed:
        log.info("%d of %d fits failed and are excluded from the aggregates", failed, len(raw))
    return SimResult(config, raw, aggregate(config, raw))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[f]) for f in fields])


def write_result(result: SimResult, raw_path, agg_path) -> None:
    write_csv(raw_path, RAW_FIELDS, result.raw)
    write_csv(agg_path, AGG_FIELDS, [result.aggregates[m] for m in result.config.methods])


def synthetic_cells(n_points: int, n0: int = 10, seed: int = 0, sigma_u_sq: float = 1.3,
                    sigma_eps_sq: float = 0.3, scheme: str = "rook"):
    """Point table drawn from the generative model, for exercising ingestion.

    Points are uniform on ``[0, n0)^2``; a point in lattice cell ``k`` has
    library size ``L ~ lognormal(log 500, 0.3)`` and count
    ``Y ~ Poisson(L/500 * exp(1 + u_k + e_k))`` with ``u`` an ICAR field on the
    ``n0 x n0`` lattice and ``e_k ~ N(0, sigma_eps_sq)`` cell-level noise
    (without it the Poisson noise averages out within a cell and the areal
    residual variance is close to zero). Returns ``(CellTable, u)``.
    """
    lat = _lattice(int(n0), scheme)
    rng = rng_stream(seed, 0, STREAM_THETA)
    z = rng.standard_normal(n0 * n0 - 1)
    u = lat.h @ (math.sqrt(sigma_u_sq) * sla.solve_triangular(lat.chol_k, z, lower=True, trans="T"))
    rng = rng_stream(seed, 0, STREAM_NOISE)
    e = math.sqrt(sigma_eps_sq) * rng.standard_normal(n0 * n0)
    xy = rng.uniform(0.0, n0, size=(int(n_points), 2))
    cell = np.minimum(xy[:, 1].astype(np.int64), n0 - 1) * n0 + np.minimum(xy[:, 0].astype(np.int64), n0 - 1)
    lib = rng.lognormal(math.log(500.0), 0.3, int(n_points))
    count = rng.poisson(lib / 500.0 * np.exp(1.0 + u[cell] + e[cell]))
    return CellTable.from_arrays(xy[:, 0], xy[:, 1], count, lib), u
