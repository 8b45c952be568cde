"""Command-line interface: ``vreml fit | simulate | ingest | verify``.

Exit codes: 0 success, 1 a verify property failed, 2 bad input or
configuration, 3 the fit did not converge (outputs are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

from . import __version__, io, oracle
from .errors import ConvergenceWarning, DisconnectedGrid, InputError, NotConverged, VremlError
from .graph import build_icar
from .ingest import COVARIATE_NAMES, bin_cells
from .model import fitted_values, recover_beta
from .problem import reduce_problem
from .simulate import SimConfig, run_study, write_result
from .variational import SABOTAGE, FitConfig, fit, update_posterior
from .verify import format_table, run_checks

EXIT_OK, EXIT_PROPERTY, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2, 3
OUT_ENV = "VREML_OUT"
SCHEMA_VERSION = 1

log = logging.getLogger("vreml")

FIT_EPILOG = """\
input files
  --adjacency  .mtx (Matrix Market coordinate, symmetric 0/1, no diagonal)
               or .csv edge list with header "i,j" (0-based node indices;
               optional first line "# n=<nodes>" for trailing isolated nodes)
  --design     CSV, header row of p column names, n numeric rows in node order
  --response   CSV with a column "y", n rows in node order

outputs (in --out, default $VREML_OUT or ./vreml_out)
  fit.json       schema_version, method, n, p, columns, tau_y, tau_u,
                 sigma_sq_eps, sigma_sq_u, beta{column: value}, elbo,
                 convergence{converged, iterations, tol, max_sweeps,
                 last_change}, fixed_point_residuals{mu, sigma, tau_y, tau_u},
                 elbo_trace[], oracle{...} (exact methods only)
  effects.csv    node, mu, fitted
  manifest.json  command, argv, config, inputs{path: sha256}, version, seed,
                 wall_time_seconds
"""

SIM_EPILOG = """\
outputs (in --out)
  raw.csv        one row per replication x method: replication, method,
                 status, tau_y, tau_u, sigma_sq_eps_hat, sigma_sq_u_hat, mspe,
                 mae, u_mspe, u_mspe_zero, sq_err_sigma_u_sq,
                 sq_err_sigma_eps_sq, iterations, converged, error
  aggregate.csv  one row per method: method, n0, n, n_ok, n_failed, mean_mspe,
                 mean_mae, mean_u_mspe, mean_u_mspe_zero, rmse_sigma_u_sq,
                 rmse_sigma_eps_sq
  manifest.json
Bytes of raw.csv and aggregate.csv do not depend on --threads.
"""

INGEST_EPILOG = """\
input
  --cells  CSV with columns x, y, count, library_size (one row per point)

outputs (in --out)
  response.csv   column y: standardized log1p of the mean count per grid cell
  design.csv     intercept, log1p_mean_library, log1p_cell_count, center_x,
                 center_y (centres standardized)
  adjacency.mtx  grid adjacency among non-empty cells
  grid.csv       node, grid_row, grid_col, center_x, center_y, cell_count,
                 mean_count, mean_library
  summary.json   cells M, grid shape, cell size, dropped rows, connectivity
  manifest.json
The three model files feed straight into "vreml fit".
"""

class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass

def _method(value: str) -> str:
    m = value.replace("-", "_")
    if m not in ("vreml",) + oracle.METHODS:
        raise argparse.ArgumentTypeError(f"unknown method {value!r} (choose vreml, exact-reml, exact-mle)")
    return m

def _grid(value: str):
    try:
        parts = [int(v) for v in value.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be INT or INTxINT, got {value!r}") from None
    if len(parts) == 1:
        return parts[0]
    if len(parts) == 2:
        return tuple(parts)
    raise argparse.ArgumentTypeError(f"grid must be INT or INTxINT, got {value!r}")

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vreml", description="Variational REML for Gaussian ICAR spatial models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    default_out = os.environ.get(OUT_ENV, "vreml_out")

    p = sub.add_parser("fit", help="fit one data set", epilog=FIT_EPILOG, formatter_class=_Formatter)
    p.add_argument("--adjacency", required=True, help="adjacency matrix (.mtx) or edge list (.csv)")
    p.add_argument("--design", required=True, help="design matrix CSV")
    p.add_argument("--response", required=True, help="response CSV with column y")
    p.add_argument("--method", type=_method, default="vreml", help="vreml | exact-reml | exact-mle")
    p.add_argument("--tol", type=float, default=1e-8, help="stop when the absolute ELBO change is below this")
    p.add_argument("--max-sweeps", type=int, default=500, help="maximum coordinate-ascent sweeps")
    p.add_argument("--init-tau-y", type=float, default=None, help="starting tau_y (default: method of moments)")
    p.add_argument("--init-tau-u", type=float, default=None, help="starting tau_u (default: = tau_y start)")
    p.add_argument("--accelerate", action="store_true", help="safeguarded Newton acceleration of the precision updates")
    p.add_argument("--out", default=default_out, help=f"output directory (env {OUT_ENV})")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("simulate", help="lattice simulation study", epilog=SIM_EPILOG, formatter_class=_Formatter)
    p.add_argument("--n0", type=int, required=True, help="lattice side; n = n0^2 units")
    p.add_argument("--nsim", type=int, default=200, help="number of replications")
    p.add_argument("--seed", type=int, default=42, help="master seed")
    p.add_argument("--methods", default="vreml",
                   help="comma-separated subset of vreml, exact-reml, exact-mle")
    p.add_argument("--beta", default="1.0,1.2,-1.0", help="true coefficients (intercept,row,col)")
    p.add_argument("--sigma-eps-sq", type=float, default=0.7, help="true noise variance")
    p.add_argument("--sigma-u-sq", type=float, default=1.3, help="true spatial variance")
    p.add_argument("--scheme", choices=("rook", "queen"), default="rook", help="lattice adjacency")
    p.add_argument("--tol", type=float, default=1e-8, help="VREML ELBO tolerance")
    p.add_argument("--max-sweeps", type=int, default=500, help="VREML sweep cap")
    p.add_argument("--accelerate", action="store_true", help="accelerate VREML fits")
    p.add_argument("--threads", type=int, default=1, help="worker threads for replications")
    p.add_argument("--out", default=default_out, help=f"output directory (env {OUT_ENV})")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("ingest", help="bin point data onto a grid", epilog=INGEST_EPILOG, formatter_class=_Formatter)
    p.add_argument("--cells", required=True, help="point table CSV")
    size = p.add_mutually_exclusive_group(required=True)
    size.add_argument("--grid", type=_grid, help="cells per side, INT or NXxNY")
    size.add_argument("--cell-width", type=float, help="absolute grid cell width")
    p.add_argument("--scheme", choices=("rook", "queen"), default="rook", help="grid adjacency")
    p.add_argument("--out", default=default_out, help=f"output directory (env {OUT_ENV})")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("verify", help="randomized invariant checks", formatter_class=_Formatter)
    p.add_argument("--n", type=int, default=36, help="units per random instance")
    p.add_argument("--trials", type=int, default=25, help="number of random instances")
    p.add_argument("--seed", type=int, default=0, help="seed for the instance generator")
    p.add_argument("--sabotage", choices=[k for k in SABOTAGE if k], default=None,
                   help="run a deliberately altered algorithm to exercise the checks")
    p.set_defaults(handler=cmd_verify)
    return parser

def _diagnostic(exc: Exception) -> str:
    tag = getattr(exc, "assumption", None)
    prefix = f"assumption {tag} violated: " if tag else ""
    return f"vreml: error: {prefix}{exc}"

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")

def _manifest(out: Path, command: str, argv, config: dict, inputs, seed, started: float) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": {str(p): io.sha256(p) for p in inputs},
        "version": __version__,
        "seed": seed,
        "wall_time_seconds": time.perf_counter() - started,
    })

def _require_files(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise FileNotFoundError(p)

def cmd_fit(args, argv=()) -> int:
    started = time.perf_counter()
    _require_files(args.adjacency, args.design, args.response)
    graph = io.read_adjacency(args.adjacency)
    model = io.read_model(args.response, args.design)
    icar = build_icar(graph)
    if not model.has_intercept():
        print("vreml: warning: design has no intercept column; the overall level rests on X alone",
              file=sys.stderr)
    config = FitConfig(tol=args.tol, max_sweeps=args.max_sweeps, init_tau_y=args.init_tau_y,
                       init_tau_u=args.init_tau_u, accelerate=args.accelerate)
    result = {"schema_version": SCHEMA_VERSION, "method": args.method.replace("_", "-"),
              "n": model.n, "p": model.p, "columns": list(model.columns)}
    if args.method == "vreml":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            rep = fit(model, icar, config)
        mu, ty, tu, beta = rep.state.mu, rep.tau_y, rep.tau_u, rep.beta_hat
        trace = rep.elbo_trace
        converged = rep.converged
        result.update(tau_y=ty, tau_u=tu, sigma_sq_eps=1 / ty, sigma_sq_u=1 / tu,
                      beta=dict(zip(model.columns, map(float, beta))), elbo=trace[-1],
                      convergence={"converged": converged, "iterations": rep.sweeps, "tol": config.tol,
                                   "max_sweeps": config.max_sweeps,
                                   "last_change": abs(trace[-1] - trace[-2]) if len(trace) > 1 else None},
                      fixed_point_residuals=rep.fixed_point_residuals, elbo_trace=list(trace))
    else:
        est = oracle.maximize(args.method, model, icar)
        ty, tu = est.tau_y_hat, est.tau_u_hat
        mu, _ = update_posterior(reduce_problem(model, icar), ty, tu)
        beta = recover_beta(model, mu)
        converged = True
        result.update(tau_y=ty, tau_u=tu, sigma_sq_eps=1 / ty, sigma_sq_u=1 / tu,
                      beta=dict(zip(model.columns, map(float, beta))),
                      convergence={"converged": True, "iterations": est.evaluations},
                      oracle={"objective_value": est.objective_value, "gradient_norm": est.gradient_norm,
                              "boundary": est.boundary})
        if est.boundary:
            print("vreml: warning: maximiser is at the edge of the search region "
                  "(a variance component is estimated as ~0)", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "fit.json", result)
    io.write_columns(out / "effects.csv", ["node", "mu", "fitted"],
                     [range(model.n), mu, fitted_values(model, beta, mu)])
    cfg = {"method": args.method, "tol": args.tol, "max_sweeps": args.max_sweeps,
           "init_tau_y": args.init_tau_y, "init_tau_u": args.init_tau_u, "accelerate": args.accelerate}
    _manifest(out, "fit", argv, cfg, [args.adjacency, args.design, args.response], None, started)
    if not converged:
        print(f"vreml: not converged after {config.max_sweeps} sweeps; results written to {out}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK

def _floats(text: str, name: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"--{name} must be comma-separated numbers, got {text!r}") from None

def cmd_simulate(args, argv=()) -> int:
    started = time.perf_counter()
    if args.threads < 1:
        raise InputError(f"--threads must be >= 1, got {args.threads}")
    try:
        methods = tuple(_method(m.strip()) for m in args.methods.split(","))
    except argparse.ArgumentTypeError as exc:
        raise InputError(str(exc)) from None
    config = SimConfig(n0=args.n0, n_sim=args.nsim, beta=_floats(args.beta, "beta"),
                       sigma_eps_sq=args.sigma_eps_sq, sigma_u_sq=args.sigma_u_sq, seed=args.seed,
                       methods=methods, scheme=args.scheme,
                       fit=FitConfig(tol=args.tol, max_sweeps=args.max_sweeps, accelerate=args.accelerate))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        result = run_study(config, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_result(result, out / "raw.csv", out / "aggregate.csv")
    cfg = {"n0": config.n0, "n_sim": config.n_sim, "beta": list(config.beta), "sigma_eps_sq": config.sigma_eps_sq,
           "sigma_u_sq": config.sigma_u_sq, "methods": list(methods), "scheme": config.scheme,
           "tol": args.tol, "max_sweeps": args.max_sweeps, "accelerate": args.accelerate,
           "threads": args.threads}
    _manifest(out, "simulate", argv, cfg, [], config.seed, started)
    for m in methods:
        a = result.aggregates[m]
        print(f"{m}: n={a['n']} ok={a['n_ok']} failed={a['n_failed']} "
              f"rmse_sigma_u_sq={a['rmse_sigma_u_sq']:.4g} rmse_sigma_eps_sq={a['rmse_sigma_eps_sq']:.4g}")
    return EXIT_OK

def cmd_ingest(args, argv=()) -> int:
    started = time.perf_counter()
    _require_files(args.cells)
    cells = io.read_cells(args.cells)
    try:
        ds = bin_cells(cells, grid=args.grid, cell_width=args.cell_width, scheme=args.scheme)
    except DisconnectedGrid as exc:
        raise DisconnectedGrid(f"{exc}; increase --cell-width (or use a coarser --grid) so occupied cells touch",
                               exc.component_sizes) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_columns(out / "response.csv", ["y"], [ds.z])
    io.write_columns(out / "design.csv", list(COVARIATE_NAMES), list(ds.covariates.T))
    io.write_adjacency(out / "adjacency.mtx", ds.graph)
    io.write_columns(out / "grid.csv",
                     ["node", "grid_row", "grid_col", "center_x", "center_y", "cell_count", "mean_count",
                      "mean_library"],
                     [range(ds.num_cells), ds.grid_row, ds.grid_col, ds.center_x, ds.center_y, ds.cell_count,
                      ds.mean_count, ds.mean_library])
    summary = {"cells": ds.num_cells, "points": len(cells), "dropped_rows": ds.dropped_rows,
               "grid_shape": list(ds.grid_shape), "cell_size": list(ds.cell_size),
               "connected": ds.connected, "component_sizes": list(ds.component_sizes)}
    _write_json(out / "summary.json", summary)
    cfg = {"grid": args.grid, "cell_width": args.cell_width, "scheme": args.scheme}
    _manifest(out, "ingest", argv, cfg, [args.cells], None, started)
    print(f"M={ds.num_cells} non-empty cells on a {ds.grid_shape[0]}x{ds.grid_shape[1]} grid; "
          f"dropped rows={ds.dropped_rows}; connected={ds.connected}")
    return EXIT_OK

def cmd_verify(args, argv=()) -> int:
    if args.trials < 1:
        raise InputError(f"--trials must be >= 1, got {args.trials}")
    if args.n < 9:
        raise InputError(f"--n must be >= 9, got {args.n}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        checks = run_checks(n=args.n, trials=args.trials, seed=args.seed, sabotage=args.sabotage)
    print(format_table(checks))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_PROPERTY

def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2 already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args, argv)
    except FileNotFoundError as exc:
        print(f"vreml: error: input file not found: {exc.filename or exc.args[0]}", file=sys.stderr)
        return EXIT_INPUT
    except NotConverged as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except InputError as exc:
        print(_diagnostic(exc), file=sys.stderr)
        return EXIT_INPUT
    except VremlError as exc:
        # numerical failures on otherwise well-formed input (A-3, degenerate fits)
        print(_diagnostic(exc), file=sys.stderr)
        return EXIT_INPUT

if __name__ == "__main__":
    sys.exit(main())
