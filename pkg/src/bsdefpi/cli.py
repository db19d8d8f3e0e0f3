"""Command line: bound | solve | verify | pde-check | study.

Exit codes: 0 success, 1 numerical or guard failure, 2 configuration / IO failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, scalar_terminal
from .lattice import AdaptedProcess, CapacityError, MartingaleProcess
from .oracles import OracleError, discrete_linear_oracle, heat_kernel_expectation
from .solver import (
    HorizonError,
    Solution,
    SolveReport,
    SolverError,
    global_solve,
    local_solve,
    step_bound_readings,
    verify_solution,
)
from .studies import (
    empirical_order,
    linear_refinement,
    pde_crosscheck,
    pde_refinement,
    write_study_csv,
    zero_refinement,
)

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2


class _Out:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, *args):
        if not self.quiet:
            print(*args)


def _thread_limit():
    n = os.environ.get("BSDE_FPI_THREADS")
    if not n:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=max(1, int(n)))


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    cfg = RunConfig.load(args.config)
    if getattr(args, "override_horizon", False):
        cfg.solver.override_horizon = True
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    d = Path(args.out) if args.out else cfg.base_dir / cfg.outputs.directory
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {d}: {exc}") from None
    return d


# --- bound ------------------------------------------------------------------


def cmd_bound(args, out) -> int:
    cfg = _load(args)
    p = cfg.problem
    L = cfg.build_L()
    drv = cfg.build_driver()
    mprime = p.mprime if p.mprime is not None else p.d_prime
    r = step_bound_readings(L.C1, drv.C2, p.d, p.d_prime, mprime)
    out(f"C1={L.C1:g} C2={drv.C2:g} d={p.d} d'={p.d_prime} m'={mprime}")
    out(f"bound (d, m'):   {r.driver_dims:.4e}")
    out(f"bound (d', d'):  {r.solution_dims:.4e}")
    out(f"step bound used: {r.conservative:.4e}")
    return EXIT_OK


# --- solve ------------------------------------------------------------------


def _solve(cfg: RunConfig):
    sp = cfg.lattice()
    xi = cfg.terminal(sp)
    L = cfg.build_L()
    drv = cfg.build_driver()
    s = cfg.solver
    mode = s.mode
    if mode == "auto":
        mode = "global" if (L.local_in_time and L.differential) else "local"
    if mode == "global":
        sol = global_solve(xi, drv, L, tol=s.tol, safety=s.safety, max_iter=s.max_iter, mprime=cfg.problem.mprime)
    else:
        try:
            sol = local_solve(
                xi, drv, L, tol=s.tol, max_iter=s.max_iter, override=s.override_horizon, mprime=cfg.problem.mprime
            )
        except HorizonError as exc:
            lacks = [] if L.local_in_time else ["local-in-time"]
            lacks += [] if L.differential else ["differential"]
            why = f" it lacks the {' and '.join(lacks)} property, so" if lacks else ""
            raise HorizonError(
                f"L '{L.name}' admits only local solutions:{why} the horizon must stay within "
                f"the step bound. {exc}"
            ) from None
    return sp, xi, L, drv, sol


def write_solution_csv(sol: Solution, path: Path) -> None:
    Y, M, V = sol.Y, sol.M, sol.V
    dp = Y.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["level", "node_index"]
            + [f"Y_{j + 1}" for j in range(dp)]
            + [f"M_{j + 1}" for j in range(dp)]
            + [f"V_{j + 1}" for j in range(dp)]
        )
        for k in Y.levels():
            block = np.hstack([Y.at(k), M.at(k), V.at(k)])
            for n, row in enumerate(block):
                w.writerow([k, n, *map(repr, row.tolist())])


def write_aggregates_csv(sol: Solution, path: Path) -> None:
    Y, M, V = sol.Y, sol.M, sol.V
    dp = Y.dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["level", "n_nodes"]
            + [f"Y_mean_{j + 1}" for j in range(dp)]
            + [f"M_mean_{j + 1}" for j in range(dp)]
            + [f"V_mean_{j + 1}" for j in range(dp)]
        )
        for k in Y.levels():
            means = np.concatenate([Y.at(k).mean(0), M.at(k).mean(0), V.at(k).mean(0)])
            w.writerow([k, Y.at(k).shape[0], *map(repr, means.tolist())])


def read_solution_csv(path: Path, space, d_prime: int) -> Solution:
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read solution file {path}: {exc}") from None
    if data.shape[1] != 2 + 3 * d_prime:
        raise ConfigError(f"solution file has {data.shape[1]} columns, expected {2 + 3 * d_prime}")
    levels = data[:, 0].astype(int)
    start, end = int(levels.min()), int(levels.max())
    if end != space.K:
        raise ConfigError(f"solution ends at level {end}, lattice has K={space.K}")
    Y, M, V = [], [], []
    for k in range(start, end + 1):
        rows = data[levels == k]
        if rows.shape[0] != space.n_nodes(k) or np.any(rows[:, 1] != np.arange(space.n_nodes(k))):
            raise ConfigError(f"solution file: level {k} is incomplete or out of order")
        Y.append(rows[:, 2 : 2 + d_prime])
        M.append(rows[:, 2 + d_prime : 2 + 2 * d_prime])
        V.append(rows[:, 2 + 2 * d_prime :])
    return Solution(
        AdaptedProcess(space, start, Y),
        MartingaleProcess(space, start, M),
        AdaptedProcess(space, start, V),
        SolveReport(partition=[], partition_levels=[]),
    )


def cmd_solve(args, out) -> int:
    cfg = _load(args)
    outdir = _out_dir(args, cfg)
    with _thread_limit():
        sp, xi, L, drv, sol = _solve(cfg)
        ver = verify_solution(sol, xi, drv, L, tol=cfg.solver.tol)
    lines = [sol.report.summary(), ver.summary()]
    p = cfg.problem
    if cfg.solver.oracle_check:
        if p.driver.get("kind") != "linear_y" or p.driver.get("diffusion", {"kind": "zero"}).get("kind", "zero") != "zero" or p.d_prime != 1:
            raise ConfigError("oracle_check needs a scalar linear_y driver without diffusion")
        ref = discrete_linear_oracle(xi, float(p.driver["a"]))
        dev = sol.Y.max_abs_diff(ref.restrict(sol.Y.start, sol.Y.end))
        lines.append(f"oracle_max_deviation: {dev:.3e} (limit {2 * cfg.solver.tol:.1e})")
    text = "\n".join(lines) + "\n"
    (outdir / "report.txt").write_text(text, encoding="utf-8")
    if cfg.outputs.aggregate_only:
        write_aggregates_csv(sol, outdir / "level_aggregates.csv")
    elif cfg.outputs.solution_csv:
        write_solution_csv(sol, outdir / "solution.csv")
    if cfg.outputs.convergence_csv:
        sol.report.write_history_csv(outdir / "convergence.csv")
    out(text.rstrip())
    return EXIT_OK


def cmd_verify(args, out) -> int:
    cfg = _load(args)
    path = Path(args.solution) if args.solution else _out_dir(args, cfg) / "solution.csv"
    sp = cfg.lattice()
    xi = cfg.terminal(sp)
    L = cfg.build_L()
    drv = cfg.build_driver()
    sol = read_solution_csv(path, sp, cfg.problem.d_prime)
    ver = verify_solution(sol, xi, drv, L, tol=cfg.solver.tol)
    out(ver.summary())
    return EXIT_OK if ver.passed else EXIT_NUMERIC


# --- pde-check / study ----------------------------------------------------------


def _pde_phi(cfg: RunConfig):
    p = cfg.problem
    if p.d != 1 or p.d_prime != 1:
        raise ConfigError("pde-check needs d = d' = 1")
    if p.L.get("name") != "quadratic":
        raise ConfigError("pde-check compares against the quadratic-variation functional (L name 'quadratic')")
    return scalar_terminal(p.terminal)


def cmd_pde_check(args, out) -> int:
    cfg = _load(args)
    outdir = _out_dir(args, cfg)
    phi = _pde_phi(cfg)
    L = cfg.build_L()
    p, pc = cfg.problem, cfg.pde
    with _thread_limit():
        res = pde_crosscheck(
            phi, pc.lam, p.T, p.K, pc.dx, [tuple(x) for x in pc.probes], X=pc.X, C1=L.C1, tol=cfg.solver.tol,
            max_iter=cfg.solver.max_iter,
        )
    res.values.write_csv(outdir / "comparison.csv")
    cv = res.values
    summary = (
        f"probes: {len(cv.rows)}\nmax_abs_discrepancy: {cv.max_abs:.4e}\n"
        f"mean_abs_discrepancy: {cv.mean_abs:.4e}\nmax_rel_discrepancy: {cv.max_rel:.4e}\n"
        f"threshold: {pc.threshold:.4e}\nK_vs_Lc_max_abs: {res.k_functional.max_abs:.4e}\n"
        f"pde_clipped_radicands: {res.pde.clipped}\nruntime_s: {res.runtime:.2f}\n"
    )
    (outdir / "pde_check.txt").write_text(summary, encoding="utf-8")
    out(summary.rstrip())
    return EXIT_OK if cv.max_rel <= pc.threshold else EXIT_NUMERIC


def cmd_study(args, out) -> int:
    cfg = _load(args)
    outdir = _out_dir(args, cfg)
    p, st = cfg.problem, cfg.study
    phi = scalar_terminal(p.terminal)
    Ks = [int(k) for k in st.K_values]
    with _thread_limit():
        if st.kind == "linear":
            if p.driver.get("kind") != "linear_y":
                raise ConfigError("a linear study needs driver kind 'linear_y'")
            a = float(p.driver["a"])
            exact = math.exp(a * (p.T - p.tau)) * heat_kernel_expectation(lambda x: float(phi(x)[0]), 0.0, 0.0, p.T - p.tau)
            rows = linear_refinement(a, p.T - p.tau, phi, exact, Ks, tol=cfg.solver.tol, safety=cfg.solver.safety,
                                     max_nodes=cfg.solver.max_nodes)
        elif st.kind == "zero":
            rows = zero_refinement(p.T - p.tau, phi, Ks, tol=cfg.solver.tol)
        else:
            phi = _pde_phi(cfg)
            dxs = st.dx_values or [cfg.pde.dx] * len(Ks)
            if len(dxs) != len(Ks):
                raise ConfigError("study.dx_values must pair with study.K_values")
            rows = pde_refinement(phi, cfg.pde.lam, p.T - p.tau, Ks, dxs, [tuple(x) for x in cfg.pde.probes],
                                  X=cfg.pde.X, C1=cfg.build_L().C1, tol=cfg.solver.tol)
    write_study_csv(rows, outdir / "study.csv")
    for r in rows:
        out(f"K={r.K:4d} dt={r.dt:.4e} Y0={r.Y0:.10g} error={r.error:.3e} [{r.source}]")
    if st.kind == "linear" and len(rows) >= 2 and all(r.error > 0 for r in rows):
        out(f"empirical order: {empirical_order(rows):.3f}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bsde-fpi", description="Functional fixed-point BSDE solver on a lattice")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("bound", "print the contraction step bound"),
        ("solve", "solve the configured problem"),
        ("verify", "check a written solution against the integral equation"),
        ("pde-check", "cross-validate against the nonlocal PDE"),
        ("study", "refinement study across K"),
    ]:
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--out", metavar="DIR")
        sp.add_argument("--override-horizon", action="store_true", help="best-effort local solve beyond the step bound")
        sp.add_argument("--quiet", action="store_true")
        if name == "verify":
            sp.add_argument("--solution", metavar="PATH", help="solution CSV (default: <out>/solution.csv)")
    return ap


COMMANDS = {
    "bound": cmd_bound,
    "solve": cmd_solve,
    "verify": cmd_verify,
    "pde-check": cmd_pde_check,
    "study": cmd_study,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    out = _Out(args.quiet)
    try:
        return COMMANDS[args.command](args, out)
    except (ConfigError, CapacityError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, OracleError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
