"""Fixed-point engine: Picard map on C_0, local solves, and global splicing."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .functionals import (
    DriverSpec,
    LFunctionalSpec,
    audit_properties,
    m_of_v,
    y_of_v,
)
from .lattice import (
    AdaptedProcess,
    LatticeSpace,
    MartingaleProcess,
    TerminalCondition,
    norm_c,
)

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Numerical failure or guarded precondition in a solve."""


class ConvergenceError(SolverError):
    def __init__(self, msg, last_ratio=None, window=None):
        super().__init__(msg)
        self.last_ratio = last_ratio
        self.window = window


class DivergenceError(ConvergenceError):
    pass


class HorizonError(SolverError):
    pass


class PropertyError(SolverError):
    pass


class GridTooCoarseError(SolverError):
    pass


# --- bounds -----------------------------------------------------------------


def step_bound(C1: float, C2: float, d: int, mprime: int) -> float:
    """Horizon below which the Picard map is a 1/2-contraction, clamped at 1."""
    if C1 < 0 or C2 < 0:
        raise ValueError("Lipschitz constants must be non-negative")
    if d < 1 or mprime < 1:
        raise ValueError("dimensions must be >= 1")
    if C2 == 0:
        return 1.0
    den = C2**2 * (4 * C1 + 6 * (1 + 2 * math.sqrt(d)) + 3 * math.sqrt(2) * mprime * C1 * C2) ** 2
    return min(1.0 / den, 1.0)


@dataclass(frozen=True)
class BoundReadings:
    driver_dims: float  # (d, m')
    solution_dims: float  # (d', d')

    @property
    def conservative(self) -> float:
        return min(self.driver_dims, self.solution_dims)


def step_bound_readings(C1: float, C2: float, d: int, d_prime: int, mprime: int | None = None) -> BoundReadings:
    mprime = d_prime if mprime is None else mprime
    return BoundReadings(step_bound(C1, C2, d, mprime), step_bound(C1, C2, d_prime, d_prime))


def contraction_bound(C1: float, C2: float, d: int, mprime: int, delta: float) -> float:
    """Lipschitz constant of the Picard map on a window of width delta."""
    sd = math.sqrt(delta)
    return C2 * (2 * C1 + 6 * math.sqrt(d) + 3 * sd + 3 * delta * mprime * C1 * C2 / math.sqrt(2)) * sd


def a_priori_bound(
    C1: float, C2: float, d: int, mprime: int, tau: float, T: float, xi_l2: float, v_norm: float
) -> float:
    """Upper bound on ||Picard(V)||_C from ||V||_C and sqrt(E|xi|^2).

    The inhomogeneous term uses sqrt(int_tau^T (1+s)^2 ds), which is what the
    growth condition |f| <= C2(1 + t + ...) actually produces.
    """
    delta = T - tau
    sd = math.sqrt(delta)
    const = 2 * C2 * (sd + math.sqrt(d)) * math.sqrt(((1 + T) ** 3 - (1 + tau) ** 3) / 3)
    xi_coef = 2 * (math.sqrt(2) * mprime * C1 * C2**2 * delta + 2 * C2 * sd + 2 * C2 * math.sqrt(d) + 2 * C2 * C1) * sd
    v_coef = (3 * math.sqrt(2) * mprime * C1 * C2**2 * delta + 6 * C2 * sd + 4 * C2 * C1 + 6 * C2 * math.sqrt(d)) * sd
    return const + xi_coef * xi_l2 + v_coef * v_norm


# --- Picard map -------------------------------------------------------------


def _check_dims(xi: TerminalCondition, driver: DriverSpec, L: LFunctionalSpec) -> None:
    sp = xi.space
    if xi.dim != driver.d_prime:
        raise ValueError(f"xi has dimension {xi.dim}, driver expects d'={driver.d_prime}")
    if driver.d != sp.d:
        raise ValueError(f"driver has {driver.d} diffusion coefficients, lattice has d={sp.d}")
    if L.m(driver.d_prime, sp.d) != driver.m:
        raise ValueError(
            f"L '{L.name}' produces dimension {L.m(driver.d_prime, sp.d)}, driver expects m={driver.m}"
        )


def integrate(Y: AdaptedProcess, LM: AdaptedProcess, driver: DriverSpec) -> AdaptedProcess:
    """Left-endpoint sums of f0 dt + sum_i f_i dB^i, started at 0 on Y's first level."""
    sp = Y.space
    dt = sp.dt
    inc = sp.increments
    vals = [np.zeros_like(Y.at(Y.start))]
    for k in range(Y.start, Y.end):
        t = sp.t(k)
        y, z = Y.at(k), LM.at(k)
        drift = vals[-1] + np.asarray(driver.f0(t, y, z), dtype=float) * dt
        F = np.stack([np.asarray(f(t, y), dtype=float) for f in driver.f_list])  # (d, n, d')
        noise = np.einsum("inj,bi->nbj", F, inc)
        vals.append((drift[:, None, :] + noise).reshape(-1, y.shape[1]))
    return AdaptedProcess(sp, Y.start, vals)


def picard_map(
    V: AdaptedProcess, xi: TerminalCondition, driver: DriverSpec, L: LFunctionalSpec
) -> AdaptedProcess:
    """One application of the Picard map on the window [V.start, xi.level].

    V must start at zero (the space C_0).
    """
    _check_dims(xi, driver, L)
    if np.any(V.at(V.start) != 0):
        raise ValueError("V must vanish at the start of the window")
    M = m_of_v(xi, V)
    Y = y_of_v(xi, V)
    LM = L(M)
    if LM.start != V.start or LM.end != V.end:
        raise ValueError(f"L '{L.name}' returned window [{LM.start}, {LM.end}], expected [{V.start}, {V.end}]")
    return integrate(Y, LM, driver)


# --- results ----------------------------------------------------------------


@dataclass
class SolveReport:
    partition: list  # window boundary times, T = T_0 > T_1 > ... > tau
    partition_levels: list
    iterations: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    step_bound: float = float("nan")
    window_width: float = float("nan")
    wall_time: float = 0.0
    override: bool = False

    def history_rows(self):
        for w, (incs, rats) in enumerate(zip(self.increments, self.ratios), start=1):
            for n, inc in enumerate(incs, start=1):
                yield w, n, inc, rats[n - 1]

    def write_history_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["window", "iteration", "increment_norm", "contraction_ratio"])
            for row in self.history_rows():
                w.writerow([row[0], row[1], repr(float(row[2])), repr(float(row[3]))])

    def summary(self) -> str:
        lines = [
            f"windows: {len(self.iterations)}",
            "partition: " + " > ".join(f"{t:.6g}" for t in self.partition),
            f"step_bound: {self.step_bound:.6e}",
            f"window_width: {self.window_width:.6e}",
            "iterations: " + ",".join(str(i) for i in self.iterations),
            "final_residuals: " + ",".join(f"{r:.3e}" for r in self.residuals),
            "max_contraction_ratio: "
            + (f"{max((max(r[1:], default=0.0) for r in self.ratios), default=0.0):.3e}"),
            f"override: {self.override}",
            f"wall_time_s: {self.wall_time:.3f}",
        ]
        return "\n".join(lines)


@dataclass
class Solution:
    Y: AdaptedProcess
    M: MartingaleProcess
    V: AdaptedProcess
    report: SolveReport


# --- solves -----------------------------------------------------------------


def _stall_ratio(prev: float, cur: float) -> float:
    if prev == 0:
        return 0.0 if cur == 0 else math.inf
    return cur / prev


def local_solve(
    xi: TerminalCondition,
    driver: DriverSpec,
    L: LFunctionalSpec,
    start: int = 0,
    tol: float = 1e-10,
    max_iter: int = 200,
    V0: AdaptedProcess | None = None,
    override: bool = False,
    mprime: int | None = None,
    check_bound: bool = True,
) -> Solution:
    """Picard iteration V^{n+1} = Picard(V^n) on [start, xi.level] until the C-norm increment <= tol."""
    t0 = time.perf_counter()
    sp = xi.space
    _check_dims(xi, driver, L)
    end = xi.level
    if not 0 <= start < end:
        raise ValueError(f"window [{start}, {end}] must contain at least one step")
    width = sp.t(end) - sp.t(start)
    bound = step_bound_readings(L.C1, driver.C2, sp.d, driver.d_prime, mprime).conservative
    if check_bound and width > bound * (1 + 1e-12) and not override:
        raise HorizonError(
            f"window width {width:.6g} exceeds the step bound {bound:.6g} for L '{L.name}'; "
            "shorten the horizon or pass override to attempt a best-effort solve"
        )

    if V0 is None:
        V = AdaptedProcess.zeros(sp, start, end, driver.d_prime)
    else:
        vals = [np.array(v, dtype=float) for v in V0.values]
        vals[0][:] = 0.0
        V = AdaptedProcess(sp, start, vals)

    increments, ratios = [], []
    converged = False
    rising = 0
    for n in range(1, max_iter + 1):
        V_new = picard_map(V, xi, driver, L)
        inc = norm_c(V_new - V)
        if not math.isfinite(inc):
            raise DivergenceError(f"non-finite increment at iteration {n}", None)
        ratio = _stall_ratio(increments[-1], inc) if increments else float("nan")
        increments.append(inc)
        ratios.append(ratio)
        V = V_new
        if inc <= tol:
            converged = True
            break
        rising = rising + 1 if (increments and len(increments) > 1 and ratio >= 1) else 0
        if override and rising >= 3:
            raise DivergenceError(
                f"Picard iteration diverging (ratio {ratio:.3g} >= 1 for {rising} iterations)", ratio
            )
    if not converged:
        raise ConvergenceError(
            f"no convergence after {max_iter} iterations (last increment {increments[-1]:.3e}, "
            f"last ratio {ratios[-1]:.3g})",
            ratios[-1],
        )

    M = m_of_v(xi, V)
    Y = y_of_v(xi, V)
    report = SolveReport(
        partition=[sp.t(end), sp.t(start)],
        partition_levels=[end, start],
        iterations=[len(increments)],
        residuals=[increments[-1]],
        ratios=[ratios],
        increments=[increments],
        step_bound=bound,
        window_width=width,
        wall_time=time.perf_counter() - t0,
        override=override and width > bound,
    )
    return Solution(Y=Y, M=M, V=V, report=report)


def partition_levels(space: LatticeSpace, start: int, end: int, max_width: float) -> list:
    """Window boundaries end = k_0 > k_1 > ... > k_n = start, widths <= max_width."""
    steps = int(math.floor(max_width / space.dt * (1 + 1e-12)))
    if steps < 1:
        raise GridTooCoarseError(
            f"step bound {max_width:.3e} is below the grid step {space.dt:.3e}; use a finer grid (larger K)"
        )
    levels = [end]
    while levels[-1] > start:
        levels.append(max(start, levels[-1] - steps))
    return levels


def global_solve(
    xi: TerminalCondition,
    driver: DriverSpec,
    L: LFunctionalSpec,
    tol: float = 1e-10,
    safety: float = 0.9,
    max_iter: int = 200,
    start: int = 0,
    mprime: int | None = None,
    audit: bool = True,
    seeds: list | None = None,
) -> Solution:
    """Solve backward window by window and splice V and M across partition points.

    ``seeds`` optionally gives one Picard starting process per window (top window first).
    """
    t0 = time.perf_counter()
    sp = xi.space
    if not 0 < safety <= 1:
        raise ValueError("safety must lie in (0, 1]")
    if not (L.local_in_time and L.differential):
        raise PropertyError(
            f"L '{L.name}' is not declared local-in-time and differential; "
            "global solutions are unavailable, use local_solve on a short horizon"
        )
    _check_dims(xi, driver, L)
    if audit:
        res = audit_properties(L, sp, driver.d_prime, np.random.default_rng(0), n=2)
        if not res["passed"]:
            raise PropertyError(f"L '{L.name}' failed its property audit: {res}")

    bound = step_bound_readings(L.C1, driver.C2, sp.d, driver.d_prime, mprime).conservative
    bounds = partition_levels(sp, start, xi.level, safety * bound)

    pieces = []
    terminal = xi
    for j in range(1, len(bounds)):
        hi, lo = bounds[j - 1], bounds[j]
        seed = None if seeds is None else seeds[j - 1]
        try:
            sol = local_solve(terminal, driver, L, start=lo, tol=tol, max_iter=max_iter, V0=seed, mprime=mprime)
        except ConvergenceError as exc:
            exc.window = j
            raise type(exc)(f"window {j} [{lo}, {hi}]: {exc}", exc.last_ratio, j) from exc
        pieces.append(sol)
        terminal = TerminalCondition(sp, sol.Y.at(lo), lo)

    # earliest window first; shift each window's V by the accumulated offset
    pieces.reverse()
    Y_vals, V_vals = [], []
    offset = None
    for i, sol in enumerate(pieces):
        lo, hi = sol.V.start, sol.V.end
        if offset is None:
            offset = np.zeros_like(sol.V.at(lo))
        shifted = [v + sp.expand(offset, lo, k) for k, v in zip(sol.V.levels(), sol.V.values)]
        last = i == len(pieces) - 1
        keep = slice(None) if last else slice(0, -1)
        if not last:
            nxt = pieces[i + 1]
            if not np.array_equal(sol.Y.at(hi), nxt.Y.at(hi)):
                raise SolverError(f"Y discontinuous at partition level {hi}")
        V_vals.extend(shifted[keep])
        Y_vals.extend(sol.Y.values[keep])
        offset = shifted[-1]
    Y = AdaptedProcess(sp, start, Y_vals)
    V = AdaptedProcess(sp, start, V_vals)
    M = MartingaleProcess(sp, start, [y + v for y, v in zip(Y.values, V.values)])

    pieces.reverse()
    report = SolveReport(
        partition=[sp.t(k) for k in bounds],
        partition_levels=bounds,
        iterations=[p.report.iterations[0] for p in pieces],
        residuals=[p.report.residuals[0] for p in pieces],
        ratios=[p.report.ratios[0] for p in pieces],
        increments=[p.report.increments[0] for p in pieces],
        step_bound=bound,
        window_width=safety * bound,
        wall_time=time.perf_counter() - t0,
    )
    log.info("global solve: %d windows, %.3fs", len(pieces), report.wall_time)
    return Solution(Y=Y, M=M, V=V, report=report)


# --- verification -----------------------------------------------------------


@dataclass
class VerifyReport:
    integral_residual: float
    martingale_defect: float
    terminal_defect: float
    worst_martingale_level: int
    integral_tol: float
    exact_tol: float

    @property
    def passed(self) -> bool:
        return (
            self.integral_residual <= self.integral_tol
            and self.martingale_defect <= self.exact_tol
            and self.terminal_defect <= self.exact_tol
        )

    def summary(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (
            f"integral_residual: {self.integral_residual:.3e} (tol {self.integral_tol:.1e})\n"
            f"martingale_defect: {self.martingale_defect:.3e} (tol {self.exact_tol:.1e}, "
            f"worst level {self.worst_martingale_level})\n"
            f"terminal_defect: {self.terminal_defect:.3e} (tol {self.exact_tol:.1e})\n"
            f"result: {flag}"
        )


def verify_solution(
    sol: Solution,
    xi: TerminalCondition,
    driver: DriverSpec,
    L: LFunctionalSpec,
    tol: float = 1e-10,
    exact_tol: float = 1e-12,
) -> VerifyReport:
    """Residuals of the backward integral equation, martingale and terminal defects.

    Y_t - xi = sum_{l>=t} [f0 dt + f_i dB^i] + M_t - M_T is checked along every
    root-to-leaf path, with the same left-endpoint sums as the Picard map.
    """
    sp = xi.space
    Y, M = sol.Y, sol.M
    I = integrate(Y, L(M), driver)
    end = Y.end
    tail = xi.values + I.at(end) - M.at(end)  # per leaf: xi + I_T - M_T
    resid = 0.0
    for k in Y.levels():
        here = Y.at(k) + I.at(k) - M.at(k)
        resid = max(resid, float(np.max(np.abs(sp.expand(here, k, end) - tail))))
    if M.end > M.start:
        defects = MartingaleProcess(sp, M.start, M.values).martingale_defect()
        mdef, worst = float(defects.max()), int(M.start + defects.argmax())
    else:
        mdef, worst = 0.0, M.start
    tdef = float(np.max(np.abs(Y.at(end) - xi.values)))
    scale = max(1.0, max(float(np.max(np.abs(v))) for v in M.values))
    return VerifyReport(resid, mdef, tdef, worst, 2 * tol, exact_tol * scale)
