"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from bsdefpi.functionals import (
    DriverSpec,
    audit_differential,
    audit_local_in_time,
    density_functional,
    dirac_weights,
    kernel_functional,
    l_density,
    l_kernel,
    m_of_v,
    quadratic_functional,
    random_adapted,
    random_martingale,
    y_of_v,
)
from bsdefpi.lattice import (
    AdaptedProcess,
    MartingaleProcess,
    TerminalCondition,
    branch_moments,
    build_lattice,
    cond_expect,
    norm_c,
)
from bsdefpi.oracles import discrete_linear_oracle, walk_expectation
from bsdefpi.solver import (
    contraction_bound,
    global_solve,
    partition_levels,
    picard_map,
    step_bound_readings,
    verify_solution,
)
from bsdefpi.studies import clipped_square, linear_driver, pde_crosscheck

TOL = 1e-10


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")

    return emit


# --- 1 --------------------------------------------------------------------------


def test_criterion_1_exactness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    sp = build_lattice(0.0, 0.004, 12, 1)
    assert sp.n_nodes(12) == 4096
    worst = {}

    xi = TerminalCondition(sp, rng.normal(size=(4096, 2)))
    full = cond_expect(xi, 0)
    tower = 0.0
    for t in (4, 9, 12):
        inner = cond_expect(TerminalCondition(sp, full.at(t), t), 0)
        tower = max(tower, max(float(np.max(np.abs(inner.at(s) - full.at(s)))) for s in range(t + 1)))
    worst["tower"] = tower

    V = random_adapted(sp, 2, rng)
    worst["m_of_v martingale"] = float(m_of_v(xi, V).martingale_defect().max())
    worst["Y_T = xi"] = float(np.max(np.abs(y_of_v(xi, V).at(12) - xi.values)))

    xi1 = TerminalCondition.from_function(sp, lambda B: np.sin(20 * B[:, 0]))
    drv = DriverSpec(1, 1, lambda t, y, z: np.sin(y) + 0.5 * z, [lambda t, y: 0.5 * np.cos(y)], 1.0)
    sol = global_solve(xi1, drv, density_functional(1), tol=TOL)
    assert len(sol.report.partition_levels) > 2
    worst["spliced M martingale"] = float(sol.M.martingale_defect().max())

    total, mean, cov = branch_moments(sp)
    worst["driver moments"] = max(abs(total - 1), float(np.max(np.abs(mean))), float(np.max(np.abs(cov - sp.dt))))

    M = random_martingale(sp, 1, rng)
    Z = l_density(M)
    rebuilt, rec = M.at(0), 0.0
    for k in range(12):
        rebuilt = sp.expand(rebuilt, k, k + 1) + (Z.at(k)[:, None, :] * sp.increments[None, :, :]).reshape(-1, 1)
        rec = max(rec, float(np.max(np.abs(rebuilt - M.at(k + 1)))))
    worst["d=1 reconstruction"] = rec

    runtime = time.perf_counter() - t0
    ok = all(v <= 1e-12 for v in worst.values()) and runtime < 5
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(1, ok, f"{detail}; limit 1e-12; runtime {runtime:.2f}s (< 5s)")
    assert ok


# --- 2 --------------------------------------------------------------------------


def test_criterion_2_contraction_certificate(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    C2 = 1.0
    drv = DriverSpec(1, 1, lambda t, y, z: np.sin(y) + np.cos(z), [lambda t, y: np.tanh(y)], C2)
    results = {}
    K = 8
    decay = np.triu(0.5 ** np.subtract.outer(np.arange(K), np.arange(K)).T.clip(0))
    for L in (density_functional(1), quadratic_functional(2.0), kernel_functional(decay, 1)):
        name = L.name
        delta = step_bound_readings(L.C1, C2, 1, 1).conservative
        sp = build_lattice(0.0, delta, K, 1)
        cert = contraction_bound(L.C1, C2, 1, 1, delta)
        worst = 0.0
        for i in range(100):
            scale = [0.01, 1.0, 100.0][i % 3]
            xi = TerminalCondition(sp, rng.normal(0, scale, sp.n_nodes(K)))
            V = random_adapted(sp, 1, rng, zero_start=True, scale=scale)
            W = V + random_adapted(sp, 1, rng, zero_start=True, scale=scale * rng.uniform(0.01, 1))
            num = norm_c(picard_map(V, xi, drv, L) - picard_map(W, xi, drv, L))
            worst = max(worst, num / norm_c(V - W))
        results[name] = (worst, cert)
    runtime = time.perf_counter() - t0
    ok = all(w <= c and w <= 0.5 for w, c in results.values()) and runtime < 30
    detail = ", ".join(f"{k}: max ratio {w:.2e} <= bound {c:.3f}" for k, (w, c) in results.items())
    report(2, ok, f"100 pairs each; {detail}; runtime {runtime:.2f}s (< 30s)")
    assert ok


# --- 3 --------------------------------------------------------------------------


def _random_problem(rng):
    d = int(rng.integers(1, 3))
    a, b, s = rng.uniform(-1, 1, 3)
    K = 8 if d == 1 else 6
    L = density_functional(d)
    f0 = lambda t, y, z: a * np.sin(y) + b * np.tanh(z.sum(axis=1, keepdims=True) / d)
    fi = [lambda t, y, c=c: s * c * np.cos(y) for c in rng.uniform(-1, 1, d)]
    drv = DriverSpec(1, d, f0, fi, 1.0)
    delta = step_bound_readings(L.C1, 1.0, d, 1).conservative
    T = delta * K / int(rng.integers(2, 5)) * 0.999
    sp = build_lattice(0.0, T, K, d)
    xi = TerminalCondition(sp, rng.normal(0, 2, sp.n_nodes(K)))
    return xi, drv, L


def test_criterion_3_fixed_point_convergence(report):
    rng = np.random.default_rng(3)
    env_ok, worst_resid, worst_env, n_windows = True, 0.0, 0.0, 0
    for _ in range(20):
        xi, drv, L = _random_problem(rng)
        sol = global_solve(xi, drv, L, tol=TOL)
        for inc in sol.report.increments:
            n_windows += 1
            for n, v in enumerate(inc):
                env = 0.5**n * inc[0]
                if n:
                    worst_env = max(worst_env, v / env if env > 0 else 0.0)
                env_ok &= v <= env
        rep = verify_solution(sol, xi, drv, L, tol=TOL)
        worst_resid = max(worst_resid, rep.integral_residual)
        env_ok &= rep.passed
    ok = env_ok and worst_resid <= 2 * TOL
    report(3, ok, f"20 problems / {n_windows} windows; max increment/envelope over n >= 1: {worst_env:.2e} (<= 1); "
                  f"max verify residual {worst_resid:.1e} (<= {2 * TOL:.0e})")
    assert ok


# --- 4 and 5 ----------------------------------------------------------------------


TERMINALS = {
    "constant": (lambda B: np.full(B.shape[0], 1.5), lambda x: np.full_like(np.asarray(x, float), 1.5), 1.5),
    "B_T": (lambda B: B[:, 0], lambda x: np.asarray(x, float), 0.0),
    "B_T^2": (lambda B: B[:, 0] ** 2, lambda x: np.asarray(x, float) ** 2, None),
}
T4 = 0.004


def _problems():
    for a in (-1.0, -0.5, 0.5, 1.0):
        for K in (8, 16):
            for name in TERMINALS:
                yield a, K, name


def test_criterion_4_linear_oracle(report):
    worst = 0.0
    for a, K, name in _problems():
        sp = build_lattice(0.0, T4, K, 1)
        xi = TerminalCondition.from_function(sp, TERMINALS[name][0])
        sol = global_solve(xi, linear_driver(a), density_functional(1), tol=TOL)
        worst = max(worst, sol.Y.max_abs_diff(discrete_linear_oracle(xi, a)))

    orders, solver_orders = [], []
    for a in (-1.0, -0.5, 0.5, 1.0):
        for name in ("constant", "B_T^2"):
            phi_tree, phi, mean = TERMINALS[name]
            mean = T4 if mean is None else mean
            exact = math.exp(a * T4) * mean
            errs, dts = [], []
            for K in (4, 8, 16, 32):
                dt = T4 / K
                if K <= 16:
                    sp = build_lattice(0.0, T4, K, 1)
                    xi = TerminalCondition.from_function(sp, phi_tree)
                    y0 = float(global_solve(xi, linear_driver(a), density_functional(1), tol=TOL).Y.at(0)[0, 0])
                else:
                    # 2^33 nodes exceed the memory cap; the closed-form walk value is the
                    # same discrete solution the first half of this criterion pins nodewise
                    y0 = (1 - a * dt) ** (-K) * walk_expectation(phi, T4, K)
                errs.append(abs(y0 - exact))
                dts.append(dt)
            slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
            orders.append(slope)
            solver_orders.append(float(np.polyfit(np.log(dts[:3]), np.log(errs[:3]), 1)[0]))
    ok = worst <= 2 * TOL and min(orders) >= 0.9 and min(solver_orders) >= 0.9
    report(4, ok, f"max nodewise deviation {worst:.1e} (<= {2 * TOL:.0e}) over 24 problems; "
                  f"min order K=4..32 {min(orders):.3f}, solver-only K=4..16 {min(solver_orders):.3f} (>= 0.9)")
    assert ok


def test_criterion_5_partition_and_seed_invariance(report):
    rng = np.random.default_rng(5)
    worst_part, worst_seed = 0.0, 0.0
    for a, K, name in _problems():
        sp = build_lattice(0.0, T4, K, 1)
        xi = TerminalCondition.from_function(sp, TERMINALS[name][0])
        L, drv = density_functional(1), linear_driver(a)
        base = global_solve(xi, drv, L, tol=TOL, safety=1.0)
        fine = global_solve(xi, drv, L, tol=TOL, safety=0.4)
        assert base.report.partition_levels != fine.report.partition_levels
        worst_part = max(worst_part, norm_c(base.Y - fine.Y))

        bound = step_bound_readings(L.C1, drv.C2, 1, 1).conservative
        levels = partition_levels(sp, 0, K, 0.9 * bound)
        seeds = [random_adapted(sp, 1, rng, start=lo, end=hi, scale=10.0) for hi, lo in zip(levels, levels[1:])]
        s0 = global_solve(xi, drv, L, tol=TOL)
        s1 = global_solve(xi, drv, L, tol=TOL, seeds=seeds)
        worst_seed = max(worst_seed, norm_c(s0.Y - s1.Y))
    ok = worst_part <= 2 * TOL and worst_seed <= 2 * TOL
    report(5, ok, f"norm_c gap across partitions {worst_part:.1e}, across seeds {worst_seed:.1e} (<= {2 * TOL:.0e})")
    assert ok


# --- 6 --------------------------------------------------------------------------


def test_criterion_6_kernel_dirac_recovery(report):
    rng = np.random.default_rng(6)
    sp = build_lattice(0.0, 1.0, 10, 1)
    worst = 0.0
    for _ in range(5):
        M = random_martingale(sp, 2, rng, scale=float(rng.choice([0.1, 1.0, 10.0])))
        worst = max(worst, l_kernel(M, dirac_weights(10)).max_abs_diff(l_density(M)))
    ok = worst <= 1e-12
    report(6, ok, f"max |l_kernel(Dirac) - l_density| = {worst:.1e} (<= 1e-12), K=10, d=1")
    assert ok


# --- 7 --------------------------------------------------------------------------


PROBES = [(t, x) for t in (0.0, 0.125) for x in (-0.5, 0.0, 0.5)]


def test_criterion_7_nonlocal_pde(report):
    t0 = time.perf_counter()
    phi = clipped_square(4.0)
    coarse = pde_crosscheck(phi, 0.2, 0.25, 14, 0.02, PROBES)
    fine = pde_crosscheck(phi, 0.2, 0.25, 16, 0.01, PROBES)
    runtime = time.perf_counter() - t0
    a, b = coarse.values.max_rel, fine.values.max_rel
    ok = a <= 0.05 and b < a and runtime < 120
    report(7, ok, f"max relative discrepancy {a:.3e} at (K=14, dx=0.02) (<= 5e-2), {b:.3e} at (K=16, dx=0.01) "
                  f"(strictly smaller); runtime {runtime:.1f}s (< 120s)")
    assert ok


# --- 8 --------------------------------------------------------------------------


def test_criterion_8_property_audits(report):
    rng = np.random.default_rng(8)
    sp = build_lattice(0.0, 1.0, 8, 1)
    dens, quad = density_functional(1), quadratic_functional(2.0)
    worst_dl, worst_dd, worst_qd = 0.0, 0.0, 0.0
    for i in range(50):
        M = random_martingale(sp, 1, rng, scale=float(rng.choice([0.1, 1.0, 10.0]))) + float(rng.normal(0, 5))
        lo = int(rng.integers(0, 7))
        hi = int(rng.integers(lo + 1, 9))
        worst_dl = max(worst_dl, audit_local_in_time(dens, M, lo, hi))
        worst_dd = max(worst_dd, audit_differential(dens, M))
        worst_qd = max(worst_qd, audit_differential(quad, M))
    # witness: a martingale that is still moving after the sub-window ends
    B = AdaptedProcess.driver(sp)
    witness = audit_local_in_time(quad, MartingaleProcess(sp, 0, B.values), 0, 4)
    ok = worst_dl <= 1e-12 and worst_dd <= 1e-12 and worst_qd <= 1e-12 and witness > 1e-3
    report(8, ok, f"l_density local-in-time {worst_dl:.1e}, differential {worst_dd:.1e}; "
                  f"l_quadratic differential {worst_qd:.1e} (all <= 1e-12, 50 martingales); "
                  f"l_quadratic locality witness gap {witness:.3f} (> 0, fails as expected)")
    assert ok
