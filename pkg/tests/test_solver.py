import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsdefpi.functionals import (
    DriverSpec,
    density_functional,
    kernel_functional,
    lebesgue_weights,
    l_density,
    quadratic_functional,
    random_adapted,
    zero_driver,
)
from bsdefpi.lattice import AdaptedProcess, TerminalCondition, build_lattice, cond_expect, norm_c
from bsdefpi.oracles import discrete_linear_oracle
from bsdefpi.solver import (
    ConvergenceError,
    GridTooCoarseError,
    HorizonError,
    PropertyError,
    a_priori_bound,
    contraction_bound,
    global_solve,
    local_solve,
    partition_levels,
    picard_map,
    step_bound,
    step_bound_readings,
    verify_solution,
)


def linear(a, d=1):
    return DriverSpec(1, d, lambda t, y, z: a * y, [lambda t, y: np.zeros_like(y)] * d, abs(a))


# --- bounds ------------------------------------------------------------------


def test_step_bound_values():
    assert step_bound(0, 0, 3, 2) == 1.0
    assert step_bound(1, 1, 1, 1) == pytest.approx(1 / (4 + 18 + 3 * math.sqrt(2)) ** 2, rel=1e-14)
    assert step_bound(1, 1, 1, 1) == pytest.approx(1.4521e-3, rel=1e-4)
    assert step_bound(1, 2, 1, 1) == pytest.approx(1 / (4 * (4 + 18 + 6 * math.sqrt(2)) ** 2), rel=1e-14)
    assert step_bound(1, 2, 1, 1) == pytest.approx(2.690e-4, rel=1e-3)
    with pytest.raises(ValueError):
        step_bound(-1, 1, 1, 1)


def test_bound_readings_take_minimum():
    r = step_bound_readings(1.0, 1.0, 4, 1)
    assert r.conservative == min(r.driver_dims, r.solution_dims) == r.driver_dims
    r2 = step_bound_readings(1.0, 1.0, 1, 4)
    assert r2.conservative == r2.solution_dims < r2.driver_dims


def test_contraction_bound_half_at_step_bound():
    for C1, C2, d, m in [(1, 1, 1, 1), (1, 2, 1, 1), (math.sqrt(2), 0.5, 2, 2), (3, 0.1, 3, 1)]:
        delta = step_bound(C1, C2, d, m)
        assert contraction_bound(C1, C2, d, m, delta) <= 0.5


def test_partition_levels():
    sp = build_lattice(0, 1, 10, 1)
    assert partition_levels(sp, 0, 10, 0.35) == [10, 7, 4, 1, 0]
    assert partition_levels(sp, 2, 10, 5) == [10, 2]
    with pytest.raises(GridTooCoarseError):
        partition_levels(sp, 0, 10, 0.05)


# --- Picard map --------------------------------------------------------------


def test_picard_constant_drift(rng):
    sp = build_lattice(0, 1, 5, 1)
    c = 1.7
    drv = DriverSpec(1, 1, lambda t, y, z: np.full_like(y, c), [lambda t, y: np.zeros_like(y)], c)
    xi = TerminalCondition(sp, rng.normal(size=32))
    V = random_adapted(sp, 1, rng, start=1, zero_start=True)
    out = picard_map(V, xi, drv, density_functional(1))
    for k in range(1, 6):
        assert np.allclose(out.at(k), c * (sp.t(k) - sp.t(1)), rtol=0, atol=1e-14)


def test_picard_unit_diffusion(rng):
    sp = build_lattice(0, 1, 5, 1)
    drv = DriverSpec(1, 1, lambda t, y, z: np.zeros_like(y), [lambda t, y: np.ones_like(y)], 1.0)
    xi = TerminalCondition(sp, rng.normal(size=32))
    out = picard_map(AdaptedProcess.zeros(sp, 2, 5, 1), xi, drv, density_functional(1))
    for k in range(2, 6):
        assert np.allclose(out.at(k), sp.B[k] - sp.expand(sp.B[2], 2, k), rtol=0, atol=1e-14)


def test_picard_linear_small_tree():
    sp = build_lattice(0, 1, 2, 1)
    xi = TerminalCondition(sp, sp.B[2])
    drv = DriverSpec(1, 1, lambda t, y, z: y, [lambda t, y: np.zeros_like(y)], 1.0)
    out = picard_map(AdaptedProcess.zeros(sp, 0, 2, 1), xi, drv, density_functional(1))
    assert np.allclose(out.at(2)[:, 0], 0.5 * np.repeat(sp.B[1][:, 0], 2), rtol=0, atol=1e-15)
    assert np.allclose(np.abs(out.at(2)), 0.5 * math.sqrt(0.5))


def test_picard_requires_zero_start(rng):
    sp = build_lattice(0, 1, 3, 1)
    xi = TerminalCondition(sp, np.zeros(8))
    with pytest.raises(ValueError):
        picard_map(random_adapted(sp, 1, rng), xi, zero_driver(1, 1, 1), density_functional(1))


# --- local solve -------------------------------------------------------------


def test_local_zero_driver_one_iteration(rng):
    sp = build_lattice(0, 1, 6, 1)
    xi = TerminalCondition(sp, rng.normal(size=64))
    sol = local_solve(xi, zero_driver(1, 1, 1), density_functional(1))
    assert sol.report.iterations == [1]
    assert all(np.all(v == 0) for v in sol.V.values)
    assert sol.Y.max_abs_diff(cond_expect(xi, 0)) == 0.0


@pytest.mark.parametrize("a", [-1.0, 0.5, 1.0])
def test_local_linear_matches_recursion(a):
    sp = build_lattice(0, 0.001, 8, 1)
    xi = TerminalCondition.from_function(sp, lambda B: B[:, 0] ** 2 + 1)
    sol = local_solve(xi, linear(a), density_functional(1))
    assert sol.Y.max_abs_diff(discrete_linear_oracle(xi, a)) <= 2e-10


def test_local_seed_independence(rng):
    sp = build_lattice(0, 0.001, 8, 1)
    xi = TerminalCondition.from_function(sp, lambda B: np.cos(B[:, 0]))
    drv = DriverSpec(1, 1, lambda t, y, z: np.sin(y) + 0.5 * z, [lambda t, y: 0.3 * y], 1.0)
    a = local_solve(xi, drv, density_functional(1))
    b = local_solve(xi, drv, density_functional(1), V0=random_adapted(sp, 1, rng, scale=5.0))
    assert norm_c(a.Y - b.Y) <= 2e-10


def test_local_horizon_guard_and_override():
    sp = build_lattice(0, 0.25, 8, 1)
    xi = TerminalCondition.from_function(sp, lambda B: np.minimum(B[:, 0] ** 2, 4))
    drv = DriverSpec(1, 1, lambda t, y, z: -0.2 * z, [lambda t, y: np.zeros_like(y)], 0.2)
    L = quadratic_functional(2.0)
    with pytest.raises(HorizonError):
        local_solve(xi, drv, L)
    sol = local_solve(xi, drv, L, override=True)
    assert sol.report.override
    assert verify_solution(sol, xi, drv, L).passed


def test_local_nonconvergence_reports_ratio():
    sp = build_lattice(0, 0.001, 6, 1)
    xi = TerminalCondition.from_function(sp, lambda B: B[:, 0])
    with pytest.raises(ConvergenceError) as exc:
        local_solve(xi, linear(1.0), density_functional(1), tol=1e-30, max_iter=2)
    assert exc.value.last_ratio is not None


def test_picard_envelope(rng):
    sp = build_lattice(0, 0.001, 8, 1)
    xi = TerminalCondition(sp, rng.normal(size=256))
    drv = DriverSpec(1, 1, lambda t, y, z: np.sin(y) - z, [lambda t, y: np.cos(y)], 1.0)
    sol = local_solve(xi, drv, density_functional(1), tol=1e-14)
    inc = sol.report.increments[0]
    for n, v in enumerate(inc):
        assert v <= 0.5**n * inc[0] + 1e-15


# --- global solve ------------------------------------------------------------


def test_global_zero_driver(rng):
    sp = build_lattice(0, 3.0, 9, 1)
    xi = TerminalCondition(sp, rng.normal(size=512))
    sol = global_solve(xi, zero_driver(1, 1, 1), density_functional(1), safety=0.4)
    assert len(sol.report.iterations) >= 3
    assert all(np.all(v == 0) for v in sol.V.values)
    assert sol.Y.max_abs_diff(cond_expect(xi, 0)) == 0.0
    assert sol.M.max_abs_diff(cond_expect(xi, 0)) == 0.0


def test_global_linear_many_windows():
    sp = build_lattice(0, 0.004, 16, 1)
    xi = TerminalCondition.from_function(sp, lambda B: B[:, 0] ** 2)
    sol = global_solve(xi, linear(1.0), density_functional(1))
    assert len(sol.report.iterations) >= 3
    assert sol.Y.max_abs_diff(discrete_linear_oracle(xi, 1.0)) <= 2e-10


def test_global_partition_invariance():
    sp = build_lattice(0, 0.004, 16, 1)
    xi = TerminalCondition.from_function(sp, lambda B: np.sin(3 * B[:, 0]))
    drv = DriverSpec(1, 1, lambda t, y, z: np.sin(y) + 0.5 * z, [lambda t, y: 0.5 * np.cos(y)], 1.0)
    L = density_functional(1)
    a = global_solve(xi, drv, L, safety=1.0)
    b = global_solve(xi, drv, L, safety=0.4)
    assert len(a.report.iterations) != len(b.report.iterations)
    assert a.Y.max_abs_diff(b.Y) <= 2e-10


def test_splice_invariants(rng):
    sp = build_lattice(0, 0.003, 8, 2)
    xi = TerminalCondition(sp, rng.normal(size=(sp.n_nodes(8), 1)))
    drv = DriverSpec(1, 2, lambda t, y, z: np.tanh(y) + 0.5 * z[:, :1] - 0.5 * z[:, 1:],
                     [lambda t, y: 0.5 * y, lambda t, y: np.sin(y)], 1.0)
    L = density_functional(2)
    sol = global_solve(xi, drv, L)
    assert len(sol.report.partition_levels) >= 4
    assert sol.M.martingale_defect().max() <= 1e-12 * max(1, np.max(np.abs(sol.M.at(0))))
    assert np.all(sol.V.at(0) == 0)
    assert verify_solution(sol, xi, drv, L).passed


def test_global_rejects_nonlocal_L():
    sp = build_lattice(0, 0.001, 4, 1)
    xi = TerminalCondition(sp, sp.B[4])
    with pytest.raises(PropertyError):
        global_solve(xi, linear(0.2), quadratic_functional(1.0))
    k = kernel_functional(lebesgue_weights(4, sp.dt), 1)
    with pytest.raises(PropertyError):
        global_solve(xi, DriverSpec(1, 1, lambda t, y, z: y, [lambda t, y: 0 * y], 1.0), k)


def test_global_grid_too_coarse():
    sp = build_lattice(0, 1.0, 4, 1)
    xi = TerminalCondition(sp, sp.B[4])
    with pytest.raises(GridTooCoarseError):
        global_solve(xi, linear(1.0), density_functional(1))


def test_bsde_triple_discrete_equation(rng):
    """With the density functional, (Y, Z) solves Y_k = Y_{k+1} + f dt - Z dB on every edge."""
    sp = build_lattice(0, 0.002, 10, 1)
    xi = TerminalCondition.from_function(sp, lambda B: np.maximum(B[:, 0], 0))
    drv = DriverSpec(1, 1, lambda t, y, z: -y + 0.5 * z, [lambda t, y: np.zeros_like(y)], 1.0)
    sol = global_solve(xi, drv, density_functional(1))
    Z = l_density(sol.M)
    for k in range(10):
        y, z = sol.Y.at(k), Z.at(k)
        f = drv.f0(sp.t(k), y, z)
        rhs = sp.children_view(sol.Y.at(k + 1))[:, :, 0] + f * sp.dt - z * sp.increments[:, 0][None, :]
        assert np.max(np.abs(rhs - y)) <= 1e-12


# --- verification ------------------------------------------------------------


def test_verify_examples(rng):
    sp = build_lattice(0, 0.001, 6, 1)
    xi = TerminalCondition(sp, rng.normal(size=64))
    L = density_functional(1)
    sol = local_solve(xi, linear(0.7), L)
    assert verify_solution(sol, xi, linear(0.7), L).passed

    zero = local_solve(xi, zero_driver(1, 1, 1), L)
    rep = verify_solution(zero, xi, zero_driver(1, 1, 1), L)
    assert rep.integral_residual == 0 and rep.martingale_defect == 0 and rep.terminal_defect == 0

    sol.M.values[3][5, 0] += 1e-6
    bad = verify_solution(sol, xi, linear(0.7), L)
    assert not bad.passed
    assert bad.worst_martingale_level in (2, 3)


# --- contraction and a priori estimates ------------------------------------------


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["density", "kernel"]))
def test_contraction_certificate(seed, which):
    r = np.random.default_rng(seed)
    sp = build_lattice(0, 0.001, 6, 1)
    L = density_functional(1) if which == "density" else kernel_functional(lebesgue_weights(6, sp.dt), 1)
    drv = DriverSpec(1, 1, lambda t, y, z: np.sin(y) + np.cos(z), [lambda t, y: np.tanh(y)], 1.0)
    xi = TerminalCondition(sp, r.normal(size=64))
    V, W = random_adapted(sp, 1, r, zero_start=True), random_adapted(sp, 1, r, zero_start=True)
    ratio = norm_c(picard_map(V, xi, drv, L) - picard_map(W, xi, drv, L)) / norm_c(V - W)
    assert ratio <= contraction_bound(L.C1, drv.C2, 1, 1, 0.001)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 3.0))
def test_a_priori_bound(seed, scale):
    r = np.random.default_rng(seed)
    sp = build_lattice(0.2, 0.3, 6, 1)
    C2 = 0.8
    drv = DriverSpec(1, 1, lambda t, y, z: C2 * (1 + t + np.abs(y)), [lambda t, y: C2 * (1 + t) * np.cos(y)], C2)
    L = density_functional(1)
    xi = TerminalCondition(sp, r.normal(0, scale, 64))
    V = random_adapted(sp, 1, r, zero_start=True, scale=scale)
    lhs = norm_c(picard_map(V, xi, drv, L))
    xi_l2 = math.sqrt(float(np.mean(xi.values**2)))
    assert lhs <= a_priori_bound(L.C1, C2, 1, 1, 0.2, 0.3, xi_l2, norm_c(V))
