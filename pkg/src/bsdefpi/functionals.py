"""Path-space functionals: Y(V), M(V), drivers, and the martingale functionals L."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .lattice import (
    AdaptedProcess,
    LatticeSpace,
    MartingaleProcess,
    TerminalCondition,
    cond_expect,
    norm_c,
    norm_h2,
)


def _check_pair(xi: TerminalCondition, V: AdaptedProcess) -> None:
    if xi.space is not V.space:
        raise ValueError("terminal condition and V live on different lattices")
    if V.end != xi.level:
        raise ValueError(f"V ends at level {V.end} but xi is measurable at level {xi.level}")
    if V.dim != xi.dim:
        raise ValueError(f"dimension mismatch: V has {V.dim}, xi has {xi.dim}")


def m_of_v(xi: TerminalCondition, V: AdaptedProcess) -> MartingaleProcess:
    """M(V)_t = E(xi + V_T | F_t) on the window of V."""
    _check_pair(xi, V)
    top = TerminalCondition(xi.space, xi.values + V.at(V.end), xi.level)
    return cond_expect(top, V.start)


def y_of_v(xi: TerminalCondition, V: AdaptedProcess) -> AdaptedProcess:
    """Y(V)_t = E(xi + V_T | F_t) - V_t; the terminal level is pinned to xi exactly."""
    M = m_of_v(xi, V)
    vals = [m - v for m, v in zip(M.values, V.values)]
    vals[-1] = xi.values.copy()
    return AdaptedProcess(V.space, V.start, vals)


# --- martingale functionals ------------------------------------------------


def _increments(M: AdaptedProcess, k: int) -> np.ndarray:
    """M_{k+1} - M_k per child, shape (n_k, 2**d, dim)."""
    sp = M.space
    return sp.children_view(M.at(k + 1)) - M.at(k)[:, None, :]


def l_density(M: AdaptedProcess) -> AdaptedProcess:
    """Projection of martingale increments on the driver increments.

    Z^{j,i}(n) = E[dM^j dB^i | n] / dt, flattened as index ``j * d + i``.
    The last level of the window carries zeros (no forward increment).
    """
    sp = M.space
    inc = sp.increments  # (b, d)
    vals = []
    for k in range(M.start, M.end):
        dM = _increments(M, k)  # (n, b, dim)
        Z = np.einsum("nbj,bi->nji", dM, inc) * (sp.prob / sp.dt)
        vals.append(Z.reshape(Z.shape[0], -1))
    vals.append(np.zeros((sp.n_nodes(M.end), M.dim * sp.d)))
    return AdaptedProcess(sp, M.start, vals)


def density_residual(M: AdaptedProcess) -> list:
    """Orthogonal remainder dM - Z dB per level, each of shape (n_k, 2**d, dim)."""
    sp = M.space
    Z = l_density(M)
    out = []
    for k in range(M.start, M.end):
        z = Z.at(k).reshape(-1, M.dim, sp.d)
        proj = np.einsum("nji,bi->nbj", z, sp.increments)
        out.append(_increments(M, k) - proj)
    return out


def l_quadratic(M: AdaptedProcess) -> AdaptedProcess:
    """sqrt(E(<M>_T - <M>_t | F_t)) with the predictable bracket q_k = E[(dM)^2 | F_k]."""
    sp = M.space
    acc = np.zeros_like(M.at(M.end))
    vals = [acc]
    for k in range(M.end - 1, M.start - 1, -1):
        q = np.mean(_increments(M, k) ** 2, axis=1)
        acc = q + sp.average_children(acc)
        vals.append(acc)
    vals.reverse()
    return AdaptedProcess(sp, M.start, [np.sqrt(v) for v in vals])


def _weights_for(w: np.ndarray, K: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (K, K):
        raise ValueError(f"kernel weights must be {K}x{K}, got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("kernel weights must be finite and non-negative")
    return w


def l_kernel(M: AdaptedProcess, weights: np.ndarray) -> AdaptedProcess:
    """L(M)_{t_k} = E[sum_{l>=k} w(k, l) Z_{t_l} | F_k] with Z = l_density(M).

    ``weights`` is indexed by absolute lattice levels; entries with l < k are ignored.
    """
    sp = M.space
    w = _weights_for(weights, sp.K)
    Z = l_density(M)
    vals = [np.zeros_like(Z.at(M.end))]
    for k in range(M.end - 1, M.start - 1, -1):
        acc = np.zeros_like(Z.at(M.end))
        for l in range(M.end - 1, k - 1, -1):
            acc = w[k, l] * Z.at(l) + (sp.average_children(acc) if l < M.end - 1 else 0.0)
        vals.append(acc)
    vals.reverse()
    return AdaptedProcess(sp, M.start, vals)


def dirac_weights(K: int) -> np.ndarray:
    return np.eye(K)


def lebesgue_weights(K: int, dt: float) -> np.ndarray:
    return np.triu(np.full((K, K), dt))


def schur_bound(weights: np.ndarray) -> float:
    """sqrt(max row sum * max column sum) of the upper-triangular part of w."""
    w = np.triu(np.asarray(weights, dtype=float))
    if w.size == 0:
        return 0.0
    return math.sqrt(float(w.sum(axis=1).max()) * float(w.sum(axis=0).max()))


@dataclass
class LFunctionalSpec:
    name: str
    evaluate: Callable[[AdaptedProcess], AdaptedProcess]
    C1: float
    local_in_time: bool
    differential: bool
    codomain: str  # "H2" or "C"
    out_dim: Callable[[int, int], int] = field(repr=False)

    def __post_init__(self):
        if self.codomain not in ("H2", "C"):
            raise ValueError(f"codomain must be 'H2' or 'C', got {self.codomain!r}")
        if not self.C1 >= 0:
            raise ValueError("C1 must be non-negative")

    def __call__(self, M: AdaptedProcess) -> AdaptedProcess:
        return self.evaluate(M)

    def norm(self, X: AdaptedProcess) -> float:
        return norm_h2(X) if self.codomain == "H2" else norm_c(X)

    def m(self, d_prime: int, d: int) -> int:
        return self.out_dim(d_prime, d)


def density_functional(d: int, C1: float | None = None) -> LFunctionalSpec:
    return LFunctionalSpec(
        name="density",
        evaluate=l_density,
        C1=math.sqrt(d) if C1 is None else C1,
        local_in_time=True,
        differential=True,
        codomain="H2",
        out_dim=lambda dp, dd: dp * dd,
    )


def quadratic_functional(C1: float) -> LFunctionalSpec:
    return LFunctionalSpec(
        name="quadratic",
        evaluate=l_quadratic,
        C1=C1,
        local_in_time=False,
        differential=True,
        codomain="C",
        out_dim=lambda dp, dd: dp,
    )


def kernel_functional(weights: np.ndarray, d: int, C1: float | None = None) -> LFunctionalSpec:
    w = np.array(weights, dtype=float)
    if C1 is None:
        C1 = math.sqrt(d) * schur_bound(w)
    return LFunctionalSpec(
        name="kernel",
        evaluate=lambda M: l_kernel(M, w),
        C1=C1,
        local_in_time=False,
        differential=True,
        codomain="H2",
        out_dim=lambda dp, dd: dp * dd,
    )


# --- drivers ---------------------------------------------------------------


@dataclass
class DriverSpec:
    """Coefficients f0(t, y, z) and f_i(t, y), vectorised over node arrays.

    ``f0`` maps ``(t, y: (n, d'), z: (n, m))`` to ``(n, d')``; each entry of
    ``f_list`` maps ``(t, y)`` to ``(n, d')``.
    """

    d_prime: int
    m: int
    f0: Callable
    f_list: Sequence[Callable]
    C2: float
    name: str = "custom"

    def __post_init__(self):
        if self.C2 < 0:
            raise ValueError("C2 must be non-negative")

    @property
    def d(self) -> int:
        return len(self.f_list)


def zero_driver(d_prime: int, m: int, d: int) -> DriverSpec:
    return DriverSpec(
        d_prime, m, lambda t, y, z: np.zeros_like(y), [lambda t, y: np.zeros_like(y)] * d, 0.0, "zero"
    )


def check_driver(driver: DriverSpec, rng: np.random.Generator, n: int = 200, scale: float = 3.0) -> dict:
    """Empirical Lipschitz and linear-growth ratios; all should be <= C2."""
    dp, m = driver.d_prime, driver.m
    t = rng.uniform(0, 2, size=n)
    y, y2 = rng.normal(0, scale, (n, dp)), rng.normal(0, scale, (n, dp))
    z, z2 = rng.normal(0, scale, (n, m)), rng.normal(0, scale, (n, m))
    lip0, grow0, lipi, growi = 0.0, 0.0, 0.0, 0.0
    nrm = lambda a: np.linalg.norm(a, axis=1)
    for j in range(n):
        tj = float(t[j])
        a = driver.f0(tj, y[j : j + 1], z[j : j + 1])
        b = driver.f0(tj, y2[j : j + 1], z2[j : j + 1])
        den = nrm(y[j : j + 1] - y2[j : j + 1]) + nrm(z[j : j + 1] - z2[j : j + 1])
        lip0 = max(lip0, float(nrm(a - b)[0] / den[0]))
        grow0 = max(grow0, float(nrm(a)[0] / (1 + tj + nrm(y[j : j + 1])[0] + nrm(z[j : j + 1])[0])))
        for f in driver.f_list:
            fa, fb = f(tj, y[j : j + 1]), f(tj, y2[j : j + 1])
            lipi = max(lipi, float(nrm(fa - fb)[0] / nrm(y[j : j + 1] - y2[j : j + 1])[0]))
            growi = max(growi, float(nrm(fa)[0] / (1 + tj + nrm(y[j : j + 1])[0])))
    return {"lip_f0": lip0, "growth_f0": grow0, "lip_fi": lipi, "growth_fi": growi}


# --- random processes and property audits ----------------------------------


def random_martingale(
    space: LatticeSpace, dim: int, rng: np.random.Generator, start: int = 0, end: int | None = None, scale: float = 1.0
) -> MartingaleProcess:
    end = space.K if end is None else end
    top = TerminalCondition(space, rng.normal(0, scale, (space.n_nodes(end), dim)), end)
    return cond_expect(top, start)


def random_adapted(
    space: LatticeSpace, dim: int, rng: np.random.Generator, start: int = 0, end: int | None = None,
    scale: float = 1.0, zero_start: bool = False,
) -> AdaptedProcess:
    end = space.K if end is None else end
    vals = [rng.normal(0, scale, (space.n_nodes(k), dim)) for k in range(start, end + 1)]
    if zero_start:
        vals[0][:] = 0.0
    return AdaptedProcess(space, start, vals)


def start_removed(M: AdaptedProcess) -> MartingaleProcess:
    """M - M_{start}, with M_start broadcast along each subtree."""
    sp = M.space
    base = M.at(M.start)
    return MartingaleProcess(sp, M.start, [v - sp.expand(base, M.start, k) for k, v in zip(M.levels(), M.values)])


def audit_differential(L: LFunctionalSpec, M: AdaptedProcess) -> float:
    """max |L(M - M_start) - L(M)| over the open window (last level excluded)."""
    a, b = L(M), L(start_removed(M))
    if M.end == M.start:
        return 0.0
    return max(float(np.max(np.abs(a.at(k) - b.at(k)))) for k in range(M.start, M.end))


def audit_local_in_time(L: LFunctionalSpec, M: AdaptedProcess, lo: int, hi: int) -> float:
    """max |L(M) - L(M restricted to [lo, hi])| on levels lo .. hi-1."""
    full = L(M)
    sub = L(M.restrict(lo, hi))
    if hi == lo:
        return 0.0
    return max(float(np.max(np.abs(full.at(k) - sub.at(k)))) for k in range(lo, hi))


def audit_properties(
    L: LFunctionalSpec, space: LatticeSpace, d_prime: int, rng: np.random.Generator, n: int = 3, atol: float = 1e-10
) -> dict:
    """Check the declared local-in-time / differential flags on random martingales."""
    worst_diff, worst_loc = 0.0, 0.0
    K = space.K
    for _ in range(n):
        M = random_martingale(space, d_prime, rng)
        if L.differential:
            worst_diff = max(worst_diff, audit_differential(L, M))
        if L.local_in_time and K >= 2:
            lo = int(rng.integers(0, K - 1))
            hi = int(rng.integers(lo + 1, K + 1))
            worst_loc = max(worst_loc, audit_local_in_time(L, M, lo, hi))
    return {
        "differential": worst_diff,
        "local_in_time": worst_loc,
        "passed": worst_diff <= atol and worst_loc <= atol,
    }


def estimate_lipschitz(
    L: LFunctionalSpec, space: LatticeSpace, d_prime: int, rng: np.random.Generator,
    n_pairs: int = 50, start: int = 0, end: int | None = None,
) -> float:
    """Largest observed ||L(M) - L(M~)|| / ||M - M~||_C over random martingale pairs."""
    worst = 0.0
    for _ in range(n_pairs):
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        M = random_martingale(space, d_prime, rng, start, end, scale)
        Mt = random_martingale(space, d_prime, rng, start, end, scale)
        den = norm_c(M - Mt)
        if den > 0:
            worst = max(worst, L.norm(L(M) - L(Mt)) / den)
    return worst
