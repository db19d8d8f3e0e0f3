"""Independent ground truth: closed-form discrete solutions and the nonlocal PDE route."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, special

from .lattice import AdaptedProcess, LatticeSpace, TerminalCondition, cond_expect


class OracleError(ValueError):
    pass


def discrete_linear_oracle(xi: TerminalCondition, a: float) -> AdaptedProcess:
    """Y_k = (1 - a dt)^-(K-k) E(xi | F_k), the exact lattice solution for f0 = a y."""
    sp = xi.space
    q = 1.0 - a * sp.dt
    if abs(a * sp.dt) >= 1:
        raise OracleError(f"|a dt| = {abs(a * sp.dt):.3g} must be < 1")
    E = cond_expect(xi, 0)
    K = xi.level
    return AdaptedProcess(sp, 0, [v * q ** (-(K - k)) for k, v in zip(E.levels(), E.values)])


def walk_expectation(phi: Callable, T: float, K: int, x0: float = 0.0) -> float:
    """E phi(x0 + S_K) for the symmetric +-sqrt(T/K) walk, by binomial counting."""
    j = np.arange(K + 1)
    pts = x0 + (2 * j - K) * math.sqrt(T / K)
    logw = special.gammaln(K + 1) - special.gammaln(j + 1) - special.gammaln(K - j + 1) - K * math.log(2)
    return float(np.sum(np.exp(logw) * np.asarray(phi(pts), dtype=float)))


def heat_kernel_expectation(phi: Callable, t: float, x: float, T: float, tol: float = 1e-10) -> float:
    """P_{T-t} phi(x) = E phi(x + sqrt(T-t) N) by adaptive quadrature."""
    if T < t:
        raise OracleError("need T >= t")
    s = math.sqrt(T - t)
    if s == 0:
        return _scalar(phi(x))
    norm = 1.0 / math.sqrt(2 * math.pi)
    val, err = integrate.quad(
        lambda z: _scalar(phi(x + s * z)) * norm * math.exp(-0.5 * z * z),
        -np.inf, np.inf, epsabs=tol, epsrel=tol, limit=200,
    )
    if err > 10 * max(tol, tol * abs(val)):
        raise OracleError(f"quadrature did not converge (error estimate {err:.2e})")
    return float(val)


def _scalar(v) -> float:
    return float(np.asarray(v, dtype=float).reshape(-1)[0])


# --- nonlocal PDE ------------------------------------------------------------


@dataclass
class PdeGrid:
    """Explicit finite-difference grid on [-X, X] x [tau, T] for scalar u."""

    X: float
    dx: float
    tau: float
    T: float
    n_t: int
    u: np.ndarray | None = field(default=None, repr=False)  # (n_t + 1, n_x)
    K_u: np.ndarray | None = field(default=None, repr=False)  # K(u) per slice
    clipped: int = 0

    def __post_init__(self):
        if self.dx <= 0 or self.X <= 0:
            raise OracleError("need dx > 0 and X > 0")
        if self.dt > self.dx**2 * (1 + 1e-12):
            raise OracleError(
                f"explicit scheme unstable: dt={self.dt:.3e} > dx^2={self.dx ** 2:.3e}"
            )

    @classmethod
    def stable(cls, X: float, dx: float, tau: float, T: float, multiple_of: int = 1) -> "PdeGrid":
        """Fewest time steps (a multiple of ``multiple_of``) meeting dt <= dx^2."""
        n = math.ceil((T - tau) / dx**2 * (1 - 1e-12))
        n = multiple_of * math.ceil(n / multiple_of)
        return cls(X, dx, tau, T, n)

    @property
    def dt(self) -> float:
        return (self.T - self.tau) / self.n_t

    @property
    def x(self) -> np.ndarray:
        n = int(round(self.X / self.dx))
        return np.arange(-n, n + 1) * self.dx

    @property
    def times(self) -> np.ndarray:
        return self.tau + np.arange(self.n_t + 1) * self.dt

    def _interp(self, arr: np.ndarray, t: float, x: float) -> float:
        s = (t - self.tau) / self.dt
        k0 = min(max(int(math.floor(s)), 0), self.n_t - 1)
        w = s - k0
        a = np.interp(x, self.x, arr[k0])
        b = np.interp(x, self.x, arr[k0 + 1])
        return float((1 - w) * a + w * b)

    def value(self, t: float, x: float) -> float:
        return self._interp(self.u, t, x)

    def k_value(self, t: float, x: float) -> float:
        return self._interp(self.K_u, t, x)


def gaussian_smooth(values: np.ndarray, var: float, dx: float) -> np.ndarray:
    """Discrete heat semigroup: convolve with N(0, var) truncated at 8 sd, edges held."""
    if var <= 0:
        return np.array(values, dtype=float)
    sd = math.sqrt(var)
    half = max(1, int(math.ceil(8 * sd / dx)))
    offs = np.arange(-half, half + 1) * dx
    w = np.exp(-0.5 * offs**2 / var)
    w /= w.sum()
    padded = np.pad(values, half, mode="edge")
    return np.convolve(padded, w, mode="valid")


def grad_sq(u: np.ndarray, dx: float) -> np.ndarray:
    g = np.gradient(u, dx)
    return g * g


def nonlocal_k_direct(u_slices: np.ndarray, k: int, dt: float, dx: float) -> np.ndarray:
    """K(u)(t_k) = sqrt(sum_{l>k} dt P_{t_l - t_k} |u_x(t_l)|^2), one convolution per slice."""
    acc = np.zeros(u_slices.shape[1])
    for l in range(k + 1, u_slices.shape[0]):
        acc += dt * gaussian_smooth(grad_sq(u_slices[l], dx), (l - k) * dt, dx)
    return np.sqrt(np.maximum(acc, 0.0))


def solve_nonlocal_pde(phi: Callable, f0: Callable, grid: PdeGrid) -> PdeGrid:
    """Backward explicit march for u_t + u_xx/2 + f0(t, u, K(u)) = 0, u(T) = phi.

    K(u)(t_k)^2 = sum_{l>k} dt P_{t_l - t_k} |u_x(t_l)|^2 is accumulated with the
    semigroup recursion G_k = P_dt(G_{k+1} + dt |u_x(t_{k+1})|^2), which equals
    the direct sum of ``nonlocal_k_direct``.
    """
    x = grid.x
    dt, dx, n_t = grid.dt, grid.dx, grid.n_t
    t = grid.times
    u = np.empty((n_t + 1, x.size))
    Ku = np.zeros_like(u)
    u[n_t] = np.asarray(phi(x), dtype=float)
    G = np.zeros(x.size)
    clipped = 0
    for k in range(n_t - 1, -1, -1):
        nxt = u[k + 1]
        G = gaussian_smooth(G + dt * grad_sq(nxt, dx), dt, dx)
        neg = G < 0
        clipped += int(neg.sum())
        Ku[k] = np.sqrt(np.where(neg, 0.0, G))
        lap = np.zeros_like(nxt)
        lap[1:-1] = (nxt[2:] - 2 * nxt[1:-1] + nxt[:-2]) / dx**2
        cur = nxt + dt * (0.5 * lap + np.asarray(f0(t[k + 1], nxt, Ku[k]), dtype=float))
        cur[0] = heat_kernel_expectation(phi, t[k], x[0], grid.T)
        cur[-1] = heat_kernel_expectation(phi, t[k], x[-1], grid.T)
        if not np.all(np.isfinite(cur)):
            raise OracleError(f"PDE solution blew up at t={t[k]:.4g}")
        u[k] = cur
    grid.u, grid.K_u, grid.clipped = u, Ku, clipped
    return grid


# --- lattice vs PDE ------------------------------------------------------------


def probe_offset(space: LatticeSpace, t: float, x: float) -> float:
    """Start point x0 such that some level node sits exactly at x (B-values shifted by x0)."""
    k = _level_of(space, t)
    return x - (0.0 if k % 2 == 0 else math.sqrt(space.dt))


def _level_of(space: LatticeSpace, t: float) -> int:
    k = int(round((t - space.grid.tau) / space.dt))
    if abs(space.t(k) - t) > 1e-9 * max(1.0, abs(t)):
        raise OracleError(f"probe time {t} is not a lattice time")
    return k


@dataclass
class CrossValidation:
    rows: list  # (t, x, u_pde, y_lattice, abs_err)

    @property
    def max_abs(self) -> float:
        return max(r[4] for r in self.rows)

    @property
    def mean_abs(self) -> float:
        return float(np.mean([r[4] for r in self.rows]))

    @property
    def max_rel(self) -> float:
        return max(r[4] / max(abs(r[2]), 1e-300) for r in self.rows)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "u_pde", "y_lattice", "abs_err"])
            for r in self.rows:
                w.writerow([repr(float(v)) for v in r])

    def __add__(self, other: "CrossValidation") -> "CrossValidation":
        return CrossValidation(self.rows + other.rows)


def _bin_at(space: LatticeSpace, values: np.ndarray, k: int, x: float, x0: float, coord: int):
    pts = np.round(x0 + space.B[k][:, coord], 12)
    centres = np.unique(pts)
    c = centres[np.argmin(np.abs(centres - x))]
    return float(c), float(np.mean(values[pts == c]))


def cross_validate(
    lattice_solution,
    pde: PdeGrid,
    probes: Sequence[tuple],
    x0: float = 0.0,
    coord: int = 0,
) -> CrossValidation:
    """Compare E(Y_t | B_t = x) on the lattice with u(t, x) from the PDE grid.

    Lattice nodes at the probe level are binned by driver value; the bin nearest
    each probe is used and the PDE solution is interpolated at that bin.
    """
    Y = lattice_solution.Y
    sp = Y.space
    rows = []
    for t, x in probes:
        k = _level_of(sp, t)
        xb, y = _bin_at(sp, Y.at(k)[:, 0], k, x, x0, coord)
        u = pde.value(t, xb)
        rows.append((t, xb, u, y, abs(u - y)))
    return CrossValidation(rows)


def compare_k_functional(lattice_LM: AdaptedProcess, pde: PdeGrid, probes, x0: float = 0.0) -> CrossValidation:
    """Same binning as cross_validate, applied to L_c(M) against K(u)."""
    sp = lattice_LM.space
    rows = []
    for t, x in probes:
        k = _level_of(sp, t)
        xb, lv = _bin_at(sp, lattice_LM.at(k)[:, 0], k, x, x0, 0)
        kv = pde.k_value(t, xb)
        rows.append((t, xb, kv, lv, abs(kv - lv)))
    return CrossValidation(rows)
