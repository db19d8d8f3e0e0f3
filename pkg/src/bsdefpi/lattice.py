"""Discrete filtered probability space: a non-recombining 2^d-ary random-walk tree.

Node ``i`` at level ``k`` has children ``i * 2**d + b`` for ``b = 0 .. 2**d - 1``,
so the parent of node ``i`` is ``i // 2**d`` and every level is a contiguous
array.  All branch probabilities are ``2**-d``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_MAX_NODES = 2**22


class CapacityError(ValueError):
    """The requested tree would exceed the configured node cap."""


class LevelRangeError(ValueError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    tau: float
    T: float
    K: int

    def __post_init__(self):
        if not (self.T > self.tau):
            raise ValueError(f"need T > tau, got tau={self.tau}, T={self.T}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")

    @property
    def dt(self) -> float:
        return (self.T - self.tau) / self.K

    def t(self, k: int) -> float:
        if k == self.K:
            return float(self.T)
        return self.tau + k * self.dt

    @property
    def times(self) -> np.ndarray:
        out = self.tau + np.arange(self.K + 1) * self.dt
        out[-1] = self.T
        return out


@dataclass(frozen=True, eq=False)
class LatticeSpace:
    """Finite filtered probability space approximating d-dimensional Brownian motion.

    ``B[k]`` has shape ``(2**(d*k), d)`` and holds the driver path value at
    every node of level ``k``.
    """

    grid: TimeGrid
    d: int
    signs: np.ndarray = field(repr=False)
    B: tuple = field(repr=False)

    @property
    def K(self) -> int:
        return self.grid.K

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def branching(self) -> int:
        return 2**self.d

    @property
    def prob(self) -> float:
        return 1.0 / self.branching

    @property
    def increments(self) -> np.ndarray:
        """Branch increments, shape ``(2**d, d)``, entries ``+-sqrt(dt)``."""
        return self.signs * math.sqrt(self.dt)

    def n_nodes(self, k: int) -> int:
        return self.branching**k

    @property
    def total_nodes(self) -> int:
        return sum(self.n_nodes(k) for k in range(self.K + 1))

    def t(self, k: int) -> float:
        return self.grid.t(k)

    def parent_index(self, k: int) -> np.ndarray:
        if k == 0:
            return np.array([-1])
        return np.arange(self.n_nodes(k)) // self.branching

    def expand(self, values: np.ndarray, k_from: int, k_to: int) -> np.ndarray:
        """Broadcast level-``k_from`` node values to their descendants at ``k_to``."""
        if k_to < k_from:
            raise LevelRangeError(f"cannot expand from level {k_from} to {k_to}")
        return np.repeat(values, self.branching ** (k_to - k_from), axis=0)

    def children_view(self, child_values: np.ndarray) -> np.ndarray:
        """Reshape a level array ``(n*2**d, ...)`` to ``(n, 2**d, ...)``."""
        n = child_values.shape[0] // self.branching
        return child_values.reshape((n, self.branching) + child_values.shape[1:])

    def average_children(self, child_values: np.ndarray) -> np.ndarray:
        return self.children_view(child_values).mean(axis=1)

    def dump_csv(self, path: str | Path) -> None:
        """Write (level, node_index, parent_index, B_1..B_d, prob_of_path)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["level", "node_index", "parent_index"]
                + [f"B_{i + 1}" for i in range(self.d)]
                + ["prob_of_path"]
            )
            for k in range(self.K + 1):
                parents = self.parent_index(k)
                p = self.prob**k
                for n in range(self.n_nodes(k)):
                    w.writerow([k, n, int(parents[n]), *map(repr, self.B[k][n].tolist()), repr(p)])


def build_lattice(
    tau: float, T: float, K: int, d: int, max_nodes: int = DEFAULT_MAX_NODES
) -> LatticeSpace:
    if int(d) != d or d < 1:
        raise ValueError(f"d must be a positive integer, got {d}")
    grid = TimeGrid(float(tau), float(T), int(K))
    b = 2**d
    total = (b ** (K + 1) - 1) // (b - 1)
    if total > max_nodes:
        raise CapacityError(
            f"lattice with K={K}, d={d} needs {total} nodes, cap is {max_nodes}"
        )
    # one row per branch, all 2**d sign patterns
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=d)))
    inc = signs * math.sqrt(grid.dt)
    levels = [np.zeros((1, d))]
    for _ in range(K):
        prev = levels[-1]
        levels.append((prev[:, None, :] + inc[None, :, :]).reshape(-1, d))
    for arr in levels:
        arr.setflags(write=False)
    signs.setflags(write=False)
    return LatticeSpace(grid=grid, d=int(d), signs=signs, B=tuple(levels))


def branch_moments(space: LatticeSpace) -> tuple[float, np.ndarray, np.ndarray]:
    """Per-node (total child probability, E[dB], E[dB dB^T]).

    Every node has the same children, so one evaluation covers all nodes.
    """
    p = np.full(space.branching, space.prob)
    inc = space.increments
    return float(p.sum()), p @ inc, (inc * p[:, None]).T @ inc


@dataclass(eq=False)
class AdaptedProcess:
    """Vector-valued process on levels ``start .. start + len(values) - 1``.

    ``values[i]`` has shape ``(n_nodes(start + i), dim)``.
    """

    space: LatticeSpace
    start: int
    values: list

    def __post_init__(self):
        self.values = [np.asarray(v, dtype=float) for v in self.values]
        if not self.values:
            raise ValueError("process needs at least one level")
        dims = {v.shape[1] for v in self.values}
        if len(dims) != 1:
            raise ValueError(f"inconsistent dimension across levels: {dims}")
        for i, v in enumerate(self.values):
            k = self.start + i
            if v.ndim != 2 or v.shape[0] != self.space.n_nodes(k):
                raise ValueError(f"level {k}: expected {self.space.n_nodes(k)} rows, got {v.shape}")
        if self.end > self.space.K:
            raise LevelRangeError(f"process ends at level {self.end} > K={self.space.K}")

    @property
    def end(self) -> int:
        return self.start + len(self.values) - 1

    @property
    def dim(self) -> int:
        return self.values[0].shape[1]

    def at(self, k: int) -> np.ndarray:
        if not self.start <= k <= self.end:
            raise LevelRangeError(f"level {k} outside [{self.start}, {self.end}]")
        return self.values[k - self.start]

    def levels(self) -> range:
        return range(self.start, self.end + 1)

    def restrict(self, a: int, b: int) -> "AdaptedProcess":
        if not self.start <= a <= b <= self.end:
            raise LevelRangeError(f"[{a}, {b}] not inside [{self.start}, {self.end}]")
        return type(self)(self.space, a, [v.copy() for v in self.values[a - self.start : b - self.start + 1]])

    def _binary(self, other, op):
        if isinstance(other, AdaptedProcess):
            if other.space is not self.space or other.start != self.start or other.end != self.end:
                raise ValueError("processes live on different windows")
            vals = [op(a, b) for a, b in zip(self.values, other.values)]
        else:
            vals = [op(a, np.asarray(other, dtype=float)) for a in self.values]
        return AdaptedProcess(self.space, self.start, vals)

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, scalar):
        return AdaptedProcess(self.space, self.start, [a * scalar for a in self.values])

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def max_abs_diff(self, other: "AdaptedProcess") -> float:
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.values, other.values))

    @classmethod
    def zeros(cls, space: LatticeSpace, start: int, end: int, dim: int):
        return cls(space, start, [np.zeros((space.n_nodes(k), dim)) for k in range(start, end + 1)])

    @classmethod
    def deterministic(cls, space: LatticeSpace, start: int, end: int, fn):
        """Process whose level-k value is ``fn(t_k)`` (scalar or vector) at every node."""
        vals = []
        for k in range(start, end + 1):
            v = np.atleast_1d(np.asarray(fn(space.t(k)), dtype=float))
            vals.append(np.tile(v, (space.n_nodes(k), 1)))
        return cls(space, start, vals)

    @classmethod
    def driver(cls, space: LatticeSpace, start: int = 0, end: int | None = None):
        """The Brownian driver path ``B`` itself as a process (dim d)."""
        end = space.K if end is None else end
        return cls(space, start, [np.array(space.B[k]) for k in range(start, end + 1)])


class MartingaleProcess(AdaptedProcess):
    def martingale_defect(self) -> np.ndarray:
        """Per-level max |value(n) - sum_c prob(c) value(c)| over non-terminal nodes."""
        return np.array(
            [
                np.max(np.abs(self.at(k) - self.space.average_children(self.at(k + 1))))
                for k in range(self.start, self.end)
            ]
        )

    def _binary(self, other, op):
        out = super()._binary(other, op)
        if isinstance(other, MartingaleProcess) or not isinstance(other, AdaptedProcess):
            return MartingaleProcess(out.space, out.start, out.values)
        return out

    def __mul__(self, scalar):
        return MartingaleProcess(self.space, self.start, [a * scalar for a in self.values])

    __rmul__ = __mul__


@dataclass(eq=False)
class TerminalCondition:
    """Random variable measurable at ``level`` (defaults to the terminal level K)."""

    space: LatticeSpace
    values: np.ndarray
    level: int | None = None

    def __post_init__(self):
        if self.level is None:
            self.level = self.space.K
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.space.n_nodes(self.level):
            raise ValueError(
                f"terminal values need {self.space.n_nodes(self.level)} rows, got {v.shape[0]}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError("terminal condition has non-finite values")
        self.values = v

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_function(cls, space: LatticeSpace, phi, level: int | None = None):
        """``phi`` maps the driver values ``(n, d)`` at ``level`` to ``(n,)`` or ``(n, dim)``."""
        level = space.K if level is None else level
        return cls(space, np.asarray(phi(np.asarray(space.B[level])), dtype=float), level)


def cond_expect(X, k: int) -> MartingaleProcess:
    """Exact E(X | F_j) for every level j in [k, k'] by backward averaging.

    ``X`` is a TerminalCondition (k' = its level) or an AdaptedProcess (k' = its
    last level; only the last level is used).
    """
    if isinstance(X, TerminalCondition):
        space, top, last = X.space, X.level, X.values
    else:
        space, top, last = X.space, X.end, X.at(X.end)
    if k > top:
        raise LevelRangeError(f"level {k} is after the measurability level {top}")
    if k < 0:
        raise LevelRangeError(f"negative level {k}")
    out = [np.array(last, dtype=float)]
    for _ in range(top - k):
        out.append(space.average_children(out[-1]))
    out.reverse()
    return MartingaleProcess(space, k, out)


def _running_sup_sq(V: AdaptedProcess) -> np.ndarray:
    run = V.values[0] ** 2
    for k in range(V.start + 1, V.end + 1):
        run = np.maximum(V.space.expand(run, k - 1, k), V.at(k) ** 2)
    return run


def norm_c(V: AdaptedProcess, levels: Sequence[int] | None = None) -> float:
    """sqrt(sum_j E max_k |V^j_k|^2) with the max taken along each root-to-leaf path.

    ``levels`` restricts the pathwise sup to a subset of the process levels.
    """
    if levels is not None:
        keep = set(levels)
        masked = [v if (V.start + i) in keep else np.zeros_like(v) for i, v in enumerate(V.values)]
        V = AdaptedProcess(V.space, V.start, masked)
    # leaves of the window are equiprobable
    return math.sqrt(float(_running_sup_sq(V).mean(axis=0).sum()))


def norm_h2(Z: AdaptedProcess) -> float:
    """Left-endpoint discretisation of sqrt(E int |Z|^2 ds); the last level is unused."""
    dt = Z.space.dt
    total = 0.0
    for k in range(Z.start, Z.end):
        total += float(np.mean(np.sum(Z.at(k) ** 2, axis=1))) * dt
    return math.sqrt(total)
