"""Run configuration (JSON) and the named driver / terminal / L catalogs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .functionals import (
    DriverSpec,
    LFunctionalSpec,
    density_functional,
    dirac_weights,
    kernel_functional,
    lebesgue_weights,
    quadratic_functional,
    schur_bound,
)
from .lattice import DEFAULT_MAX_NODES, LatticeSpace, TerminalCondition, build_lattice


class ConfigError(ValueError):
    pass


@dataclass
class ProblemConfig:
    tau: float = 0.0
    T: float = 1.0
    K: int = 8
    d: int = 1
    d_prime: int = 1
    mprime: int | None = None
    driver: dict = field(default_factory=lambda: {"kind": "zero"})
    terminal: dict = field(default_factory=lambda: {"kind": "coordinate"})
    L: dict = field(default_factory=lambda: {"name": "density"})


@dataclass
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 200
    safety: float = 0.9
    mode: str = "auto"  # auto | local | global
    override_horizon: bool = False
    max_nodes: int = DEFAULT_MAX_NODES
    oracle_check: bool = False


@dataclass
class OutputConfig:
    directory: str = "out"
    solution_csv: bool = True
    convergence_csv: bool = True
    aggregate_only: bool = False


@dataclass
class PdeConfig:
    X: float = 3.0
    dx: float = 0.02
    probes: list = field(default_factory=lambda: [[0.0, 0.0]])
    threshold: float = 0.05
    lam: float = 0.2


@dataclass
class StudyConfig:
    K_values: list = field(default_factory=lambda: [4, 8, 16])
    kind: str = "linear"  # linear | zero | pde
    dx_values: list | None = None


@dataclass
class RunConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)
    pde: PdeConfig = field(default_factory=PdeConfig)
    study: StudyConfig = field(default_factory=StudyConfig)
    base_dir: Path = field(default_factory=Path.cwd, repr=False)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration root must be an object")
        known = {"problem", "solver", "outputs", "pde", "study"}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown configuration sections: {sorted(extra)}")
        parts = {}
        for name, klass in [
            ("problem", ProblemConfig), ("solver", SolverConfig), ("outputs", OutputConfig),
            ("pde", PdeConfig), ("study", StudyConfig),
        ]:
            section = raw.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section '{name}' must be an object")
            try:
                parts[name] = klass(**section)
            except TypeError as exc:
                raise ConfigError(f"section '{name}': {exc}") from None
        cfg = cls(**parts, base_dir=base_dir or Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent)

    def validate(self) -> None:
        p, s = self.problem, self.solver
        if not p.T > p.tau:
            raise ConfigError("problem.T must exceed problem.tau")
        for name in ("K", "d", "d_prime"):
            v = getattr(p, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"problem.{name} must be a positive integer")
        if p.mprime is not None and (not isinstance(p.mprime, int) or p.mprime < 1):
            raise ConfigError("problem.mprime must be a positive integer")
        b = 2**p.d
        if (b ** (p.K + 1) - 1) // (b - 1) > s.max_nodes:
            raise ConfigError(f"lattice K={p.K}, d={p.d} exceeds the node cap {s.max_nodes}")
        if s.mode not in ("auto", "local", "global"):
            raise ConfigError("solver.mode must be auto, local or global")
        if not 0 < s.safety <= 1:
            raise ConfigError("solver.safety must lie in (0, 1]")
        if s.tol <= 0 or s.max_iter < 1:
            raise ConfigError("solver.tol must be positive and max_iter >= 1")
        if self.study.kind not in ("linear", "zero", "pde"):
            raise ConfigError("study.kind must be linear, zero or pde")
        # build once so catalog errors surface as configuration errors
        self.build_L()
        self.build_driver()
        terminal_function(p.terminal)

    # --- builders ---------------------------------------------------------

    def lattice(self) -> LatticeSpace:
        p = self.problem
        return build_lattice(p.tau, p.T, p.K, p.d, self.solver.max_nodes)

    def build_L(self) -> LFunctionalSpec:
        return build_L(self.problem.L, self.problem, self.base_dir)

    def build_driver(self) -> DriverSpec:
        p = self.problem
        L = self.build_L()
        return build_driver(p.driver, p.d_prime, L.m(p.d_prime, p.d), p.d)

    def terminal(self, space: LatticeSpace) -> TerminalCondition:
        phi = terminal_function(self.problem.terminal)
        dp = self.problem.d_prime
        return TerminalCondition.from_function(space, lambda B: np.repeat(phi(B)[:, None], dp, axis=1))


def _num(entry: dict, key: str, default: float | None = None) -> float:
    if key not in entry:
        if default is None:
            raise ConfigError(f"missing parameter '{key}' in {entry}")
        return default
    v = entry[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"parameter '{key}' must be a finite number")
    return float(v)


def _coord(entry: dict) -> int:
    i = entry.get("i", 0)
    if not isinstance(i, int) or i < 0:
        raise ConfigError("terminal coordinate 'i' must be a non-negative integer")
    return i


def terminal_function(entry: dict):
    """phi(B_T) as a function of the driver array (n, d) -> (n,)."""
    kind = entry.get("kind")
    x0 = _num(entry, "x0", 0.0)
    if kind == "constant":
        c = _num(entry, "c", 1.0)
        return lambda B: np.full(B.shape[0], c)
    i = _coord(entry)
    pick = lambda B: x0 + B[:, i] if i < B.shape[1] else _bad_coord(i, B)
    if kind == "coordinate":
        s = _num(entry, "scale", 1.0)
        return lambda B: s * pick(B)
    if kind == "square":
        return lambda B: pick(B) ** 2
    if kind == "clipped_square":
        cap = _num(entry, "cap", 4.0)
        return lambda B: np.minimum(pick(B) ** 2, cap)
    if kind == "clipped_call":
        strike, cap = _num(entry, "strike", 0.0), _num(entry, "cap", 1.0)
        return lambda B: np.clip(pick(B) - strike, 0.0, cap)
    raise ConfigError(f"unknown terminal kind {kind!r}")


def _bad_coord(i, B):
    raise ConfigError(f"terminal coordinate {i} out of range for d={B.shape[1]}")


def scalar_terminal(entry: dict):
    """The same terminal function evaluated on a 1-d array of points."""
    phi = terminal_function(entry)
    return lambda x: phi(np.atleast_1d(np.asarray(x, dtype=float))[:, None])


def build_L(entry: dict, problem: ProblemConfig, base_dir: Path) -> LFunctionalSpec:
    name = entry.get("name")
    C1 = entry.get("C1")
    if C1 is not None and not isinstance(C1, str):
        C1 = _num(entry, "C1")
    if name == "density":
        return density_functional(problem.d, C1)
    if name == "quadratic":
        if C1 is None or isinstance(C1, str):
            raise ConfigError("L 'quadratic' needs a declared numeric C1 (no closed-form constant is known)")
        return quadratic_functional(C1)
    if name == "kernel":
        w = _kernel_weights(entry.get("weights", "dirac"), problem, base_dir)
        if C1 is None:
            raise ConfigError("L 'kernel' needs C1: a number or \"schur\" to confirm the computed bound")
        if C1 == "schur":
            C1 = math.sqrt(problem.d) * schur_bound(w)
        elif isinstance(C1, str):
            raise ConfigError(f"unknown C1 value {C1!r}")
        return kernel_functional(w, problem.d, C1)
    raise ConfigError(f"unknown L functional {name!r} (expected density, quadratic or kernel)")


def _kernel_weights(src: Any, problem: ProblemConfig, base_dir: Path) -> np.ndarray:
    K = problem.K
    if src == "dirac":
        return dirac_weights(K)
    if src == "lebesgue":
        return lebesgue_weights(K, (problem.T - problem.tau) / K)
    if not isinstance(src, str):
        raise ConfigError("kernel weights must be 'dirac', 'lebesgue' or a CSV path")
    path = Path(src)
    if not path.is_absolute():
        path = base_dir / path
    try:
        w = np.loadtxt(path, delimiter=",", ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read kernel weights {path}: {exc}") from None
    if w.shape != (K, K):
        raise ConfigError(f"kernel weights {path} must be {K}x{K}, got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError("kernel weights must be finite and non-negative")
    return w


def build_driver(entry: dict, d_prime: int, m: int, d: int) -> DriverSpec:
    kind = entry.get("kind", "zero")
    zsum = lambda z: z.reshape(z.shape[0], d_prime, -1).sum(axis=2)
    zfac = math.sqrt(m / d_prime) if m % d_prime == 0 else None
    if kind in ("linear_yz", "clip_yz") and zfac is None:
        raise ConfigError(f"L output dimension {m} is not a multiple of d'={d_prime}")
    if kind == "zero":
        f0, C2 = (lambda t, y, z: np.zeros_like(y)), 0.0
    elif kind == "constant":
        c = _num(entry, "c", 1.0)
        f0, C2 = (lambda t, y, z: np.full_like(y, c)), abs(c)
    elif kind == "linear_y":
        a = _num(entry, "a")
        f0, C2 = (lambda t, y, z: a * y), abs(a)
    elif kind == "linear_yz":
        a, b = _num(entry, "a", 0.0), _num(entry, "b", 0.0)
        f0, C2 = (lambda t, y, z: a * y + b * zsum(z)), max(abs(a), abs(b) * zfac)
    elif kind == "sin_y":
        a = _num(entry, "a")
        f0, C2 = (lambda t, y, z: a * np.sin(y)), abs(a)
    elif kind == "clip_yz":
        a, b, c = _num(entry, "a", 0.0), _num(entry, "b", 0.0), _num(entry, "c", 1.0)
        f0 = lambda t, y, z: a * np.clip(y, -c, c) + b * np.clip(zsum(z), -c, c)
        C2 = max(abs(a), abs(b) * zfac)
    else:
        raise ConfigError(f"unknown driver kind {kind!r}")

    diff = entry.get("diffusion", {"kind": "zero"})
    dkind = diff.get("kind", "zero")
    s = _num(diff, "s", 0.0) if dkind != "zero" else 0.0
    if dkind == "zero":
        fi = lambda t, y: np.zeros_like(y)
    elif dkind == "constant":
        fi = lambda t, y: np.full_like(y, s)
    elif dkind == "linear":
        fi = lambda t, y: s * y
    elif dkind == "sin":
        fi = lambda t, y: s * np.sin(y)
    else:
        raise ConfigError(f"unknown diffusion kind {dkind!r}")
    C2 = max(C2, abs(s))
    if "C2" in entry:
        declared = _num(entry, "C2")
        if declared < C2:
            raise ConfigError(f"declared C2={declared} is below the catalog constant {C2}")
        C2 = declared
    return DriverSpec(d_prime, m, f0, [fi] * d, C2, kind)
