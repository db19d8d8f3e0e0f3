"""BSDEs as functional fixed-point equations, solved exactly on a symmetric random-walk lattice."""

from .functionals import (
    DriverSpec,
    LFunctionalSpec,
    density_functional,
    kernel_functional,
    l_density,
    l_kernel,
    l_quadratic,
    m_of_v,
    quadratic_functional,
    y_of_v,
)
from .lattice import (
    AdaptedProcess,
    LatticeSpace,
    MartingaleProcess,
    TerminalCondition,
    build_lattice,
    cond_expect,
    norm_c,
    norm_h2,
)
from .oracles import cross_validate, discrete_linear_oracle, solve_nonlocal_pde
from .solver import (
    Solution,
    SolveReport,
    contraction_bound,
    global_solve,
    local_solve,
    picard_map,
    step_bound,
    verify_solution,
)

__all__ = [
    "AdaptedProcess", "DriverSpec", "LFunctionalSpec", "LatticeSpace", "MartingaleProcess", "Solution",
    "SolveReport", "TerminalCondition", "build_lattice", "cond_expect", "contraction_bound", "cross_validate",
    "density_functional", "discrete_linear_oracle", "global_solve", "kernel_functional", "l_density", "l_kernel",
    "l_quadratic", "local_solve", "m_of_v", "norm_c", "norm_h2", "picard_map", "quadratic_functional",
    "solve_nonlocal_pde", "step_bound", "verify_solution", "y_of_v",
]
