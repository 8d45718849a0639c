"""Exit problems from the interior of an unstable limit cycle.

Asymptotic boundary-layer spectrum, Monte Carlo exit statistics and a
finite-difference oracle for planar drift-diffusion systems.
"""
from .cycle import LimitCycle, boundary_frame, find_limit_cycle
from .dynamics import BUILTINS, DriftDiffusionSystem, make_builtin
from .periodic_ode import k0_boundary, solve_phi, solve_xi, solve_xi_transport
from .spectrum import eigenvalue_lattice, frequencies
from .wkb import eikonal_psi_hat, mfpt, solve_riccati

__all__ = [
    "BUILTINS",
    "DriftDiffusionSystem",
    "LimitCycle",
    "boundary_frame",
    "eigenvalue_lattice",
    "eikonal_psi_hat",
    "find_limit_cycle",
    "frequencies",
    "k0_boundary",
    "make_builtin",
    "mfpt",
    "solve_phi",
    "solve_riccati",
    "solve_xi",
    "solve_xi_transport",
]
__version__ = "0.1.0"
