"""
Periodic layer-width problems on the cycle
==========================================

The layer width ``xi(s)`` is the positive periodic solution of

    B xi' + a0 xi - sigma xi^3 = 0,

obtained through ``u = xi^-2``, which turns it into the linear periodic problem
``u' = (2 a0 u - 2 sigma) / B``. ``phi = -xi^2`` solves the companion equation
``sigma phi^2 + a0 phi + B phi' / 2 = 0`` and the transport form

    sigma xi^3 + (a0 + 2 sigma phi) xi + B xi' = 0

is solved independently (forward-stable in ``u``) as a consistency check.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _periodic
from ._io import write_csv
from .cycle import BoundaryFrame

__all__ = [
    "PeriodicSolution",
    "solve_xi",
    "solve_phi",
    "solve_xi_transport",
    "k0_boundary",
    "write_periodic_csv",
]


@dataclass(frozen=True, eq=False)
class PeriodicSolution:
    """Samples of an ``S``-periodic function on the frame grid.

    ``residual`` is the relative sup-norm ODE residual (on the grid and on the
    half-shifted grid), normalized by the largest term of the equation.
    """

    s_grid: np.ndarray
    values: np.ndarray
    label: str
    total_length: float
    residual: float = float("nan")

    def __post_init__(self):
        v = np.array(self.values)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __call__(self, s):
        return _periodic.evaluate(self.values, self.total_length, s)

    def derivative(self) -> np.ndarray:
        return _periodic.derivative(self.values, self.total_length)

    def integral(self):
        return _periodic.integral(self.values, self.total_length)


def _relative_residual(terms, period) -> float:
    """sup |sum(terms)| / sup max|term| on the grid and the half-shifted grid."""
    out = 0.0
    n = terms[0].shape[0]
    for delta in (0.0, 0.5 * period / n):
        vals = [_periodic.shifted(t, period, delta) if delta else t for t in terms]
        total = np.abs(np.sum(vals, axis=0))
        scale = np.max(np.abs(vals), axis=0)
        out = max(out, float(np.max(total / np.max(scale))))
    return out


def _instability(frame: BoundaryFrame) -> float:
    return float(_periodic.integral(frame.a0 / frame.B, frame.total_length))


def _check_frame(frame: BoundaryFrame):
    if np.any(frame.B <= 0) or np.any(frame.sigma <= 0):
        raise ValueError("frame must have B > 0 and sigma > 0")
    m = _instability(frame)
    scale = float(_periodic.integral(np.abs(frame.a0) / frame.B, frame.total_length))
    if abs(m) <= 1e-12 * max(scale, 1.0):
        raise ValueError("degenerate: only xi = 0 periodic solution (mean of a0/B vanishes)")
    if m < 0:
        raise ValueError("no positive periodic solution: the cycle is not unstable in the mean")


def _xi_residual(frame, xi):
    S = frame.total_length
    # B xi' written as -(B/2) u' u^{-3/2}; spectral derivative of xi directly
    dxi = _periodic.derivative(xi, S)
    return _relative_residual([frame.B * dxi, frame.a0 * xi, -frame.sigma * xi**3], S)


def solve_xi(frame: BoundaryFrame) -> PeriodicSolution:
    """Positive periodic solution of ``B xi' + a0 xi - sigma xi^3 = 0``."""
    _check_frame(frame)
    S = frame.total_length
    u = _periodic.solve_linear_periodic(2 * frame.a0 / frame.B, -2 * frame.sigma / frame.B, S)
    if np.any(u <= 0):
        raise ValueError("inconsistent frame: u = xi^-2 not positive")
    xi = u**-0.5
    return PeriodicSolution(frame.s_grid, xi, "xi", S, _xi_residual(frame, xi))


def solve_phi(frame: BoundaryFrame, xi: PeriodicSolution | None = None, tol: float = 1e-8) -> PeriodicSolution:
    """Negative periodic solution ``phi = -xi^2``, residual-checked against its own equation."""
    if xi is None:
        xi = solve_xi(frame)
    S = frame.total_length
    phi = -np.asarray(xi.values) ** 2
    dphi = _periodic.derivative(phi, S)
    res = _relative_residual([frame.sigma * phi**2, frame.a0 * phi, 0.5 * frame.B * dphi], S)
    if res > tol:
        raise ValueError(f"phi residual {res:.3g} exceeds {tol:.1g}: frame under-resolved or inconsistent")
    return PeriodicSolution(frame.s_grid, phi, "phi", S, res)


def solve_xi_transport(
    frame: BoundaryFrame, phi: PeriodicSolution, xi: PeriodicSolution | None = None, tol: float = 1e-8
) -> PeriodicSolution:
    """Positive periodic solution of ``sigma xi^3 + (a0 + 2 sigma phi) xi + B xi' = 0``.

    In ``u = xi^-2`` this reads ``u' = 2 (a0 + 2 sigma phi) u / B + 2 sigma / B``,
    whose growth rate has negative mean, so it is solved by the forward recursion.
    If ``xi`` is given, the two solutions must agree to ``tol`` relative to
    ``max xi``.
    """
    _check_frame(frame)
    S = frame.total_length
    ph = np.asarray(phi.values, dtype=float)
    p = 2 * (frame.a0 + 2 * frame.sigma * ph) / frame.B
    u = _periodic.solve_linear_periodic(p, 2 * frame.sigma / frame.B, S)
    if np.any(u <= 0):
        raise ValueError("transport form has no positive periodic solution")
    xi0 = u**-0.5
    dxi0 = _periodic.derivative(xi0, S)
    res = _relative_residual(
        [frame.sigma * xi0**3, (frame.a0 + 2 * frame.sigma * ph) * xi0, frame.B * dxi0], S
    )
    if xi is not None:
        gap = float(np.max(np.abs(xi0 - xi.values)) / np.max(np.abs(xi.values)))
        if gap > tol:
            raise ValueError(f"transport-form xi disagrees with the Bernoulli xi by {gap:.3g} (relative)")
    return PeriodicSolution(frame.s_grid, xi0, "xi0", S, res)


def k0_boundary(frame: BoundaryFrame, xi: PeriodicSolution, tol: float = 1e-6) -> PeriodicSolution:
    """Boundary transport coefficient ``K0(s) = exp(-int_0^s (a0 - sigma xi^2)/B) / B``, ``K0(0) = 1``.

    The residual field stores the relative deviation from ``xi(s) B(0) / (xi(0) B(s))``.
    """
    S = frame.total_length
    x = np.asarray(xi.values)
    g = (frame.a0 - frame.sigma * x**2) / frame.B
    defect_exp = float(_periodic.integral(g, S))
    if abs(np.expm1(-defect_exp)) > tol:
        raise ValueError(f"K0 periodicity defect {abs(np.expm1(-defect_exp)):.3g}: bad xi")
    G = _periodic.cumulative(g, S)
    K = frame.B[0] / frame.B * np.exp(-G)
    other = x * frame.B[0] / (x[0] * frame.B)
    dev = float(np.max(np.abs(K / other - 1.0)))
    return PeriodicSolution(frame.s_grid, K, "K0", S, dev)


def write_periodic_csv(path, xi: PeriodicSolution, phi: PeriodicSolution, k0: PeriodicSolution, stride: int = 1) -> None:
    k = slice(None, None, int(stride))
    write_csv(path, ["s", "xi", "phi", "K0"], [xi.s_grid[k], xi.values[k], phi.values[k], k0.values[k]])
