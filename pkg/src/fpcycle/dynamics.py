"""
Planar drift-diffusion systems
==============================

A system is the SDE ``dx = a(x) dt + sqrt(2 eps) b(x) dw`` in the plane together
with the stable focus of its drift. Two builtins are provided:

``fig1``
    ``a(x, y) = [y, -x - y (1 - x^2 - y^2)]``, ``b = I``. Stable focus at the
    origin inside the unstable unit circle.
``ht_upstate``
    Up-state branch of the synaptic-depression network model (depression
    variable ``x``, voltage ``y``), noise only on the voltage.

Every builtin also ships numba-compiled copies of its fields so the Monte Carlo
kernels can call them without Python overhead.
"""
from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any

import numpy as np
from numba import njit

__all__ = [
    "CompiledFields",
    "DriftDiffusionSystem",
    "BUILTINS",
    "builtin_parameters",
    "make_builtin",
    "jacobian_at",
    "find_equilibrium",
    "is_stable_focus",
]


@dataclass(frozen=True)
class CompiledFields:
    """numba-compiled drift and noise factor.

    ``drift(x1, x2, params) -> (a1, a2)`` and
    ``noise(x1, x2, params) -> (b11, b12, b21, b22)``.
    """

    drift: Any
    noise: Any
    params: np.ndarray


@dataclass(frozen=True, eq=False)
class DriftDiffusionSystem:
    """Planar SDE ``dx = a(x) dt + sqrt(2 eps) b(x) dw`` with a stable focus.

    Parameters
    ----------
    name : str
        Identifier.
    drift : callable
        Vectorized ``(..., 2) -> (..., 2)``.
    diffusion_factor : callable
        Vectorized ``(..., 2) -> (..., 2, 2)``, the matrix ``b(x)``.
    epsilon : float
        Noise intensity.
    focus : array_like
        Stable focus of the drift.
    params : mapping
        Resolved parameter table the system was built from.
    analytic_jacobian : callable, optional
        ``(2,) -> (2, 2)``; checked against finite differences when used.
    sigma_floor : float
        ``delta`` in the regularized diffusion matrix ``b b^T + delta I`` used by
        the asymptotic theory. Simulation always uses the exact ``b``.
    compiled : CompiledFields, optional
        Fields for the Monte Carlo kernels.
    """

    name: str
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion_factor: Callable[[np.ndarray], np.ndarray]
    epsilon: float
    focus: np.ndarray
    params: Mapping[str, float] = field(default_factory=dict)
    analytic_jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    sigma_floor: float = 0.0
    compiled: CompiledFields | None = None

    def __post_init__(self):
        focus = np.array(self.focus, dtype=float).reshape(2)
        focus.setflags(write=False)
        object.__setattr__(self, "focus", focus)
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if self.sigma_floor < 0:
            raise ValueError("sigma_floor must be nonnegative")
        a0 = np.asarray(self.drift(focus), dtype=float)
        if not np.all(np.isfinite(a0)) or np.max(np.abs(a0)) > 1e-10:
            raise ValueError(f"drift does not vanish at the focus {focus}: a = {a0}")
        if not is_stable_focus(jacobian_at(self, focus)):
            raise ValueError(f"{self.name}: equilibrium {focus} is not a stable focus")

    def sigma(self, x, regularized: bool = True) -> np.ndarray:
        """Diffusion matrix ``b b^T`` (plus ``sigma_floor * I`` if regularized)."""
        b = np.asarray(self.diffusion_factor(np.asarray(x, dtype=float)))
        s = b @ np.swapaxes(b, -1, -2)
        if regularized and self.sigma_floor > 0:
            s = s + self.sigma_floor * np.eye(2)
        return s


def jacobian_at(system: DriftDiffusionSystem, point, step: float = 1e-5) -> np.ndarray:
    """Jacobian ``da/dx`` of the drift at ``point``.

    Uses the registered analytic Jacobian when there is one, after checking it
    against central differences (1e-6 relative); otherwise returns the
    central-difference estimate.
    """
    p = np.asarray(point, dtype=float).reshape(2)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"non-finite point {p}")
    fd = np.empty((2, 2))
    for j in range(2):
        h = step * max(1.0, abs(p[j]))
        e = np.zeros(2)
        e[j] = h
        ap = np.asarray(system.drift(p + e), dtype=float)
        am = np.asarray(system.drift(p - e), dtype=float)
        if not (np.all(np.isfinite(ap)) and np.all(np.isfinite(am))):
            raise ValueError(f"non-finite drift near {p}")
        fd[:, j] = (ap - am) / (2 * h)
    if system.analytic_jacobian is None:
        return fd
    an = np.asarray(system.analytic_jacobian(p), dtype=float)
    scale = max(1.0, float(np.max(np.abs(an))))
    if np.max(np.abs(an - fd)) > 1e-6 * scale:
        raise ValueError(
            f"analytic Jacobian of {system.name} disagrees with finite differences at {p}"
        )
    return an


def is_stable_focus(jac) -> bool:
    ev = np.linalg.eigvals(np.asarray(jac, dtype=float))
    return bool(abs(ev[0].imag) > 0 and np.all(ev.real < 0))


def find_equilibrium(drift, x0, jacobian=None, tol: float = 1e-12, max_iter: int = 100):
    """Damped Newton iteration for ``drift(x) = 0`` started at ``x0``.

    Returns the root, or ``None`` if the iteration stalls.
    """
    x = np.array(x0, dtype=float)

    def jac(p):
        if jacobian is not None:
            return jacobian(p)
        J = np.empty((2, 2))
        for j in range(2):
            h = 1e-7 * max(1.0, abs(p[j]))
            e = np.zeros(2)
            e[j] = h
            J[:, j] = (drift(p + e) - drift(p - e)) / (2 * h)
        return J

    f = np.asarray(drift(x), dtype=float)
    for _ in range(max_iter):
        nf = np.linalg.norm(f)
        if nf <= tol:
            return x
        try:
            dx = np.linalg.solve(jac(x), -f)
        except np.linalg.LinAlgError:
            return None
        alpha = 1.0
        while alpha > 1e-6:
            xn = x + alpha * dx
            fn = np.asarray(drift(xn), dtype=float)
            if np.all(np.isfinite(fn)) and np.linalg.norm(fn) < (1 - 1e-4 * alpha) * nf:
                break
            alpha *= 0.5
        else:
            return None
        x, f = xn, fn
    return x if np.linalg.norm(f) <= tol * 1e3 else None


# ---------------------------------------------------------------------------
# fig1: a = [y, -x - y (1 - x^2 - y^2)], b = I


def _fig1_drift(x):
    x = np.asarray(x, dtype=float)
    X, Y = x[..., 0], x[..., 1]
    return np.stack([Y, -X - Y * (1.0 - X * X - Y * Y)], axis=-1)


def _fig1_jacobian(x):
    X, Y = x
    return np.array([[0.0, 1.0], [-1.0 + 2 * X * Y, -(1.0 - X * X - Y * Y) + 2 * Y * Y]])


def _fig1_noise(x):
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()


@njit(cache=True)
def _fig1_drift_nb(x1, x2, p):
    return x2, -x1 - x2 * (1.0 - x1 * x1 - x2 * x2)


@njit(cache=True)
def _fig1_noise_nb(x1, x2, p):
    return 1.0, 0.0, 0.0, 1.0


def _make_fig1(params):
    return DriftDiffusionSystem(
        name="fig1",
        drift=_fig1_drift,
        diffusion_factor=_fig1_noise,
        epsilon=params["epsilon"],
        focus=(0.0, 0.0),
        params=params,
        analytic_jacobian=_fig1_jacobian,
        compiled=CompiledFields(_fig1_drift_nb, _fig1_noise_nb, np.zeros(1)),
    )


# ---------------------------------------------------------------------------
# ht_upstate: Up-state branch of the depression model, noise on y only


def _step(u, width):
    if width > 0:
        return 0.5 * (1.0 + np.tanh(u / width))
    return (u > 0).astype(float) if isinstance(u, np.ndarray) else float(u > 0)


def _make_ht(params):
    tau, t_r, U, w_T, T = (params[k] for k in ("tau", "t_r", "U", "w_T", "T"))
    noise_sd = params["sigma"] / math.sqrt(tau)
    width = params["ramp_width"]

    def drift(x):
        x = np.asarray(x, dtype=float)
        X, Y = x[..., 0], x[..., 1]
        u = Y - T
        g = u * _step(u, width)
        return np.stack([(1.0 - X) / t_r - U * X * g, -Y / tau + X * U * w_T * g / tau], axis=-1)

    def jacobian(x):
        X, Y = x
        u = Y - T
        if width > 0:
            h = _step(u, width)
            dg = h + u * 0.5 / width / np.cosh(u / width) ** 2
        else:
            h = float(u > 0)
            dg = h
        g = u * h
        return np.array(
            [[-1.0 / t_r - U * g, -U * X * dg], [U * w_T * g / tau, (-1.0 + X * U * w_T * dg) / tau]]
        )

    def noise(x):
        x = np.asarray(x, dtype=float)
        b = np.zeros(x.shape[:-1] + (2, 2))
        b[..., 1, 1] = noise_sd
        return b

    focus = _ht_focus(drift, jacobian, T)
    floor = params["sigma_floor_factor"] * params["sigma"] ** 2 / tau
    cparams = np.array([tau, t_r, U, w_T, T, noise_sd, width])
    return DriftDiffusionSystem(
        name="ht_upstate",
        drift=drift,
        diffusion_factor=noise,
        epsilon=params["epsilon"],
        focus=focus,
        params=params,
        analytic_jacobian=jacobian,
        sigma_floor=floor,
        compiled=CompiledFields(_ht_drift_nb, _ht_noise_nb, cparams),
    )


def _ht_focus(drift, jacobian, T):
    # coarse scan of the Up-state half plane, then damped Newton from the best cells
    xs = np.linspace(0.005, 0.995, 60)
    us = np.geomspace(1e-3, 1e3, 80)
    X, Uu = np.meshgrid(xs, us, indexing="ij")
    pts = np.stack([X, T + Uu], axis=-1)
    a = drift(pts)
    scale = np.max(np.abs(a.reshape(-1, 2)), axis=0)
    r = np.hypot(a[..., 0] / scale[0], a[..., 1] / scale[1]).ravel()
    roots = []
    for k in np.argsort(r)[:40]:
        x = find_equilibrium(drift, pts.reshape(-1, 2)[k], jacobian)
        if x is None or not x[1] > T:
            continue
        if any(np.allclose(x, y, rtol=1e-8, atol=1e-10) for y in roots):
            continue
        roots.append(x)
    foci = [x for x in roots if is_stable_focus(jacobian(x))]
    if not foci:
        raise ValueError("ht_upstate: parameters yield no stable focus in the Up state")
    return foci[0]


@njit(cache=True)
def _ht_drift_nb(x1, x2, p):
    tau, t_r, U, w_T, T, width = p[0], p[1], p[2], p[3], p[4], p[6]
    u = x2 - T
    if width > 0:
        g = u * 0.5 * (1.0 + math.tanh(u / width))
    else:
        g = u if u > 0 else 0.0
    return (1.0 - x1) / t_r - U * x1 * g, -x2 / tau + x1 * U * w_T * g / tau


@njit(cache=True)
def _ht_noise_nb(x1, x2, p):
    return 0.0, 0.0, 0.0, p[5]


# ---------------------------------------------------------------------------

_DEFAULTS: dict[str, dict[str, float]] = {
    "fig1": {"epsilon": 0.1},
    "ht_upstate": {
        "epsilon": 0.5,
        "tau": 0.05,
        "t_r": 0.8,
        "U": 0.5,
        "w_T": 12.6,
        "T": 2.0,
        # calibrated so the Up-state tail rate is close to the empirical 1/2.46
        "sigma": 1.55,
        "sigma_floor_factor": 1e-3,
        "ramp_width": 0.0,
    },
}

_FACTORIES = {"fig1": _make_fig1, "ht_upstate": _make_ht}

BUILTINS = tuple(_DEFAULTS)


def builtin_parameters(name: str) -> dict[str, float]:
    """Declared parameters of a builtin with their default values."""
    if name not in _DEFAULTS:
        raise KeyError(f"unknown system {name!r}; known: {', '.join(BUILTINS)}")
    return dict(_DEFAULTS[name])


def make_builtin(name: str, overrides: Mapping[str, float] | None = None) -> DriftDiffusionSystem:
    """Build a builtin system, applying parameter overrides.

    Unknown names and undeclared parameters raise ``KeyError``; parameter sets
    without a stable focus raise ``ValueError``.
    """
    params = builtin_parameters(name)
    for key, value in (overrides or {}).items():
        if key not in params:
            raise KeyError(f"system {name!r} has no parameter {key!r}")
        params[key] = float(value)
    return _FACTORIES[name](params)
