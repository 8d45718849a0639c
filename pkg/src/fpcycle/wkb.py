"""
WKB ingredients: Hessian at the focus, eikonal rays, MFPT and principal pair
============================================================================

The quasi-potential ``psi`` solves ``sigma grad(psi).grad(psi) + a.grad(psi) = 0``
with ``psi ~ x^T Q x / 2`` at the focus, where ``Q`` solves

    2 Q sigma(0) Q + Q A + A^T Q = 0.

With ``P = Q^-1`` this is the Lyapunov equation ``A P + P A^T = -2 sigma(0)``.
``psi`` is traced along the characteristics of ``H = p^T sigma p + a.p`` and
its boundary value ``psi_hat`` is read off through the boundary expansion
``psi = psi_hat - rho^2 xi(s)^2 / 2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.integrate import solve_ivp
from scipy.linalg import solve_continuous_lyapunov
from scipy.optimize import minimize_scalar
from scipy.spatial import cKDTree
from scipy.special import erf

from . import _periodic
from ._geometry import locate
from ._io import write_json
from .cycle import BoundaryFrame, LimitCycle, boundary_frame
from .dynamics import DriftDiffusionSystem, jacobian_at
from .periodic_ode import PeriodicSolution, solve_xi

__all__ = [
    "RiccatiSolution",
    "EikonalField",
    "MFPTResult",
    "solve_riccati",
    "eikonal_psi_hat",
    "mfpt",
    "principal_pair",
    "domain_coords",
    "forward_weight",
    "write_wkb_json",
]


@dataclass(frozen=True)
class RiccatiSolution:
    """Hessian ``Q`` of the quasi-potential at the focus."""

    Q: np.ndarray
    residual: float
    trace_defect: float

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.Q))


def solve_riccati(A, sigma0) -> RiccatiSolution:
    """SPD solution of ``2 Q sigma0 Q + Q A + A^T Q = 0`` via its Lyapunov form.

    ``residual`` is the max-entry residual and ``trace_defect`` is
    ``trace(A + sigma0 Q)``; both are absolute.
    """
    A = np.asarray(A, dtype=float)
    S = np.asarray(sigma0, dtype=float)
    if np.any(np.linalg.eigvals(A).real >= 0):
        raise ValueError("A is not stable")
    if not np.allclose(S, S.T) or np.any(np.linalg.eigvalsh(S) <= 0):
        raise ValueError("sigma0 is not symmetric positive definite")
    P = solve_continuous_lyapunov(A, -2.0 * S)
    P = 0.5 * (P + P.T)
    if np.any(np.linalg.eigvalsh(P) <= 0):
        raise ValueError("Lyapunov solution is not positive definite")
    Q = np.linalg.inv(P)
    Q = 0.5 * (Q + Q.T)
    R = 2 * Q @ S @ Q + Q @ A + A.T @ Q
    return RiccatiSolution(Q, float(np.max(np.abs(R))), float(np.trace(A + S @ Q)))


# ---------------------------------------------------------------------------
# characteristics


@lru_cache(maxsize=None)
def _ray_rhs(drift, noise):
    @njit
    def sigma_at(x1, x2, prm, delta):
        b11, b12, b21, b22 = noise(x1, x2, prm)
        return (b11 * b11 + b12 * b12 + delta, b11 * b21 + b12 * b22, b21 * b21 + b22 * b22 + delta)

    @njit
    def quad_form(x1, x2, p1, p2, prm, delta):
        s11, s12, s22 = sigma_at(x1, x2, prm, delta)
        return s11 * p1 * p1 + 2 * s12 * p1 * p2 + s22 * p2 * p2

    @njit
    def rhs(z, prm, delta):
        x1, x2, p1, p2 = z[0], z[1], z[2], z[3]
        a1, a2 = drift(x1, x2, prm)
        s11, s12, s22 = sigma_at(x1, x2, prm, delta)
        # fourth-order central differences for grad(a)^T p and grad(p^T sigma p)
        out = np.empty(5)
        g = np.empty(2)
        hs = np.empty(2)
        hs[0] = 1e-3 * max(1.0, abs(x1))
        hs[1] = 1e-3 * max(1.0, abs(x2))
        for j in range(2):
            h = hs[j]
            acc = 0.0
            accq = 0.0
            for k, w in ((-2, 1.0), (-1, -8.0), (1, 8.0), (2, -1.0)):
                y1 = x1 + (k * h if j == 0 else 0.0)
                y2 = x2 + (k * h if j == 1 else 0.0)
                b1, b2 = drift(y1, y2, prm)
                acc += w * (b1 * p1 + b2 * p2)
                accq += w * quad_form(y1, y2, p1, p2, prm, delta)
            g[j] = -(acc + accq) / (12.0 * h)
        out[0] = 2 * (s11 * p1 + s12 * p2) + a1
        out[1] = 2 * (s12 * p1 + s22 * p2) + a2
        out[2] = g[0]
        out[3] = g[1]
        out[4] = s11 * p1 * p1 + 2 * s12 * p1 * p2 + s22 * p2 * p2
        return out

    return rhs


@dataclass(frozen=True, eq=False)
class EikonalField:
    """Quasi-potential along a fan of characteristics.

    Attributes
    ----------
    psi_hat : float
        Boundary value: the lower envelope over launch angles of the
        per-ray extrapolations, refined by 1-D minimization.
    launch_angles, ray_estimates : ndarray
        Fan angles and each ray's extrapolated boundary value.
    ray_spread : float
        ``(max - min) / psi_hat`` over the fan.
    boundary_spread : float
        Relative spread of ``psi + rho^2 xi^2 / 2`` along the approach of the
        optimal ray (constancy of ``psi`` on the boundary).
    rays : list of ndarray
        Each ``(M, 6)``: columns ``t, x1, x2, p1, p2, psi``.
    """

    psi_hat: float
    optimal_angle: float
    launch_angles: np.ndarray
    ray_estimates: np.ndarray
    ray_spread: float
    boundary_spread: float
    rays: list
    psi_init: float
    rho_stop: float
    Q: np.ndarray
    focus: np.ndarray
    method: str
    _tree: cKDTree = field(init=False, repr=False)
    _psi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        pts = np.concatenate([r[:, 1:3] for r in self.rays])
        object.__setattr__(self, "_tree", cKDTree(pts))
        object.__setattr__(self, "_psi", np.concatenate([r[:, 5] for r in self.rays]))

    def psi_rays(self, points, k: int = 8) -> np.ndarray:
        """Lower envelope of ``psi`` over the ``k`` nearest ray samples
        (exact quadratic inside the launch ellipse)."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        d = p - self.focus
        quad = 0.5 * np.einsum("ki,ij,kj->k", d, self.Q, d)
        _, idx = self._tree.query(p, k=k)
        env = self._psi[idx].min(axis=1)
        return np.where(quad <= self.psi_init, quad, np.maximum(env, self.psi_init))


def _launch(theta, Q, focus, psi_init):
    d = np.array([math.cos(theta), math.sin(theta)])
    r = math.sqrt(2 * psi_init / (d @ Q @ d))
    x = r * d
    return np.array([focus[0] + x[0], focus[1] + x[1], *(Q @ x), psi_init])


def _trace_ray(theta, ctx, keep=False):
    z0 = _launch(theta, ctx["Q"], ctx["focus"], ctx["psi_init"])
    sol = solve_ivp(ctx["fun"], (0.0, ctx["t_max"]), z0, method=ctx["method"], rtol=ctx["rtol"],
                    atol=ctx["atol"], events=ctx["event"], dense_output=True)
    if sol.status != 1:
        raise RuntimeError(f"characteristic launched at angle {theta:.6g} did not approach the boundary")
    t_end = float(sol.t_events[0][0])
    # (psi, rho) pairs on the final approach, rho in [-2 rho_stop, -rho_stop]
    ts = np.linspace(max(0.0, t_end - ctx["approach"]), t_end, 64)
    Z = sol.sol(ts)
    rho = ctx["rho"](Z[0], Z[1])
    sel = rho >= -2 * ctx["rho_stop"]
    sel[-1] = True
    loc = ctx["cycle"].to_local(Z[:2, sel].T, strict=False)
    est = Z[4, sel] + 0.5 * loc.rho**2 * ctx["xi"](loc.s) ** 2
    value = float(np.mean(est))
    if not keep:
        return value
    tt = np.linspace(0.0, t_end, 400)
    ray = np.column_stack([tt, sol.sol(tt).T])
    return value, ray, est


def eikonal_psi_hat(
    system: DriftDiffusionSystem,
    cycle: LimitCycle,
    Q: RiccatiSolution,
    n_rays: int = 64,
    *,
    xi: PeriodicSolution | None = None,
    psi_init: float = 1e-4,
    rho_stop: float | None = None,
    method: str = "DOP853",
    rtol: float = 1e-11,
    atol: float = 1e-13,
    refine: bool = True,
) -> EikonalField:
    """Trace a fan of characteristics from the launch ellipse to the boundary.

    Parameters
    ----------
    n_rays : int
        Rays launched at equally spaced polar angles on the ellipse
        ``x^T Q x / 2 = psi_init`` with ``p = Q x``.
    xi : PeriodicSolution, optional
        Layer width used by the boundary expansion; computed if absent.
    rho_stop : float, optional
        Rays stop at ``rho = -rho_stop`` (default ``0.02 rho0``).
    refine : bool
        Polish the lower envelope by bounded minimization over the angle.
    """
    if system.compiled is None:
        raise ValueError("eikonal rays need compiled fields")
    if xi is None:
        xi = solve_xi(boundary_frame(system, cycle))
    rho_stop = 0.02 * cycle.rho0 if rho_stop is None else float(rho_stop)
    rhs = _ray_rhs(system.compiled.drift, system.compiled.noise)
    prm = system.compiled.params
    delta = float(system.sigma_floor)
    loc_args = cycle.locator().args

    def rho_fn(x1, x2):
        return np.array([locate(a, b, *loc_args) for a, b in zip(np.atleast_1d(x1), np.atleast_1d(x2))])

    def event(t, z):
        return locate(z[0], z[1], *loc_args) + rho_stop

    event.terminal = True
    event.direction = 1
    omega_f = abs(np.linalg.eigvals(jacobian_at(system, system.focus))[0].imag)
    ctx = dict(
        fun=lambda t, z: rhs(z, prm, delta),
        Q=Q.Q,
        focus=np.asarray(system.focus),
        psi_init=psi_init,
        method=method,
        rtol=rtol,
        atol=atol,
        event=event,
        t_max=400 * 2 * math.pi / omega_f,
        approach=2 * math.pi / omega_f,
        rho=rho_fn,
        rho_stop=rho_stop,
        cycle=cycle,
        xi=xi,
    )
    angles = 2 * math.pi * np.arange(n_rays) / n_rays
    fan = [_trace_ray(th, ctx, keep=True) for th in angles]
    est = np.array([f[0] for f in fan])
    rays = [f[1] for f in fan]
    i = int(np.argmin(est))
    best_th, best = float(angles[i]), float(est[i])
    if refine:
        dth = 2 * math.pi / n_rays
        res = minimize_scalar(lambda th: _trace_ray(th, ctx), bounds=(best_th - dth, best_th + dth),
                              method="bounded", options={"xatol": 1e-9 * dth})
        if res.fun < best:
            best_th, best = float(res.x) % (2 * math.pi), float(res.fun)
    _, opt_ray, opt_est = _trace_ray(best_th, ctx, keep=True)
    rays.append(opt_ray)
    spread_b = float((opt_est.max() - opt_est.min()) / best)
    return EikonalField(
        psi_hat=best,
        optimal_angle=best_th,
        launch_angles=angles,
        ray_estimates=est,
        ray_spread=float((est.max() - est.min()) / best),
        boundary_spread=spread_b,
        rays=rays,
        psi_init=psi_init,
        rho_stop=rho_stop,
        Q=np.asarray(Q.Q),
        focus=np.asarray(system.focus),
        method=method,
    )


# ---------------------------------------------------------------------------
# MFPT


@dataclass(frozen=True)
class MFPTResult:
    """Mean first passage time from the focus, carried in log space."""

    tau_bar_log: float
    epsilon: float
    psi_hat: float
    overflow: bool

    @property
    def lambda0_log(self) -> float:
        return -self.tau_bar_log

    @property
    def tau_bar(self) -> float:
        return math.inf if self.overflow else math.exp(self.tau_bar_log)

    @property
    def lambda0(self) -> float:
        return 0.0 if self.overflow else math.exp(self.lambda0_log)


def mfpt(system, frame: BoundaryFrame, xi: PeriodicSolution, K0: PeriodicSolution, Q: RiccatiSolution,
         psi_hat: float, epsilon: float | None = None) -> MFPTResult:
    """``tau = pi^{3/2} sqrt(2 eps det Q) exp(psi_hat / eps) / oint K0 xi ds``."""
    eps = float(system.epsilon if epsilon is None else epsilon)
    if not eps > 0:
        raise ValueError("epsilon must be positive")
    integral = float(_periodic.integral(np.asarray(K0.values) * np.asarray(xi.values), frame.total_length))
    log_tau = 1.5 * math.log(math.pi) + 0.5 * math.log(2 * eps * Q.det) + psi_hat / eps - math.log(integral)
    return MFPTResult(log_tau, eps, float(psi_hat), psi_hat / eps > 700)


# ---------------------------------------------------------------------------
# principal eigenfunction pair


def domain_coords(cycle: LimitCycle, points):
    """Points as an ``(n, 2)`` array with their local coordinates.

    ``rho``/``s`` are NaN away from the tubular neighbourhood. Raises if a
    point lies outside the closed domain.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    inside = cycle.contains(p)
    loc = cycle.to_local(p, strict=False)
    on = np.isfinite(loc.rho) & (np.abs(loc.rho) <= 1e-12)
    if np.any(~(inside | on)):
        raise ValueError("evaluation point outside the closed domain")
    return p, loc


def forward_weight(cycle: LimitCycle, xi: PeriodicSolution, K0: PeriodicSolution,
                   psi_field: EikonalField, epsilon: float, points, loc) -> np.ndarray:
    """``exp(-psi / eps) K0`` at ``points`` (with ``loc`` from :func:`domain_coords`).

    ``psi`` comes from the boundary expansion inside the layer (at most
    ``5 sqrt(eps) / min xi`` deep, and only where the expansion stays above
    ``3/4 psi_hat``) and from the rays elsewhere. ``K0`` keeps its boundary value across the layer, equals 1 beyond
    the tubular strip and is blended linearly in ``rho`` in between.
    """
    xi_min = float(np.min(xi.values))
    xi_max = float(np.max(xi.values))
    # the quadratic boundary expansion is kept where it stays above 3/4 of psi_hat
    valid = math.sqrt(0.5 * psi_field.psi_hat) / xi_max
    layer = min(cycle.rho0, max(psi_field.rho_stop, min(5 * math.sqrt(epsilon) / xi_min, valid)))
    m = np.isfinite(loc.rho)
    psi = psi_field.psi_rays(points)
    k0 = np.ones(points.shape[0])
    lay = m & (-loc.rho <= layer)
    x = xi(loc.s[lay])
    psi[lay] = psi_field.psi_hat - 0.5 * loc.rho[lay] ** 2 * x**2
    depth = -loc.rho[m]
    if layer < cycle.rho0:
        w = np.clip((cycle.rho0 - depth) / (cycle.rho0 - layer), 0.0, 1.0)
    else:
        w = (depth <= cycle.rho0).astype(float)
    k0[m] = w * K0(loc.s[m]) + (1 - w)
    return np.exp(-psi / epsilon) * k0


def principal_pair(system, cycle: LimitCycle, frame: BoundaryFrame, xi: PeriodicSolution,
                   K0: PeriodicSolution, psi_field: EikonalField, epsilon: float | None = None):
    """Evaluators ``u0(points)`` and ``v0(points)``.

    ``v0 = erf(-rho xi / sqrt(2 eps))`` (plateau 1 inside) and
    ``u0 = exp(-psi / eps) K0 v0`` (see :func:`forward_weight`). Both vanish on
    the cycle and raise outside it.
    """
    eps = float(system.epsilon if epsilon is None else epsilon)

    def _v0(loc):
        out = np.ones(loc.rho.shape)
        m = np.isfinite(loc.rho)
        out[m] = erf(-loc.rho[m] * xi(loc.s[m]) / math.sqrt(2 * eps))
        return out

    def v0(points):
        return _v0(domain_coords(cycle, points)[1])

    def u0(points):
        p, loc = domain_coords(cycle, points)
        return forward_weight(cycle, xi, K0, psi_field, eps, p, loc) * _v0(loc)

    return u0, v0


def write_wkb_json(path, Q: RiccatiSolution, field_: EikonalField, tau: MFPTResult) -> None:
    write_json(path, {
        "psi_hat": field_.psi_hat,
        "Q": [[float(v) for v in row] for row in Q.Q],
        "tau_bar_log": tau.tau_bar_log,
        "lambda0_log": tau.lambda0_log,
        "epsilon": tau.epsilon,
    })
