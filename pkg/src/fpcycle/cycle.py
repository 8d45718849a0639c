"""
Unstable limit cycle and boundary frame
=======================================

The cycle is found by Poincare-section shooting on the time-reversed flow, in
which it is attracting. It is then resampled at uniform arclength, with ``s``
increasing along the forward drift and ``s = 0`` at the point of maximal
``x1``. Local coordinates are ``rho`` (signed distance, negative inside) and
``s`` (arclength of the foot point).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.spatial import cKDTree

from . import _periodic
from ._geometry import BoundaryLocator, build_locator, winding_inside
from ._io import write_csv
from .dynamics import DriftDiffusionSystem, jacobian_at

__all__ = [
    "CycleError",
    "LimitCycle",
    "BoundaryFrame",
    "LocalCoords",
    "find_limit_cycle",
    "boundary_frame",
    "to_local",
    "write_cycle_csv",
    "write_frame_csv",
]


class CycleError(RuntimeError):
    """Shooting failed or the located cycle has the wrong topology."""


# local degree-5 polynomial through samples at offsets -2..3
_OFFSETS = np.arange(-2, 4)
_VANDER_INV = np.linalg.inv(np.vander(_OFFSETS.astype(float), 6, increasing=True))


@dataclass(frozen=True)
class LocalCoords:
    rho: np.ndarray
    s: np.ndarray


@dataclass(frozen=True, eq=False)
class LimitCycle:
    """Uniform-arclength samples of the cycle.

    Attributes
    ----------
    points : ndarray, shape (N, 2)
        ``x(s_k)`` with ``s_k = k S / N``.
    total_length : float
        Arclength ``S``.
    orientation : int
        +1 if the forward flow runs counterclockwise, -1 if clockwise.
    period : float
        ``oint ds / B``.
    rho0 : float
        Half the minimal radius of curvature; width of the local-coordinate strip.
    normals, tangents : ndarray, shape (N, 2)
        Outward unit normals and unit tangents (along the flow).
    """

    points: np.ndarray
    total_length: float
    orientation: int
    period: float
    rho0: float
    normals: np.ndarray
    tangents: np.ndarray
    focus: np.ndarray
    system_name: str = ""
    closure_residual: float = 0.0
    return_map_derivative: float = float("nan")
    _tree: cKDTree = field(init=False, repr=False)
    _locators: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        for name in ("points", "normals", "tangents", "focus"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_tree", cKDTree(self.points))
        object.__setattr__(self, "_locators", {})

    @property
    def n_samples(self) -> int:
        return self.points.shape[0]

    @property
    def s_grid(self) -> np.ndarray:
        return _periodic.grid(self.n_samples, self.total_length)

    @property
    def spacing(self) -> float:
        return self.total_length / self.n_samples

    def _local_poly(self, s):
        """Monomial coefficients of the local quintic around each ``s``."""
        h = self.spacing
        u = np.mod(s, self.total_length) / h
        c = np.floor(u).astype(np.int64)
        tau = u - c
        idx = np.mod(c[:, None] + _OFFSETS[None, :], self.n_samples)
        vals = self.points[idx]  # (M, 6, 2)
        coef = np.einsum("kj,mjd->mkd", _VANDER_INV, vals)
        return coef, tau

    def embed(self, s, rho=0.0) -> np.ndarray:
        """Point with local coordinates ``(rho, s)``."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        x, dx, _ = self._eval(s)
        t = dx / np.linalg.norm(dx, axis=1)[:, None]
        n = self.orientation * np.stack([t[:, 1], -t[:, 0]], axis=1)
        return x + np.asarray(rho, dtype=float)[..., None] * n

    def _eval(self, s):
        coef, tau = self._local_poly(s)
        h = self.spacing
        powers = tau[:, None] ** np.arange(6)[None, :]
        x = np.einsum("mk,mkd->md", powers, coef)
        dp = np.zeros_like(powers)
        dp[:, 1:] = powers[:, :-1] * np.arange(1, 6)[None, :]
        dx = np.einsum("mk,mkd->md", dp, coef) / h
        ddp = np.zeros_like(powers)
        ddp[:, 2:] = powers[:, :-2] * (np.arange(2, 6) * np.arange(1, 5))[None, :]
        ddx = np.einsum("mk,mkd->md", ddp, coef) / h**2
        return x, dx, ddx

    def to_local(self, points, strict: bool = True) -> LocalCoords:
        """Signed distance and foot-point arclength.

        Points outside the strip ``|rho| < rho0`` raise ``ValueError`` when
        ``strict``; otherwise they get ``nan``.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite point")
        _, i = self._tree.query(p)
        s = i * self.spacing
        h = self.spacing
        for _ in range(8):
            x, dx, ddx = self._eval(s)
            d = x - p
            g = np.sum(d * dx, axis=1)
            dg = np.sum(dx * dx, axis=1) + np.sum(d * ddx, axis=1)
            step = np.clip(-g / dg, -h, h)
            s = s + step
            if np.max(np.abs(step)) < 1e-14 * self.total_length:
                break
        s = np.mod(s, self.total_length)
        x, dx, _ = self._eval(s)
        t = dx / np.linalg.norm(dx, axis=1)[:, None]
        n = self.orientation * np.stack([t[:, 1], -t[:, 0]], axis=1)
        rho = np.sum((p - x) * n, axis=1)
        # the foot must be a true perpendicular inside the strip
        off = np.abs(rho) >= self.rho0
        if np.any(off):
            if strict:
                raise ValueError(
                    f"point outside the local-coordinate strip |rho| < {self.rho0:.3g}; "
                    "use contains() instead"
                )
            rho = np.where(off, np.nan, rho)
            s = np.where(off, np.nan, s)
        return LocalCoords(rho=rho, s=s)

    def locator(self, min_vertices: int = 4096) -> BoundaryLocator:
        """Cell-based signed-distance structure used by the compiled kernels."""
        if min_vertices not in self._locators:
            self._locators[min_vertices] = build_locator(self.polyline(min_vertices), self.orientation)
        return self._locators[min_vertices]

    def polyline(self, min_vertices: int = 4096) -> np.ndarray:
        """Closed polyline (forward order) with at least ``min_vertices`` points.

        Coarse cycles are refined by trigonometric (zero-padded FFT) interpolation.
        """
        n = self.n_samples
        factor = max(1, math.ceil(min_vertices / n))
        if factor == 1:
            return np.array(self.points)
        m = n * factor
        out = np.empty((m, 2))
        for d in range(2):
            c = np.fft.fft(self.points[:, d])
            pad = np.zeros(m, dtype=complex)
            half = n // 2
            pad[:half] = c[:half]
            pad[m - (n - half) :] = c[half:]
            if n % 2 == 0:
                pad[half] = 0.5 * c[half]
                pad[m - half] = 0.5 * c[half]
            out[:, d] = np.fft.ifft(pad).real * factor
        return out

    def contains(self, points) -> np.ndarray:
        """Strict inside test by winding number, refined by ``rho`` near the curve."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        inside = winding_inside(p, self.polyline())
        dist, _ = self._tree.query(p)
        near = dist < 0.5 * self.rho0
        if np.any(near):
            rho = self.to_local(p[near], strict=False).rho
            inside[near] = np.where(np.isnan(rho), inside[near], rho < 0)
        return inside


def to_local(cycle: LimitCycle, point) -> LocalCoords:
    return cycle.to_local(point)


# ---------------------------------------------------------------------------
# shooting


def _reverse_rhs(system, focus):
    def rhs(t, z):
        x = z[:2]
        a = system.drift(x)
        d = x - focus
        return np.array([-a[0], -a[1], -(d[0] * a[1] - d[1] * a[0]) / (d @ d), math.hypot(a[0], a[1])])

    return rhs


def find_limit_cycle(
    system: DriftDiffusionSystem,
    n_samples: int = 512,
    section_hint=None,
    *,
    rtol: float = 1e-10,
    atol: float = 1e-10,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> LimitCycle:
    """Locate the unstable cycle around the focus of ``system``.

    Parameters
    ----------
    system : DriftDiffusionSystem
    n_samples : int
        Number of uniform-arclength samples (at least 64).
    section_hint : array_like, optional
        Point fixing the Poincare section: the half line from the focus
        through it. Defaults to the ``+x1`` direction.
    rtol, atol : float
        RK45 tolerances for every integration.
    tol : float
        Fixed-point residual of the return map (scaled by ``max(1, r)``).
    """
    if n_samples < 64:
        raise ValueError("n_samples must be at least 64")
    f0 = np.asarray(system.focus, dtype=float)
    J = jacobian_at(system, f0)
    omega_f = abs(np.linalg.eigvals(J)[0].imag)
    e = np.array([1.0, 0.0]) if section_hint is None else np.asarray(section_hint, float) - f0
    e = e / np.linalg.norm(e)
    rot = math.copysign(1.0, e[0] * (J @ e)[1] - e[1] * (J @ e)[0])
    turn = -rot * 2 * math.pi  # reverse flow winds the other way
    rhs = _reverse_rhs(system, f0)

    def hit(t, z):
        return z[2] - turn

    hit.terminal = True
    hit.direction = -rot
    t_budget = 200 * 2 * math.pi / omega_f

    def shoot(r, dense=False):
        z0 = np.array([*(f0 + r * e), 0.0, 0.0])
        sol = solve_ivp(rhs, (0.0, t_budget), z0, method="RK45", rtol=rtol, atol=atol,
                        events=hit, dense_output=dense)
        if sol.status != 1 or not np.all(np.isfinite(sol.y[:, -1])):
            raise CycleError(f"reverse-time trajectory from r={r:.6g} did not complete a turn")
        z = sol.y_events[0][0]
        return float((z[:2] - f0) @ e), sol

    # fixed-point iteration on the attracting reverse return map, then Newton
    r = 1e-3 * max(1.0, float(np.max(np.abs(f0))))
    for _ in range(max_iter):
        rn, _ = shoot(r)
        if not rn > 0:
            raise CycleError("return map left the section half line")
        done = abs(rn - r) <= 1e-4 * rn
        r = rn
        if done:
            break
    else:
        raise CycleError("no fixed point of the return map within the iteration budget")
    F, deriv = float("inf"), float("nan")
    for _ in range(50):
        rr, _ = shoot(r)
        F = rr - r
        if abs(F) <= tol * max(1.0, r):
            break
        hstep = 1e-6 * r
        deriv = (shoot(r + hstep)[0] - shoot(r - hstep)[0]) / (2 * hstep)
        r = r - F / (deriv - 1.0)
    else:
        raise CycleError(f"Newton on the return map stalled, residual {F:.3g}")
    hstep = 1e-6 * r
    deriv = (shoot(r + hstep)[0] - shoot(r - hstep)[0]) / (2 * hstep)
    if deriv >= 1.0:
        raise CycleError("return-map derivative >= 1: the cycle is stable in forward time")

    _, sol = shoot(r, dense=True)
    x_star = f0 + r * e
    t_end = float(sol.t_events[0][0])
    z_end = sol.y_events[0][0]
    L = float(z_end[3])
    closure = float(np.linalg.norm(z_end[:2] - x_star))
    dense = sol.sol

    t_knots = sol.t
    l_knots = sol.y[3]

    def time_of(ell):
        # invert ell(t) along the reverse orbit, Newton with d ell/dt = |a|
        t = np.interp(ell, l_knots, t_knots)
        for _ in range(4):
            z = dense(t)
            B = np.hypot(*system.drift(z[:2].T).T)
            t = np.clip(t - (z[3] - ell) / B, 0.0, t_end)
        return t

    N = n_samples
    h = L / N
    # forward arclength s corresponds to reverse arclength L - s
    fwd = dense(time_of(np.mod(L - np.arange(N) * h, L)))[:2].T
    fwd[0] = x_star
    # arclength origin: maximal x1 (ties: maximal x2), refined on the local quintic
    top = np.max(fwd[:, 0])
    cand = np.flatnonzero(fwd[:, 0] >= top - 1e-12 * max(1.0, abs(top)))
    k0 = cand[np.argmax(fwd[cand, 1])]
    idx = np.mod(k0 + _OFFSETS, N)
    c = _VANDER_INV @ fwd[idx, 0]
    tau = 0.0
    for _ in range(20):
        d1 = sum(k * c[k] * tau ** (k - 1) for k in range(1, 6))
        d2 = sum(k * (k - 1) * c[k] * tau ** (k - 2) for k in range(2, 6))
        if d2 >= 0:
            break
        step = float(np.clip(-d1 / d2, -1.0, 1.0))
        tau += step
        if abs(step) < 1e-14:
            break
    s_star = (k0 + tau) * h
    ell = np.mod(L - (s_star + np.arange(N) * h), L)
    pts = dense(time_of(ell))[:2].T

    a = system.drift(pts)
    B = np.hypot(a[:, 0], a[:, 1])
    if np.any(B <= 0):
        raise CycleError("drift vanishes on the cycle")
    t_hat = a / B[:, None]
    area = 0.5 * np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
    orientation = 1 if area > 0 else -1
    normals = orientation * np.stack([t_hat[:, 1], -t_hat[:, 0]], axis=1)
    # curvature of the flow line: |a x (J a)| / |a|^3
    Ja = _jac_times(system, pts, a)
    kappa = np.abs(a[:, 0] * Ja[:, 1] - a[:, 1] * Ja[:, 0]) / B**3
    rho0 = 0.5 / float(np.max(kappa))
    period = float(np.sum(1.0 / B) * h)

    cyc = LimitCycle(
        points=pts,
        total_length=L,
        orientation=orientation,
        period=period,
        rho0=rho0,
        normals=normals,
        tangents=t_hat,
        focus=f0,
        system_name=system.name,
        closure_residual=closure,
        return_map_derivative=float(deriv),
    )
    if not cyc.contains(f0[None, :])[0]:
        raise CycleError("focus is not strictly inside the located cycle")
    return cyc


def _jac_times(system, pts, v, step=1e-6):
    """Directional derivative ``J(x) v`` by central differences (vectorized)."""
    scale = step * np.maximum(1.0, np.abs(pts).max(axis=1)) / np.linalg.norm(v, axis=1)
    d = v * scale[:, None]
    return (system.drift(pts + d) - system.drift(pts - d)) / (2 * scale[:, None])


# ---------------------------------------------------------------------------
# frame


@dataclass(frozen=True, eq=False)
class BoundaryFrame:
    """Periodic coefficients on the uniform arclength grid.

    ``B = |a|``, ``a0 = d(a.n)/d rho`` at the cycle and ``sigma = n^T sigma n``.
    """

    s_grid: np.ndarray
    B: np.ndarray
    a0: np.ndarray
    sigma: np.ndarray
    normal: np.ndarray
    total_length: float

    def __post_init__(self):
        for name in ("s_grid", "B", "a0", "sigma", "normal"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.s_grid.shape[0]

    @property
    def a0_nonnegative(self) -> bool:
        return bool(np.min(self.a0) >= -1e-8)

    @classmethod
    def from_functions(cls, a0, B=1.0, sigma=1.0, total_length=2 * np.pi, n=512):
        """Frame from callables (or constants) of ``s``; normals of a circle."""
        s = _periodic.grid(n, total_length)

        def ev(f):
            return np.broadcast_to(np.asarray(f(s) if callable(f) else f, dtype=float), s.shape)

        th = 2 * np.pi * s / total_length
        normal = np.stack([np.cos(th), np.sin(th)], axis=1)
        return cls(s, ev(B), ev(a0), ev(sigma), normal, float(total_length))


def boundary_frame(system: DriftDiffusionSystem, cycle: LimitCycle, h_rho: float | None = None) -> BoundaryFrame:
    """Evaluate ``B``, ``a0`` and ``sigma`` on the cycle samples.

    ``a0`` is the Richardson-extrapolated central difference of ``a . n`` along
    the outward normal with steps ``h_rho`` and ``h_rho / 2`` (default ``1e-4 S``).
    """
    h = 1e-4 * cycle.total_length if h_rho is None else float(h_rho)
    x = cycle.points
    n = cycle.normals
    a = system.drift(x)
    B = np.hypot(a[:, 0], a[:, 1])

    def central(step):
        ap = np.sum(system.drift(x + step * n) * n, axis=1)
        am = np.sum(system.drift(x - step * n) * n, axis=1)
        return (ap - am) / (2 * step)

    # one Richardson step: O(h^4)
    a0 = (4 * central(0.5 * h) - central(h)) / 3
    sig = np.einsum("ki,kij,kj->k", n, system.sigma(x, regularized=True), n)
    if not np.all(np.isfinite(a0)):
        raise ValueError("non-finite drift near the cycle")
    if np.any(B <= 0):
        raise ValueError("B(s) <= 0 on the cycle")
    if np.any(sig <= 0):
        raise ValueError("sigma(s) <= 0 on the cycle; increase the regularization floor")
    frame = BoundaryFrame(cycle.s_grid, B, a0, sig, n, cycle.total_length)
    if not frame.a0_nonnegative:
        warnings.warn(
            f"{system.name}: a0(s) takes negative values (min {np.min(a0):.4g}); "
            "only its mean enters the periodic problems",
            RuntimeWarning,
            stacklevel=2,
        )
    return frame


def write_cycle_csv(path, cycle: LimitCycle, frame: BoundaryFrame, stride: int = 1) -> None:
    """Every ``stride``-th sample: ``s, x1, x2, n1, n2, B, a0, sigma``."""
    k = slice(None, None, int(stride))
    write_csv(path, ["s", "x1", "x2", "n1", "n2", "B", "a0", "sigma"],
              [cycle.s_grid[k], cycle.points[k, 0], cycle.points[k, 1], frame.normal[k, 0], frame.normal[k, 1],
               frame.B[k], frame.a0[k], frame.sigma[k]])


def write_frame_csv(path, frame: BoundaryFrame, stride: int = 1) -> None:
    k = slice(None, None, int(stride))
    write_csv(path, ["s", "B", "a0", "sigma"], [frame.s_grid[k], frame.B[k], frame.a0[k], frame.sigma[k]])
