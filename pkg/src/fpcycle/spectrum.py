"""
Asymptotic spectrum near an unstable limit cycle
================================================

Besides the principal eigenvalue ``lambda0`` the spectrum contains the lattice

    lambda_{m,n} = 2 n omega1 + i m omega2,

with ``omega2 = 2 pi / int ds/B`` the rotation frequency along the cycle and
``omega1 = (omega2 / 2 pi) int sigma xi^2 / B ds``. The boundary-layer
eigenfunctions separate as ``R_n(eta) T_{m,n}(s)`` with ``eta = rho xi / sqrt(eps)``.

Radial modes solve ``R'' + eta R' + mu R = 0`` with ``R(0) = 0`` and decay as
``eta -> -inf``. For ``mu = 2n`` (``n >= 1``) the solution is
``exp(-eta^2/2) H_{2n-1}(eta / sqrt 2)``; ``n = 0`` is the error-function
profile of the principal mode.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import erf

from . import _periodic
from ._io import write_csv, write_json
from .cycle import BoundaryFrame, LimitCycle
from .periodic_ode import PeriodicSolution

__all__ = [
    "Frequencies",
    "SpectrumResult",
    "RadialMode",
    "BoundaryLayerEigenfunction",
    "TwoTermModel",
    "SpectralGapWarning",
    "frequencies",
    "eigenvalue_lattice",
    "hermite",
    "radial_eigenfunction",
    "rotational_eigenfunction",
    "boundary_layer_eigenfunction",
    "eigenfunction_pair",
    "exit_density",
    "survival_model",
    "write_spectrum_json",
    "write_exit_density_csv",
]


class SpectralGapWarning(UserWarning):
    """Oscillatory decay rate not above the principal rate."""


@dataclass(frozen=True)
class Frequencies:
    """Rates attached to the cycle.

    Attributes
    ----------
    omega1 : float
        Decay-rate unit, ``(omega2 / 2 pi) int sigma xi^2 / B``.
    omega2 : float
        Angular frequency of rotation along the cycle.
    T_period : float
        ``int ds / B``.
    sigma_xi2_integral, a0_integral : float
        ``int sigma xi^2 / B`` and ``int a0 / B`` (equal for the exact xi).
    focus_frequency : float or None
        Imaginary part of the Jacobian eigenvalue at the focus, if supplied.
    """

    omega1: float
    omega2: float
    T_period: float
    sigma_xi2_integral: float
    a0_integral: float
    focus_frequency: float | None = None

    @property
    def omega1_mean_identity(self) -> float:
        return self.omega2 / (2 * math.pi) * self.a0_integral


def frequencies(frame: BoundaryFrame, xi: PeriodicSolution, focus_frequency: float | None = None) -> Frequencies:
    x = np.asarray(xi.values)
    if x.shape != frame.B.shape:
        raise ValueError("xi and frame are sampled on different grids")
    S = frame.total_length
    T = float(_periodic.integral(1.0 / frame.B, S))
    w2 = 2 * math.pi / T
    I2 = float(_periodic.integral(frame.sigma * x**2 / frame.B, S))
    Ia = float(_periodic.integral(frame.a0 / frame.B, S))
    return Frequencies(w2 / (2 * math.pi) * I2, w2, T, I2, Ia, focus_frequency)


@dataclass(frozen=True)
class SpectrumResult:
    lambda0_log: float
    lattice: Mapping[tuple, complex]
    epsilon: float
    freqs: Frequencies
    n_min: int = 1

    def eigenvalue(self, n: int, m: int) -> complex:
        return self.lattice[(n, m)]

    def records(self) -> list:
        return [{"n": n, "m": m, "re": lam.real, "im": lam.imag} for (n, m), lam in sorted(self.lattice.items())]


def eigenvalue_lattice(freqs: Frequencies, n_max: int = 3, m_max: int = 5, n_min: int = 1,
                       lambda0_log: float = float("nan"), epsilon: float = float("nan")) -> SpectrumResult:
    """Table ``(n, m) -> lambda_{m,n}`` for ``n_min <= n <= n_max``, ``1 <= |m| <= m_max``.

    Each entry is computed from the two equivalent forms
    ``2 n omega1 + i m omega2`` and ``[n/pi int sigma xi^2/B + i m] omega2``,
    which must agree to 1e-12.
    """
    if n_max < 1 or m_max < 1 or not 0 <= n_min <= n_max:
        raise ValueError("need 0 <= n_min <= n_max, n_max >= 1 and m_max >= 1")
    w1, w2 = freqs.omega1, freqs.omega2
    table = {}
    for n in range(n_min, n_max + 1):
        for m in list(range(-m_max, 0)) + list(range(1, m_max + 1)):
            a = complex(2 * n * w1, m * w2)
            b = complex(n / math.pi * freqs.sigma_xi2_integral, m) * w2
            if abs(a - b) > 1e-12 * max(1.0, abs(a)):
                raise ArithmeticError(f"lattice forms disagree at (n, m) = ({n}, {m}): {a} vs {b}")
            table[(n, m)] = a
    return SpectrumResult(float(lambda0_log), table, float(epsilon), freqs, n_min)


def hermite(k: int, x) -> np.ndarray:
    """Physicists' Hermite polynomial ``H_k(x)`` by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    h0 = np.ones_like(x)
    if k == 0:
        return h0
    h1 = 2 * x
    for j in range(1, k):
        h0, h1 = h1, 2 * x * h1 - 2 * j * h0
    return h1


@dataclass(frozen=True)
class RadialMode:
    """``R_n`` with separation constant ``mu = 2n``.

    ``n >= 1``: ``exp(-eta^2/2) H_{2n-1}(eta/sqrt 2)``.
    ``n = 0``: ``erf(-eta/sqrt 2)``, plateau 1 inside.
    """

    n: int

    @property
    def mu(self) -> float:
        return 2.0 * self.n

    @property
    def hermite_order(self) -> int:
        return 2 * self.n - 1

    def __call__(self, eta, deriv: int = 0) -> np.ndarray:
        # d/deta [e^{-x^2} H_k(x)] = -(1/sqrt 2) e^{-x^2} H_{k+1}(x), x = eta/sqrt 2
        eta = np.asarray(eta, dtype=float)
        x = eta / math.sqrt(2.0)
        g = np.exp(-x * x)
        c = (-1.0 / math.sqrt(2.0)) ** deriv
        if self.n >= 1:
            return c * g * hermite(self.hermite_order + deriv, x)
        if deriv == 0:
            return erf(-x)
        return -math.sqrt(2.0 / math.pi) * (-math.sqrt(2.0)) * c * g * hermite(deriv - 1, x)

    def residual(self, eta) -> float:
        """``sup |R'' + eta R' + mu R|`` relative to the largest of the three terms."""
        eta = np.asarray(eta, dtype=float)
        terms = [self(eta, 2), eta * self(eta, 1), self.mu * self(eta)]
        return float(np.max(np.abs(np.sum(terms, axis=0))) / np.max(np.abs(terms)))


def radial_eigenfunction(n: int) -> RadialMode:
    if n < 0:
        raise ValueError("radial index must be nonnegative")
    return RadialMode(int(n))


class _CumulativeIntegral:
    """``int_0^s f`` at arbitrary ``s``: secular part plus a periodic remainder."""

    def __init__(self, values, period):
        v = np.asarray(values, dtype=float)
        self.period = period
        self.total = float(_periodic.integral(v, period))
        self.rate = self.total / period
        F = _periodic.cumulative(v, period)
        self.rem = F - self.rate * _periodic.grid(v.shape[0], period)

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        return self.rate * s + _periodic.evaluate(self.rem, self.period, s)


@dataclass(frozen=True, eq=False)
class RotationalMode(PeriodicSolution):
    """``T_{m,n}`` on the frame grid; ``closure = |T(S)/T(0) - 1|``."""

    n: int = 0
    m: int = 0
    eigenvalue: complex = 0j
    closure: float = float("nan")
    _I1: _CumulativeIntegral | None = field(default=None, repr=False)
    _I2: _CumulativeIntegral | None = field(default=None, repr=False)

    def __call__(self, s):
        # closed form at arbitrary s; s is taken modulo S
        s = np.mod(np.asarray(s, dtype=float), self.total_length)
        return np.exp(-self.eigenvalue * self._I1(s) + 2 * self.n * self._I2(s))


def rotational_eigenfunction(freqs: Frequencies, frame: BoundaryFrame, xi: PeriodicSolution, n: int, m: int,
                             lam: complex | None = None, tol: float = 1e-10) -> RotationalMode:
    """``T(s) = exp(-lambda int_0^s 1/B + 2n int_0^s sigma xi^2 / B)``.

    ``lam`` defaults to the lattice value. Raises if ``T(S) != T(0)`` beyond
    ``tol``, which happens exactly off the lattice.
    """
    if lam is None:
        lam = complex(2 * n * freqs.omega1, m * freqs.omega2)
    S = frame.total_length
    x = np.asarray(xi.values)
    I1 = _CumulativeIntegral(1.0 / frame.B, S)
    I2 = _CumulativeIntegral(frame.sigma * x**2 / frame.B, S)
    closure = abs(np.expm1(-lam * I1.total + 2 * n * I2.total))
    if not closure <= tol:
        raise ValueError(f"closure failure |T(S)/T(0) - 1| = {closure:.3g}: lambda is off the lattice")
    s = frame.s_grid
    vals = np.exp(-lam * (I1.rate * s + I1.rem) + 2 * n * (I2.rate * s + I2.rem))
    return RotationalMode(s, vals, f"T_{m},{n}", S, closure, n=n, m=m, eigenvalue=complex(lam),
                          closure=closure, _I1=I1, _I2=I2)


@dataclass(frozen=True, eq=False)
class BoundaryLayerEigenfunction:
    n: int
    m: int
    radial: RadialMode
    rotational: RotationalMode
    epsilon: float
    xi: PeriodicSolution

    def eta(self, rho, s) -> np.ndarray:
        return np.asarray(rho) * self.xi(s) / math.sqrt(self.epsilon)

    def __call__(self, rho, s) -> np.ndarray:
        return self.radial(self.eta(rho, s)) * self.rotational(s)


def boundary_layer_eigenfunction(freqs, frame, xi, n: int, m: int, epsilon: float) -> BoundaryLayerEigenfunction:
    return BoundaryLayerEigenfunction(n, m, radial_eigenfunction(n),
                                      rotational_eigenfunction(freqs, frame, xi, n, m), float(epsilon), xi)


def eigenfunction_pair(layer: BoundaryLayerEigenfunction, cycle: LimitCycle, K0: PeriodicSolution, psi_field):
    """Evaluators ``(u, v)`` for the mode ``(n, m)`` of ``layer``.

    ``v(y) = R_n(eta) T_{m,n}(s)`` inside the tubular neighbourhood and the
    plateau value ``R_n(-inf)`` (0 for ``n >= 1``) beyond it;
    ``u = exp(-psi/eps) K0 conj(v)``. Both vanish on the cycle. Called with
    ``return_mask=True`` they also return the plateau-extension mask.
    """
    from .wkb import domain_coords, forward_weight

    plateau = 1.0 if layer.n == 0 else 0.0

    def _v(loc):
        out = np.full(loc.rho.shape, plateau, dtype=complex)
        m = np.isfinite(loc.rho)
        out[m] = layer(loc.rho[m], loc.s[m])
        return out, ~m

    def v(points, return_mask=False):
        out, flag = _v(domain_coords(cycle, points)[1])
        return (out, flag) if return_mask else out

    def u(points, return_mask=False):
        p, loc = domain_coords(cycle, points)
        vv, flag = _v(loc)
        out = forward_weight(cycle, layer.xi, K0, psi_field, layer.epsilon, p, loc) * np.conj(vv)
        return (out, flag) if return_mask else out

    return u, v


def exit_density(frame: BoundaryFrame, xi: PeriodicSolution) -> PeriodicSolution:
    """Exit-point density over arclength, proportional to ``xi^2 sigma / B``."""
    S = frame.total_length
    w = np.asarray(xi.values) ** 2 * frame.sigma / frame.B
    p = w / _periodic.integral(w, S)
    return PeriodicSolution(frame.s_grid, p, "exit_density", S, abs(float(_periodic.integral(p, S)) - 1.0))


@dataclass(frozen=True)
class TwoTermModel:
    """``f(t) = A exp(-lambda0 t) + B exp(-lambda1 t) cos(omega t + phi)``."""

    A: float
    B: float
    lambda0: float
    lambda1: float
    omega: float
    phi: float

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return self.A * np.exp(-self.lambda0 * t) + self.B * np.exp(-self.lambda1 * t) * np.cos(self.omega * t + self.phi)


def survival_model(lambda0_log: float, freqs: Frequencies | None, coeffs: Mapping) -> TwoTermModel:
    """Two-term exit-time density with ``lambda0 = exp(lambda0_log)``.

    ``coeffs`` supplies ``A``, ``B`` and ``phi``; ``lambda1`` and ``omega``
    default to ``2 omega1`` and ``omega2`` of ``freqs``. A decay rate
    ``lambda1 <= lambda0`` triggers a :class:`SpectralGapWarning`.
    """
    lam0 = math.exp(lambda0_log)
    lam1 = coeffs.get("lambda1")
    omega = coeffs.get("omega")
    if lam1 is None or omega is None:
        if freqs is None:
            raise ValueError("lambda1 and omega need either explicit values or frequencies")
        lam1 = 2 * freqs.omega1 if lam1 is None else lam1
        omega = freqs.omega2 if omega is None else omega
    if lam1 <= lam0:
        warnings.warn(f"lambda1 = {lam1:g} does not exceed lambda0 = {lam0:g}", SpectralGapWarning, stacklevel=2)
    return TwoTermModel(float(coeffs["A"]), float(coeffs.get("B", 0.0)), lam0, float(lam1), float(omega),
                        float(coeffs.get("phi", 0.0)))


def write_spectrum_json(path, result: SpectrumResult, extra: Mapping | None = None) -> None:
    obj = {
        "omega1": result.freqs.omega1,
        "omega2": result.freqs.omega2,
        "lambda0_log": result.lambda0_log,
        "lattice": result.records(),
    }
    if result.freqs.focus_frequency is not None:
        obj["focus_frequency"] = result.freqs.focus_frequency
    if extra:
        obj.update(extra)
    write_json(path, obj)


def write_exit_density_csv(path, density: PeriodicSolution) -> None:
    write_csv(path, ["s", "p"], [density.s_grid, density.values])
