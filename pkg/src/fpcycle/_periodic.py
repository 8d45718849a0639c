"""Trigonometric interpolation and quadrature for samples on a uniform periodic grid."""
from __future__ import annotations

import numpy as np
import scipy.fft as sfft
from numba import njit

# 6-point Gauss-Legendre rule on [0, 1]
_GL_X, _GL_W = np.polynomial.legendre.leggauss(6)
GL_NODES = 0.5 * (_GL_X + 1.0)
GL_WEIGHTS = 0.5 * _GL_W


class TrigInterpolant:
    """Trigonometric interpolant of samples ``f(k S / N)``, ``k = 0..N-1``.

    The Nyquist mode (even ``N``) is split symmetrically so the interpolant is
    real for real data and its derivative stays real.
    """

    def __init__(self, values, period: float):
        v = np.asarray(values)
        self.n = v.shape[0]
        self.period = float(period)
        self.complex = np.iscomplexobj(v)
        c = np.fft.fft(v) / self.n
        k = np.fft.fftfreq(self.n, d=1.0 / self.n)
        if self.n % 2 == 0:
            # split the Nyquist coefficient between +N/2 and -N/2
            ny = self.n // 2
            c = np.concatenate([c, [0.5 * c[ny]]])
            c[ny] *= 0.5
            k = np.concatenate([k, [float(ny)]])
            k[ny] = -float(ny)
        self.coef = c
        self.wavenumber = 2 * np.pi * k / self.period

    @property
    def mean(self):
        return self.coef[0]

    def __call__(self, s, deriv: int = 0):
        s = np.asarray(s, dtype=float)
        phase = np.exp(1j * np.multiply.outer(s, self.wavenumber))
        c = self.coef * (1j * self.wavenumber) ** deriv
        out = phase @ c
        return out if self.complex else out.real

    def antiderivative(self, s):
        """``int_0^s f``, including the secular mean term."""
        s = np.asarray(s, dtype=float)
        k = self.wavenumber
        c = np.where(k != 0, self.coef / np.where(k != 0, 1j * k, 1.0), 0.0)
        phase = np.exp(1j * np.multiply.outer(s, k))
        out = (phase - 1.0) @ c + self.coef[0] * s
        return out if self.complex else out.real


_OFFSETS = np.arange(-2, 4)
_VANDER_INV = np.linalg.inv(np.vander(_OFFSETS.astype(float), 6, increasing=True))


def evaluate(values, period: float, s, exact_limit: int = 8192):
    """Interpolate periodic samples at arbitrary ``s``.

    Trigonometric interpolation up to ``exact_limit`` samples; beyond that a
    local quintic through the six surrounding samples (cost independent of N).
    """
    v = np.asarray(values)
    n = v.shape[0]
    if n <= exact_limit:
        return TrigInterpolant(v, period)(s)
    s = np.asarray(s, dtype=float)
    h = period / n
    u = np.mod(s, period) / h
    c = np.floor(u).astype(np.int64)
    tau = u - c
    idx = np.mod(c[..., None] + _OFFSETS, n)
    coef = v[idx] @ _VANDER_INV.T
    return np.sum(coef * tau[..., None] ** np.arange(6), axis=-1)


def grid(n: int, period: float) -> np.ndarray:
    return np.arange(n) * (period / n)


def _is_real(v) -> bool:
    return not np.iscomplexobj(v)


def _spectrum(v):
    """Half spectrum (``rfft``) for real data, full spectrum otherwise."""
    return sfft.rfft(v) if _is_real(v) else sfft.fft(v)


def _inverse(fv, n: int, real: bool):
    return sfft.irfft(fv, n=n) if real else sfft.ifft(fv)


def _wavenumbers(n: int, period: float, real: bool = False) -> np.ndarray:
    k = np.arange(n // 2 + 1, dtype=float) if real else sfft.fftfreq(n, d=1.0 / n)
    return 2 * np.pi * k / period


def derivative(values, period: float, order: int = 1) -> np.ndarray:
    """Spectral derivative of periodic samples on the uniform grid."""
    v = np.asarray(values)
    n = v.shape[0]
    real = _is_real(v)
    kw = _wavenumbers(n, period, real)
    if n % 2 == 0 and order % 2 == 1:
        kw[n // 2] = 0.0  # split Nyquist mode has zero odd derivatives on the grid
    return _inverse(_spectrum(v) * (1j * kw) ** order, n, real)


def cumulative(values, period: float) -> np.ndarray:
    """``F(s_k) = int_0^{s_k} f`` on the uniform grid (spectrally accurate)."""
    return shifted_antiderivative(values, period, 0.0)


def integral(values, period: float):
    """``int_0^S f`` (trapezoid rule, spectrally accurate for periodic data)."""
    v = np.asarray(values)
    return v.sum() * (period / v.shape[0])


def panel_nodes(n: int, period: float) -> np.ndarray:
    """Gauss-Legendre nodes of every panel ``[s_k, s_{k+1}]``, shape ``(n, 6)``."""
    h = period / n
    return grid(n, period)[:, None] + h * GL_NODES[None, :]


def _shift_phase(n: int, period: float, delta: float, real: bool) -> np.ndarray:
    phase = np.exp(1j * _wavenumbers(n, period, real) * delta)
    if n % 2 == 0:
        # Nyquist mode split evenly between +-N/2
        phase[n // 2] = np.cos(np.pi * n * delta / period)
    return phase


def shifted(values, period: float, delta: float) -> np.ndarray:
    """Trigonometric interpolant evaluated on the grid shifted by ``delta``."""
    v = np.asarray(values)
    n = v.shape[0]
    real = _is_real(v)
    return _inverse(_spectrum(v) * _shift_phase(n, period, delta, real), n, real)


class _Antiderivative:
    """``int_0^{s_k + delta} f`` for all grid points, reusing one FFT."""

    def __init__(self, values, period: float):
        v = np.asarray(values)
        self.real = _is_real(v)
        n = v.shape[0]
        fv = _spectrum(v)
        self.period = period
        self.n = n
        self.kw = _wavenumbers(n, period, self.real)
        self.mean = fv[0] / n
        self.nyq = fv[n // 2] / n if n % 2 == 0 else 0.0
        ck = np.zeros(fv.shape[0], dtype=complex)
        nz = self.kw != 0
        ck[nz] = fv[nz] / (1j * self.kw[nz])
        if n % 2 == 0:
            ck[n // 2] = 0.0
        self.ck = ck
        self.offset = _inverse(ck, n, self.real)[0]

    def __call__(self, delta: float) -> np.ndarray:
        s = grid(self.n, self.period) + delta
        periodic = self.ck if delta == 0.0 else self.ck * np.exp(1j * self.kw * delta)
        out = _inverse(periodic, self.n, self.real) - self.offset + self.mean * s
        if self.n % 2 == 0:
            w = np.pi * self.n / self.period
            out = out + self.nyq * np.sin(w * s) / w
        return out.real if self.real else out


def shifted_antiderivative(values, period: float, delta: float) -> np.ndarray:
    """``int_0^{s_k + delta} f`` for every grid point ``s_k``."""
    return _Antiderivative(values, period)(delta)


def solve_linear_periodic(p, q, period: float) -> np.ndarray:
    """Periodic solution of ``u' = p u + q`` on the uniform grid.

    Variation of constants is applied exactly over every grid panel, with the
    panel integrals done by 6-point Gauss-Legendre on the trigonometric
    interpolants of ``p`` and ``q``. The periodicity condition fixes the one
    free constant. The recursion then runs in the stable direction: backward
    when the mean of ``p`` is positive, forward when it is negative.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q)
    n = p.shape[0]
    h = period / n
    P_S = p.mean() * period
    if P_S == 0.0:
        raise ValueError("degenerate linear periodic problem: mean of p vanishes")
    P = _Antiderivative(p, period)
    real_q = _is_real(q)
    fq = _spectrum(q)
    Pk = P(0.0)
    Pk1 = np.roll(Pk, -1)
    Pk1[-1] += P_S
    ref = Pk if P_S > 0 else Pk1
    J = np.zeros(n, dtype=np.result_type(q, float))
    for g, wg in zip(GL_NODES, GL_WEIGHTS):
        qt = _inverse(fq * _shift_phase(n, period, h * g, real_q), n, real_q)
        J += wg * h * np.exp(ref - P(h * g)) * qt
    if P_S > 0:
        # u_k = e^{-dP_k} u_{k+1} - int_{s_k}^{s_{k+1}} e^{P(s_k) - P(t)} q(t) dt
        decay = np.exp(-(Pk1 - Pk))
        # u_0 (1 - e^{-P_S}) = -sum_j e^{-(P_j - P_0)} J_j
        u0 = -np.sum(np.exp(-Pk) * J) / (-np.expm1(-P_S))
        return _backward(decay, J, u0)
    # u_{k+1} = e^{dP_k} u_k + int_{s_k}^{s_{k+1}} e^{P(s_{k+1}) - P(t)} q(t) dt
    growth = np.exp(Pk1 - Pk)
    uN = np.sum(np.exp(P_S - Pk1) * J) / (-np.expm1(P_S))
    return _forward(growth, J, uN)


@njit(cache=True)
def _backward(decay, J, u_end):
    n = J.shape[0]
    u = np.empty_like(J)
    nxt = u_end
    for k in range(n - 1, -1, -1):
        nxt = decay[k] * nxt - J[k]
        u[k] = nxt
    return u


@njit(cache=True)
def _forward(growth, J, u0):
    n = J.shape[0]
    u = np.empty_like(J)
    u[0] = u0
    for k in range(n - 1):
        u[k + 1] = growth[k] * u[k] + J[k]
    return u
