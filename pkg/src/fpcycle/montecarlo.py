"""
Exit-time simulation and the two-term histogram fit
===================================================

Paths of ``dx = a dt + sqrt(2 eps) b dw`` are advanced by Euler-Maruyama until
the signed distance to the cycle changes sign. Path ``k`` draws from its own
xoshiro256** stream seeded by ``SeedSequence(seed, spawn_key=(k,))``, so an
ensemble is a pure function of ``(seed, n_paths, dt, start)`` and independent
of evaluation order.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numba import njit
from scipy.optimize import least_squares
from scipy.signal import find_peaks

from ._geometry import BoundaryLocator, build_locator, locate
from ._io import write_csv, write_json
from .cycle import LimitCycle
from .dynamics import DriftDiffusionSystem
from .spectrum import TwoTermModel

__all__ = [
    "SimulationConfig",
    "ExitEnsemble",
    "HistogramFit",
    "FitError",
    "simulate_exits",
    "survival_curve",
    "exit_time_histogram",
    "exit_point_density",
    "significant_peaks",
    "tail_rate",
    "survival_tail_rate",
    "fit_two_term",
    "write_histogram_csv",
    "write_survival_csv",
    "write_exits_csv",
    "write_fit_json",
]

EXITED, CENSORED, BLOWUP = 0, 1, 2


@dataclass(frozen=True)
class SimulationConfig:
    """Parameters of one ensemble.

    ``dt = None`` means ``1e-3`` times the cycle period; ``start`` is ``"focus"``,
    ``"uniform-in-D"`` or a point.
    """

    n_paths: int = 10_000
    dt: float | None = None
    max_time: float | None = None
    seed: int = 0
    start: object = "focus"

    def resolved(self, cycle: LimitCycle) -> "SimulationConfig":
        dt = 1e-3 * cycle.period if self.dt is None else float(self.dt)
        tmax = 200.0 * cycle.period if self.max_time is None else float(self.max_time)
        cfg = SimulationConfig(int(self.n_paths), dt, tmax, int(self.seed), self.start)
        if not dt > 0 or cfg.n_paths < 1 or not tmax >= 100 * dt:
            raise ValueError("need dt > 0, n_paths >= 1 and max_time >= 100 dt")
        return cfg


@dataclass(frozen=True, eq=False)
class ExitEnsemble:
    """Exit samples; ``status`` is 0 exited, 1 censored (time = max_time), 2 blow-up."""

    times: np.ndarray
    s: np.ndarray
    points: np.ndarray
    status: np.ndarray
    starts: np.ndarray
    max_time: float
    total_length: float
    config: SimulationConfig

    @property
    def n_paths(self) -> int:
        return self.times.shape[0]

    @property
    def n_censored(self) -> int:
        return int(np.sum(self.status == CENSORED))

    @property
    def n_blowup(self) -> int:
        return int(np.sum(self.status == BLOWUP))

    @property
    def exited(self) -> np.ndarray:
        return self.status == EXITED

    def mean_exit_time(self) -> float:
        """Mean over uncensored exits (biased low if anything is censored)."""
        return float(np.mean(self.times[self.exited]))


# ---------------------------------------------------------------------------
# random numbers


@njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def _next(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True)
def _uniform(s):
    # 53 random bits in [0, 1)
    return float(_next(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def _normal_pair(s):
    u1 = 1.0 - _uniform(s)
    u2 = _uniform(s)
    r = math.sqrt(-2.0 * math.log(u1))
    return r * math.cos(2.0 * math.pi * u2), r * math.sin(2.0 * math.pi * u2)


def path_seeds(seed: int, n_paths: int, offset: int = 0) -> np.ndarray:
    """xoshiro256** states for paths ``offset .. offset + n_paths - 1``."""
    out = np.empty((n_paths, 4), dtype=np.uint64)
    for k in range(n_paths):
        st = np.random.SeedSequence(entropy=int(seed), spawn_key=(offset + k,)).generate_state(4, np.uint64)
        if not st.any():
            st[0] = 1
        out[k] = st
    return out


def uniform_stream(seed: int, k: int, n: int) -> np.ndarray:
    """First ``n`` uniforms of path ``k`` (exposed for tests)."""
    return _uniforms(path_seeds(seed, 1, k)[0].copy(), n)


@njit(cache=True)
def _uniforms(state, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = _uniform(state)
    return out


# ---------------------------------------------------------------------------
# kernel


@lru_cache(maxsize=None)
def _kernel(drift, noise):
    @njit
    def run(starts, uniform_start, box, seeds, prm, eps, dt, max_steps,
            loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand):
        n = seeds.shape[0]
        times = np.empty(n)
        xs = np.empty((n, 2))
        x0s = np.empty((n, 2))
        status = np.zeros(n, dtype=np.int8)
        amp = math.sqrt(2.0 * eps * dt)
        state = np.empty(4, dtype=np.uint64)
        for k in range(n):
            for j in range(4):
                state[j] = seeds[k, j]
            if uniform_start:
                while True:
                    x1 = box[0, 0] + (box[1, 0] - box[0, 0]) * _uniform(state)
                    x2 = box[0, 1] + (box[1, 1] - box[0, 1]) * _uniform(state)
                    if locate(x1, x2, loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand) < 0.0:
                        break
            else:
                x1 = starts[k, 0]
                x2 = starts[k, 1]
            x0s[k, 0] = x1
            x0s[k, 1] = x2
            r_old = locate(x1, x2, loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand)
            step = 0
            st = CENSORED
            t_exit = max_steps * dt
            e1 = x1
            e2 = x2
            while step < max_steps:
                a1, a2 = drift(x1, x2, prm)
                b11, b12, b21, b22 = noise(x1, x2, prm)
                z1, z2 = _normal_pair(state)
                y1 = x1 + a1 * dt + amp * (b11 * z1 + b12 * z2)
                y2 = x2 + a2 * dt + amp * (b21 * z1 + b22 * z2)
                step += 1
                if not (math.isfinite(y1) and math.isfinite(y2)):
                    st = BLOWUP
                    t_exit = step * dt
                    e1 = x1
                    e2 = x2
                    break
                r_new = locate(y1, y2, loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand)
                if r_new > 0.0:
                    th = r_old / (r_old - r_new)
                    t_exit = (step - 1 + th) * dt
                    e1 = x1 + th * (y1 - x1)
                    e2 = x2 + th * (y2 - x2)
                    st = EXITED
                    break
                x1 = y1
                x2 = y2
                r_old = r_new
            times[k] = t_exit
            xs[k, 0] = e1
            xs[k, 1] = e2
            status[k] = st
        return times, xs, x0s, status

    return run



def _mc_locator(cycle: LimitCycle, max_vertices: int = 65536) -> BoundaryLocator:
    """Locator on the cycle, decimated to at most ``max_vertices`` vertices."""
    n = cycle.n_samples
    if n <= max_vertices:
        return cycle.locator()
    key = ("decimated", max_vertices)
    if key not in cycle._locators:
        step = math.ceil(n / max_vertices)
        cycle._locators[key] = build_locator(np.array(cycle.points[::step]), cycle.orientation)
    return cycle._locators[key]


def simulate_exits(system: DriftDiffusionSystem, cycle: LimitCycle, config: SimulationConfig,
                   epsilon: float | None = None) -> ExitEnsemble:
    """Exit times and exit points of ``config.n_paths`` independent paths."""
    if system.compiled is None:
        raise ValueError(f"system {system.name!r} has no compiled fields for simulation")
    cfg = config.resolved(cycle)
    eps = float(system.epsilon if epsilon is None else epsilon)
    loc = _mc_locator(cycle)
    n = cfg.n_paths
    uniform = isinstance(cfg.start, str) and cfg.start == "uniform-in-D"
    if uniform:
        starts = np.zeros((n, 2))
    else:
        p0 = system.focus if isinstance(cfg.start, str) and cfg.start == "focus" else cfg.start
        if isinstance(p0, str):
            raise ValueError(f"unknown start {p0!r}")
        p0 = np.asarray(p0, dtype=float)
        starts = np.ascontiguousarray(np.broadcast_to(p0, (n, 2)))
        first = np.unique(starts, axis=0)
        if not np.all(cycle.contains(first)) or np.any(loc.signed_distance(first) >= 0):
            raise ValueError("start point not strictly inside the domain")
    max_steps = int(math.floor(cfg.max_time / cfg.dt + 1e-9))
    run = _kernel(system.compiled.drift, system.compiled.noise)
    times, xs, x0s, status = run(starts, uniform, loc.bbox, path_seeds(cfg.seed, n), system.compiled.params,
                                 eps, cfg.dt, max_steps, *loc.args)
    times[status == CENSORED] = cfg.max_time
    s = np.full(n, np.nan)
    ex = status == EXITED
    if np.any(ex):
        lc = cycle.to_local(xs[ex], strict=False)
        ss = lc.s
        bad = ~np.isfinite(ss)
        if np.any(bad):
            _, i = cycle._tree.query(xs[ex][bad])
            ss[bad] = i * cycle.spacing
        s[ex] = ss
    xs[~ex] = np.nan
    return ExitEnsemble(times, s, xs, status, x0s, cfg.max_time, cycle.total_length, cfg)


# ---------------------------------------------------------------------------
# estimators


def survival_curve(ensemble: ExitEnsemble, t_grid) -> np.ndarray:
    """Empirical survivor function on ``t_grid``, shape ``(len(t_grid), 2)``.

    Censored paths survive up to ``max_time``; blow-ups are dropped from the
    denominator.
    """
    t = np.asarray(t_grid, dtype=float)
    if ensemble.n_paths == 0:
        raise ValueError("empty ensemble")
    if np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] > ensemble.max_time:
        raise ValueError("t_grid must be increasing within [0, max_time]")
    ex = np.sort(ensemble.times[ensemble.exited])
    denom = ensemble.n_paths - ensemble.n_blowup
    alive = ex.shape[0] - np.searchsorted(ex, t, side="right") + ensemble.n_censored
    return np.stack([t, alive / denom], axis=1)


def exit_time_histogram(ensemble: ExitEnsemble, bin_width: float, t_max: float | None = None):
    """Counts of uncensored exit times in bins ``[k w, (k+1) w)``; returns ``(centers, counts)``."""
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    t = ensemble.times[ensemble.exited]
    if t_max is None:
        nb = int(math.floor(float(t.max()) / bin_width)) + 1 if t.size else 1
    else:
        nb = max(1, int(math.ceil(float(t_max) / bin_width)))
        t = t[t < nb * bin_width]
    counts = np.bincount((t / bin_width).astype(np.int64), minlength=nb)[:nb]
    return (np.arange(nb) + 0.5) * bin_width, counts


def exit_point_density(ensemble: ExitEnsemble, n_bins: int = 32):
    """Histogram density of the exit arclength over ``[0, S)``; returns ``(edges, density)``."""
    s = ensemble.s[ensemble.exited]
    edges = np.linspace(0.0, ensemble.total_length, n_bins + 1)
    counts, _ = np.histogram(s, bins=edges)
    return edges, counts / (s.shape[0] * np.diff(edges))


def significant_peaks(centers, counts, z: float = 3.0):
    """Local maxima whose prominence exceeds ``z`` Poisson standard deviations.

    The noise scale of a peak is ``sqrt(peak + base)``, with ``base`` the
    count at the higher of its two flanking minima.
    Returns ``(times, zscores)``.
    """
    c = np.asarray(counts, dtype=float)
    pk, props = find_peaks(c, prominence=0)
    prom = props["prominences"]
    score = prom / np.sqrt(np.maximum(c[pk] + (c[pk] - prom), 1.0))
    keep = score >= z
    return np.asarray(centers)[pk[keep]], score[keep]


def tail_rate(centers, counts, mass_fraction: float = 0.75, min_count: float = 5.0) -> float:
    """Exponential decay rate of the histogram tail.

    Weighted regression of ``log count`` on ``t`` over the bins after the first
    ``mass_fraction`` of the mass, weights ``count`` (Poisson variance of the log).
    """
    t = np.asarray(centers, dtype=float)
    c = np.asarray(counts, dtype=float)
    cum = np.cumsum(c) / c.sum()
    sel = (cum >= mass_fraction) & (c >= min_count)
    if sel.sum() < 3:
        raise ValueError("too few populated tail bins for a slope")
    A = np.stack([np.ones(sel.sum()), t[sel]], axis=1) * np.sqrt(c[sel])[:, None]
    coef, *_ = np.linalg.lstsq(A, np.log(c[sel]) * np.sqrt(c[sel]), rcond=None)
    return float(-coef[1])


def survival_tail_rate(ensemble: ExitEnsemble, level: float = 0.25) -> float:
    """Maximum-likelihood exponential rate of the exits after survival drops to ``level``.

    With ``t0`` the empirical ``(1 - level)`` quantile of the exit times,
    ``rate = (#exits after t0) / sum(min(T, max_time) - t0)`` over the paths
    still alive at ``t0`` (censored paths contribute exposure only).
    """
    T = ensemble.times[ensemble.status != BLOWUP]
    ex = ensemble.status[ensemble.status != BLOWUP] == EXITED
    t0 = float(np.quantile(T, 1.0 - level))
    alive = T > t0
    n_ev = int(np.sum(alive & ex))
    if n_ev < 10:
        raise ValueError("too few exits in the tail")
    return n_ev / float(np.sum(T[alive] - t0))


# ---------------------------------------------------------------------------
# two-term fit


class FitError(RuntimeError):
    """The two-term fit did not converge."""


@dataclass(frozen=True)
class HistogramFit:
    A: float
    B_amp: float
    lambda0: float
    lambda1: float
    omega: float
    phi: float
    residual_norm: float
    covariance_diag: tuple
    lambda0_frozen: bool = False
    window: tuple = (0.0, math.inf)
    n_bins: int = 0
    gap_ok: bool = True
    nfev: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def model(self) -> TwoTermModel:
        return TwoTermModel(self.A, self.B_amp, self.lambda0, self.lambda1, self.omega, self.phi)

    def __call__(self, t):
        return self.model(t)

    def stderr(self, name: str) -> float:
        names = ["A", "B_amp", "lambda0", "lambda1", "omega", "phi"]
        return math.sqrt(max(self.covariance_diag[names.index(name)], 0.0))


def _linear_amplitudes(t, c, w, lam0, lam1, omega):
    X = np.stack([np.exp(-lam0 * t), np.exp(-lam1 * t) * np.cos(omega * t), -np.exp(-lam1 * t) * np.sin(omega * t)], 1)
    coef, *_ = np.linalg.lstsq(X * w[:, None], c * w, rcond=None)
    A, bc, bs = coef
    return A, math.hypot(bc, bs), math.atan2(bs, bc)


def _candidate_frequencies(t, r, w_min, w_max, n_grid=4000, n_best=3):
    """Frequencies of the ``n_best`` largest local maxima of ``|DFT r|`` on ``[w_min, w_max]``."""
    grid = np.linspace(w_min, w_max, n_grid)
    mag = np.abs(np.exp(-1j * np.outer(grid, t)) @ r)
    pk, _ = find_peaks(mag)
    if pk.size == 0:
        return [float(grid[np.argmax(mag)])]
    best = pk[np.argsort(mag[pk])[::-1][:n_best]]
    return [float(w) for w in grid[best]]


def fit_two_term(centers, counts, init: HistogramFit | None = None, *, lambda0: float | None = None,
                 lambda1_init: float | None = None, window: tuple | None = None,
                 max_nfev: int = 20000) -> HistogramFit:
    """Poisson-weighted Levenberg-Marquardt fit of ``A e^{-l0 t} + B e^{-l1 t} cos(w t + phi)``.

    Parameters
    ----------
    centers, counts : array_like
        Histogram bins (counts need not be integers).
    init : HistogramFit, optional
        Starting point; otherwise l0 from the tail slope, l1 from
        ``lambda1_init`` (else ``5 l0``), A, B, phi by linear least squares and
        one start per strong DFT peak of the detrended histogram (the lowest
        cost wins).
    lambda0 : float, optional
        Freeze the principal rate at this value.
    window : (t_lo, t_hi), optional
        Restrict the fit to bins with centers in this range.
    """
    t = np.asarray(centers, dtype=float)
    c = np.asarray(counts, dtype=float)
    if window is not None:
        m = (t >= window[0]) & (t <= window[1])
        t, c = t[m], c[m]
    if np.count_nonzero(c) < 30:
        raise ValueError("need at least 30 nonzero bins")
    w = 1.0 / np.sqrt(np.maximum(c, 1.0))
    frozen = lambda0 is not None
    if init is not None:
        starts = [[init.A, init.B_amp, init.lambda0, init.lambda1, init.omega, init.phi]]
    else:
        # multi-start over the strongest DFT peaks of the detrended histogram;
        # at least one full period must fit in the window
        lam0 = float(lambda0) if frozen else tail_rate(t, c)
        A0, *_ = _linear_amplitudes(t, c, w, lam0, 50 * lam0, 1.0)
        bw = float(np.median(np.diff(t)))
        lam1 = float(lambda1_init) if lambda1_init is not None else 5 * lam0
        starts = []
        for om in _candidate_frequencies(t, c - A0 * np.exp(-lam0 * t), 2 * math.pi / (t[-1] - t[0]), math.pi / bw):
            A, B, ph = _linear_amplitudes(t, c, w, lam0, lam1, om)
            starts.append([A, B, lam0, lam1, om, ph])
    for p in starts:
        if frozen:
            p[2] = float(lambda0)
    free = [0, 1, 3, 4, 5] if frozen else [0, 1, 2, 3, 4, 5]

    def full(q, p0):
        p = np.array(p0, dtype=float)
        p[free] = q
        return p

    def resid(q, p0):
        A, B, l0, l1, om, ph = full(q, p0)
        return (A * np.exp(-l0 * t) + B * np.exp(-l1 * t) * np.cos(om * t + ph) - c) * w

    def jac(q, p0):
        A, B, l0, l1, om, ph = full(q, p0)
        e0 = np.exp(-l0 * t)
        e1 = np.exp(-l1 * t)
        co = np.cos(om * t + ph)
        si = np.sin(om * t + ph)
        J = np.stack([e0, e1 * co, -A * t * e0, -B * t * e1 * co, -B * t * e1 * si, -B * e1 * si], 1)
        return J[:, free] * w[:, None]

    sol, p0, nfev = None, None, 0
    for cand in starts:
        trial = least_squares(resid, np.array(cand, dtype=float)[free], jac=jac, method="lm", args=(cand,),
                              xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=max_nfev)
        nfev += trial.nfev
        if trial.status <= 0 or not np.all(np.isfinite(trial.x)):
            continue
        if sol is None or trial.cost < sol.cost:
            sol, p0 = trial, cand
    if sol is None:
        raise FitError("two-term fit did not converge from any starting point")
    A, B, l0, l1, om, ph = full(sol.x, p0)
    if B < 0:
        B, ph = -B, ph + math.pi
    if om < 0:
        om, ph = -om, -ph
    ph = math.remainder(ph, 2 * math.pi) % (2 * math.pi)
    # Poisson weights make (J^T J)^-1 the parameter covariance without rescaling
    Jf = jac(sol.x, p0)
    cov_free = np.diag(np.linalg.pinv(Jf.T @ Jf))
    cov = np.zeros(6)
    cov[free] = cov_free
    gap_ok = bool(l1 > l0 > 0)
    if not gap_ok:
        warnings.warn(f"fitted lambda1 = {l1:.4g} does not exceed lambda0 = {l0:.4g}", RuntimeWarning, stacklevel=2)
    win = (float(t[0]), float(t[-1]))
    return HistogramFit(float(A), float(B), float(l0), float(l1), float(om), float(ph),
                        float(np.linalg.norm(sol.fun)), tuple(float(v) for v in cov), frozen, win,
                        int(t.shape[0]), gap_ok, nfev)


# ---------------------------------------------------------------------------
# output


def write_histogram_csv(path, centers, counts) -> None:
    write_csv(path, ["t_center", "count"], [centers, np.asarray(counts)])


def write_survival_csv(path, curve) -> None:
    write_csv(path, ["t", "p"], [curve[:, 0], curve[:, 1]])


def write_exits_csv(path, ensemble: ExitEnsemble) -> None:
    write_csv(path, ["t", "s", "status"], [ensemble.times, ensemble.s, ensemble.status.astype(int)])


def write_fit_json(path, fit: HistogramFit, extra: dict | None = None) -> None:
    names = ["A", "B_amp", "lambda0", "lambda1", "omega", "phi"]
    obj = {k: getattr(fit, k) for k in names}
    obj.update({
        "residual_norm": fit.residual_norm,
        "stderr": {k: fit.stderr(k) for k in names},
        "free": {k: not (k == "lambda0" and fit.lambda0_frozen) for k in names},
        "window": list(fit.window),
        "n_bins": fit.n_bins,
        "gap_ok": fit.gap_ok,
    })
    obj.update(fit.extra)
    if extra:
        obj.update(extra)
    write_json(path, obj)
