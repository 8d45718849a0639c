import math
import warnings

import numpy as np
import pytest

from fpcycle import montecarlo as mc
from fpcycle.dynamics import make_builtin

M64 = (1 << 64) - 1


def _xoshiro(state):
    s = [int(v) for v in state]

    def rotl(x, k):
        return ((x << k) | (x >> (64 - k))) & M64

    while True:
        out = (rotl((s[1] * 5) & M64, 7) * 9) & M64
        t = (s[1] << 17) & M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        yield out


def test_rng_matches_reference_generator():
    st = mc.path_seeds(11, 1, 5)[0]
    gen = _xoshiro(st)
    ref = [(next(gen) >> 11) * 2.0**-53 for _ in range(1000)]
    np.testing.assert_array_equal(mc.uniform_stream(11, 5, 1000), ref)


def test_streams_depend_on_seed_and_path():
    a = mc.uniform_stream(0, 0, 8)
    assert not np.array_equal(a, mc.uniform_stream(1, 0, 8))
    assert not np.array_equal(a, mc.uniform_stream(0, 1, 8))
    np.testing.assert_array_equal(mc.path_seeds(3, 4, 2)[1], mc.path_seeds(3, 1, 3)[0])


@pytest.fixture(scope="module")
def hot(fig1):
    system = make_builtin("fig1", {"epsilon": 1.0})
    cfg = mc.SimulationConfig(n_paths=400, dt=1e-3, seed=7)
    return system, cfg, mc.simulate_exits(system, fig1.cycle, cfg)


def test_kernel_against_python_euler_maruyama(fig1, hot):
    system, cfg, ens = hot
    amp = math.sqrt(2 * system.epsilon * cfg.dt)
    for k in range(5):
        gen = _xoshiro(mc.path_seeds(cfg.seed, 1, k)[0])
        unif = lambda: (next(gen) >> 11) * 2.0**-53
        x = np.zeros(2)
        r_old = -1.0
        step = 0
        while True:
            u1, u2 = 1.0 - unif(), unif()
            rad = math.sqrt(-2 * math.log(u1))
            z = rad * np.array([math.cos(2 * math.pi * u2), math.sin(2 * math.pi * u2)])
            y = x + system.drift(x) * cfg.dt + amp * z
            step += 1
            r_new = math.hypot(*y) - 1.0
            if r_new > 0:
                th = r_old / (r_old - r_new)
                t = (step - 1 + th) * cfg.dt
                e = x + th * (y - x)
                break
            x, r_old = y, r_new
        assert ens.status[k] == mc.EXITED
        assert ens.times[k] == pytest.approx(t, abs=1e-7)
        # the kernel's polyline distance differs from the exact circle by ~3e-7
        np.testing.assert_allclose(ens.points[k], e, atol=1e-5)


def test_determinism_and_prefix_stability(fig1, hot):
    system, cfg, ens = hot
    again = mc.simulate_exits(system, fig1.cycle, cfg)
    np.testing.assert_array_equal(again.times, ens.times)
    np.testing.assert_array_equal(again.s, ens.s)
    half = mc.simulate_exits(system, fig1.cycle, mc.SimulationConfig(200, cfg.dt, seed=cfg.seed))
    np.testing.assert_array_equal(half.times, ens.times[:200])
    other = mc.simulate_exits(system, fig1.cycle, mc.SimulationConfig(200, cfg.dt, seed=8))
    assert not np.array_equal(other.times, ens.times[:200])


def test_survival_curve_properties(hot):
    _, _, ens = hot
    grid = np.linspace(0, ens.times.max() * 1.01, 300)
    sc = mc.survival_curve(ens, grid)
    assert sc[0, 1] == 1.0 and np.all(ens.times > 0)
    assert np.all(np.diff(sc[:, 1]) <= 0)
    assert sc[-1, 1] == 0.0


def test_histogram_partition(hot):
    _, _, ens = hot
    t, c = mc.exit_time_histogram(ens, 0.05)
    assert c.sum() == ens.n_paths - ens.n_censored
    assert np.all(np.diff(t) > 0)


def test_exit_arclength_on_cycle(fig1, hot):
    _, _, ens = hot
    ex = ens.exited
    assert np.all((ens.s[ex] >= 0) & (ens.s[ex] < fig1.cycle.total_length))
    ang = np.mod(np.arctan2(ens.points[ex, 1], ens.points[ex, 0]), 2 * np.pi)
    d = np.abs(np.angle(np.exp(1j * (ang - ens.s[ex] * fig1.cycle.orientation))))
    assert np.max(d) < 1e-3
    # exit points sit on the chord of the last step, inside by at most its sag
    r = np.hypot(*ens.points[ex].T)
    assert np.all(r <= 1 + 1e-6) and np.all(r >= 1 - 5e-3)


def test_censoring(fig1):
    system = make_builtin("fig1", {"epsilon": 0.01})
    ens = mc.simulate_exits(system, fig1.cycle, mc.SimulationConfig(50, 1e-2, max_time=1.0))
    assert ens.n_censored == 50
    assert np.all(ens.times == 1.0) and np.all(np.isnan(ens.s))
    sc = mc.survival_curve(ens, [0.0, 0.5, 1.0])
    np.testing.assert_array_equal(sc[:, 1], 1.0)


def test_start_outside_rejected(fig1):
    system = make_builtin("fig1", {})
    with pytest.raises(ValueError):
        mc.simulate_exits(system, fig1.cycle, mc.SimulationConfig(10, 1e-3, start=(1.2, 0.0)))
    with pytest.raises(ValueError):
        mc.simulate_exits(system, fig1.cycle, mc.SimulationConfig(10, 1e-3, start="nowhere"))


def test_uniform_starts_inside(fig1):
    system = make_builtin("fig1", {"epsilon": 0.5})
    ens = mc.simulate_exits(system, fig1.cycle, mc.SimulationConfig(2000, 1e-3, start="uniform-in-D"))
    r = np.hypot(*ens.starts.T)
    assert np.all(r < 1)
    # uniform in the disc: r^2 is uniform on (0, 1)
    assert abs(np.mean(r**2) - 0.5) < 4 * math.sqrt(1 / 12 / 2000)


def test_no_second_peak_at_large_noise(fig1):
    system = make_builtin("fig1", {"epsilon": 1.0})
    ens = mc.simulate_exits(system, fig1.cycle, mc.SimulationConfig(20000, 1e-3, seed=1))
    t, c = mc.exit_time_histogram(ens, 0.05)
    peaks, _ = mc.significant_peaks(t, c, 3.0)
    assert peaks.size <= 1


# ---------------------------------------------------------------- fitting

UPSTATE_FIT = dict(A=470.0, B_amp=600.0, lambda0=1 / 2.46, lambda1=2.5, omega=10.4, phi=1.4)


def _synthetic(p, t):
    return p["A"] * np.exp(-p["lambda0"] * t) + p["B_amp"] * np.exp(-p["lambda1"] * t) * np.cos(p["omega"] * t + p["phi"])


def test_fit_recovers_noiseless_parameters():
    t = np.arange(0.025, 10, 0.05)
    fit = mc.fit_two_term(t, _synthetic(UPSTATE_FIT, t))
    for k, v in UPSTATE_FIT.items():
        assert getattr(fit, k) == pytest.approx(v, rel=1e-6), k
    assert fit.gap_ok and not fit.lambda0_frozen


def test_fit_with_frozen_rate():
    t = np.arange(0.025, 10, 0.05)
    fit = mc.fit_two_term(t, _synthetic(UPSTATE_FIT, t), lambda0=UPSTATE_FIT["lambda0"])
    assert fit.lambda0_frozen and fit.stderr("lambda0") == 0
    for k, v in UPSTATE_FIT.items():
        assert getattr(fit, k) == pytest.approx(v, rel=1e-6), k


def test_fit_pure_exponential():
    t = np.arange(0.025, 10, 0.05)
    p = dict(UPSTATE_FIT, B_amp=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = mc.fit_two_term(t, _synthetic(p, t))
    assert fit.B_amp <= 2 * fit.stderr("B_amp")
    assert fit.A == pytest.approx(470.0, rel=1e-6)


def test_fit_noisy_poisson_coverage():
    rng = np.random.default_rng(5)
    t = np.arange(0.025, 10, 0.05)
    counts = rng.poisson(_synthetic(UPSTATE_FIT, t))
    fit = mc.fit_two_term(t, counts)
    for k in ("A", "lambda0", "omega"):
        assert abs(getattr(fit, k) - UPSTATE_FIT[k]) <= 4 * fit.stderr(k), k


def test_fit_needs_data():
    with pytest.raises(ValueError):
        mc.fit_two_term(np.arange(10.0), np.ones(10))


def test_tail_rate_exponential():
    t = np.arange(0.05, 20, 0.1)
    assert mc.tail_rate(t, 1e5 * np.exp(-0.4 * t)) == pytest.approx(0.4, rel=1e-3)


@pytest.mark.slow
def test_dt_refinement(fig1):
    cfg = dict(n_paths=100_000, seed=6)
    coarse = mc.simulate_exits(fig1.system, fig1.cycle, mc.SimulationConfig(**cfg))
    fine = mc.simulate_exits(fig1.system, fig1.cycle,
                             mc.SimulationConfig(dt=0.5e-3 * fig1.cycle.period, **cfg))
    assert fig1.system.epsilon == 0.1
    assert abs(fine.mean_exit_time() / coarse.mean_exit_time() - 1) <= 0.02


@pytest.mark.slow
def test_exit_density_converges_with_paths(fig1):
    from fpcycle import spectrum as sp

    exact = sp.exit_density(fig1.frame, fig1.xi)
    for seed in (0, 1, 2):
        ens = mc.simulate_exits(fig1.system, fig1.cycle, mc.SimulationConfig(100_000, seed=seed))
        dist = []
        for n in (10_000, 100_000):
            s = ens.s[:n][ens.exited[:n]]
            edges = np.linspace(0, ens.total_length, 33)
            emp = np.histogram(s, bins=edges)[0] / (s.size * np.diff(edges))
            dist.append(np.max(np.abs(emp - exact(0.5 * (edges[1:] + edges[:-1])))))
        assert dist[1] < dist[0], (seed, dist)
