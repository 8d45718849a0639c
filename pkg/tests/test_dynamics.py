import math

import numpy as np
import pytest

from fpcycle.dynamics import BUILTINS, builtin_parameters, jacobian_at, make_builtin


def test_fig1_drift_and_jacobian_at_origin():
    s = make_builtin("fig1", {})
    np.testing.assert_array_equal(s.drift(np.zeros(2)), [0.0, 0.0])
    np.testing.assert_allclose(jacobian_at(s, (0.0, 0.0)), [[0, 1], [-1, -1]], atol=1e-12)


@pytest.mark.parametrize("point", [(1.0, 0.0), (0.3, -0.7), (-0.5, 0.45)])
def test_fig1_jacobian_matches_central_differences(point):
    s = make_builtin("fig1", {})
    h = 1e-5
    p = np.asarray(point)
    fd = np.column_stack([(s.drift(p + h * e) - s.drift(p - h * e)) / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(jacobian_at(s, p), fd, atol=1e-6)


def test_nan_point_is_rejected():
    s = make_builtin("fig1", {})
    with pytest.raises(ValueError):
        jacobian_at(s, (math.nan, 0.0))


def test_ht_default_parameters():
    p = builtin_parameters("ht_upstate")
    assert (p["tau"], p["t_r"], p["U"], p["w_T"], p["T"]) == (0.05, 0.8, 0.5, 12.6, 2.0)


def test_ht_focus_is_root_of_reduced_quadratic():
    # steady state: u = T/(x U w_T - 1), (1 - x)(x U w_T - 1) = t_r U T x
    s = make_builtin("ht_upstate", {})
    p = builtin_parameters("ht_upstate")
    k = p["U"] * p["w_T"]
    roots = np.roots([k, -(k + 1 - p["t_r"] * p["U"] * p["T"]), 1.0])
    x = s.focus[0]
    assert np.min(np.abs(roots - x)) < 1e-9
    u = p["T"] / (x * k - 1)
    assert s.focus[1] == pytest.approx(p["T"] + u, rel=1e-9)
    ev = np.linalg.eigvals(jacobian_at(s, s.focus))
    assert np.all(ev.real < 0) and abs(ev[0].imag) > 0


def test_unknown_names_are_errors():
    assert set(BUILTINS) == {"fig1", "ht_upstate"}
    with pytest.raises(KeyError):
        make_builtin("nope", {})
    with pytest.raises(KeyError):
        make_builtin("fig1", {"bogus": 1.0})


def test_epsilon_override():
    assert make_builtin("fig1", {"epsilon": 0.05}).epsilon == 0.05
    with pytest.raises(ValueError):
        make_builtin("fig1", {"epsilon": -1.0})


def test_fig1_radial_drift_vanishes_on_circle():
    s = make_builtin("fig1", {})
    th = np.linspace(0, 2 * np.pi, 1000, endpoint=False)
    x = np.stack([np.cos(th), np.sin(th)], axis=1)
    assert np.max(np.abs(np.sum(s.drift(x) * x, axis=1))) <= 1e-12


@pytest.mark.parametrize("name", BUILTINS)
def test_sigma_symmetric(name):
    s = make_builtin(name, {})
    rng = np.random.default_rng(1)
    pts = s.focus + rng.uniform(-0.5, 0.5, size=(200, 2))
    sig = s.sigma(pts)
    assert np.max(np.abs(sig - np.swapaxes(sig, -1, -2))) <= 1e-14


@pytest.mark.parametrize("name", BUILTINS)
def test_analytic_jacobian_random_points(name):
    s = make_builtin(name, {})
    rng = np.random.default_rng(2)
    pts = s.focus + rng.uniform(-0.5, 0.5, size=(400, 2)) * np.maximum(np.abs(s.focus), 1.0)
    if name == "ht_upstate":
        # keep off the kink y = T of the rectified gain
        pts = pts[np.abs(pts[:, 1] - s.params["T"]) > 1e-3]
    pts = pts[:100]
    assert len(pts) == 100
    for p in pts:
        h = 1e-5 * np.maximum(np.abs(p), 1.0)
        fd = np.column_stack([(s.drift(p + hk * e) - s.drift(p - hk * e)) / (2 * hk) for hk, e in zip(h, np.eye(2))])
        J = s.analytic_jacobian(p)
        assert np.max(np.abs(J - fd)) <= 1e-6 * np.max(np.abs(J))
