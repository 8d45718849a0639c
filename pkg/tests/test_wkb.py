import math

import numpy as np
import pytest

from fpcycle import wkb

PSI_HAT_FIG1 = 0.10256967755  # converged DOP853 run, 64 rays


def _lyapunov_oracle(A, S):
    # A P + P A^T = -2 S on the symmetric entries (p11, p12, p22)
    a, b, c, d = A.ravel()
    M = np.array([[2 * a, 2 * b, 0.0], [c, a + d, b], [0.0, 2 * c, 2 * d]])
    p11, p12, p22 = np.linalg.solve(M, -2 * np.array([S[0, 0], S[0, 1], S[1, 1]]))
    return np.array([[p11, p12], [p12, p22]])


@pytest.mark.parametrize("c,w0", [(1.0, 0.7), (1.0, 3.0), (0.4, 2.0), (2.5, 0.1)])
def test_riccati_rotational_drift(c, w0):
    A = np.array([[-c, w0], [-w0, -c]])
    r = wkb.solve_riccati(A, np.eye(2))
    np.testing.assert_allclose(r.Q, c * np.eye(2), atol=1e-12)


def test_riccati_fig1_against_lyapunov_oracle(fig1):
    r = wkb.solve_riccati(fig1.A, np.eye(2))
    Q = np.linalg.inv(_lyapunov_oracle(fig1.A, np.eye(2)))
    np.testing.assert_allclose(r.Q, Q, rtol=1e-12)
    assert r.residual <= 1e-12
    assert abs(np.trace(fig1.A + r.Q)) <= 1e-12
    assert abs(r.trace_defect) <= 1e-12


def test_riccati_ht_focus(ht):
    s0 = ht.system.sigma(ht.system.focus)
    r = wkb.solve_riccati(ht.A, s0)
    Q = np.linalg.inv(_lyapunov_oracle(ht.A, s0))
    np.testing.assert_allclose(r.Q, Q, rtol=1e-9)
    assert r.residual <= 1e-10
    assert abs(r.trace_defect) <= 1e-10
    assert np.all(np.linalg.eigvalsh(r.Q) > 0)


def test_riccati_rejects_unstable():
    with pytest.raises(ValueError):
        wkb.solve_riccati(np.array([[0.1, 1.0], [-1.0, 0.1]]), np.eye(2))


def test_eikonal_fig1_golden(fig1_field):
    f = fig1_field
    assert f.psi_hat > 0
    assert f.psi_hat == pytest.approx(PSI_HAT_FIG1, rel=1e-9)
    assert f.boundary_spread <= 0.01


def test_eikonal_launch_values(fig1_field):
    for ray in fig1_field.rays:
        assert ray[0, 5] == pytest.approx(fig1_field.psi_init, abs=1e-8)
        d = ray[0, 1:3] - fig1_field.focus
        assert 0.5 * d @ fig1_field.Q @ d == pytest.approx(fig1_field.psi_init, rel=1e-10)


@pytest.mark.slow
def test_eikonal_dual_integrator(fig1, fig1_field):
    alt = wkb.eikonal_psi_hat(fig1.system, fig1.cycle, fig1.Q, 4 * 64, xi=fig1.xi, method="RK45")
    assert alt.psi_hat == pytest.approx(fig1_field.psi_hat, rel=5e-3)


def test_mfpt_log_structure(fig1, fig1_field):
    a = wkb.mfpt(fig1.system, fig1.frame, fig1.xi, fig1.K0, fig1.Q, fig1_field.psi_hat, 0.1)
    b = wkb.mfpt(fig1.system, fig1.frame, fig1.xi, fig1.K0, fig1.Q, fig1_field.psi_hat, 0.05)
    assert b.tau_bar_log - a.tau_bar_log == pytest.approx(fig1_field.psi_hat / 0.1 - 0.5 * math.log(2), abs=1e-12)
    eps = [0.2, 0.1, 0.07, 0.05, 0.03, 0.02]
    lam = [wkb.mfpt(fig1.system, fig1.frame, fig1.xi, fig1.K0, fig1.Q, fig1_field.psi_hat, e).lambda0 for e in eps]
    assert np.all(np.diff(lam) < 0)


def test_mfpt_overflow_guard(fig1, fig1_field):
    r = wkb.mfpt(fig1.system, fig1.frame, fig1.xi, fig1.K0, fig1.Q, fig1_field.psi_hat, 1e-4)
    assert r.overflow and r.tau_bar == math.inf
    assert math.isfinite(r.tau_bar_log) and r.tau_bar_log > 700


def test_principal_pair_profile(fig1, fig1_field):
    eps = 0.02
    u0, v0 = wkb.principal_pair(fig1.system, fig1.cycle, fig1.frame, fig1.xi, fig1.K0, fig1_field, eps)
    s = fig1.frame.s_grid[::32]
    c = fig1.cycle
    assert np.all(v0(c.embed(s, 0.0)) == 0.0)
    assert np.all(u0(c.embed(s, 0.0)) == 0.0)
    rho = -5 * math.sqrt(eps) / fig1.xi(s)
    np.testing.assert_allclose(v0(c.embed(s, rho)), 1.0, atol=1e-6)


def test_principal_u0_peaks_at_focus(fig1, fig1_field):
    eps = 0.02
    u0, _ = wkb.principal_pair(fig1.system, fig1.cycle, fig1.frame, fig1.xi, fig1.K0, fig1_field, eps)
    rng = np.random.default_rng(3)
    r = np.sqrt(rng.uniform(0, 0.98**2, 2000))
    th = rng.uniform(0, 2 * np.pi, 2000)
    pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
    at_focus = u0(fig1.system.focus[None, :])[0]
    assert at_focus == pytest.approx(1.0)
    assert np.all(u0(pts) <= at_focus)


def test_principal_pair_outside_raises(fig1, fig1_field):
    u0, v0 = wkb.principal_pair(fig1.system, fig1.cycle, fig1.frame, fig1.xi, fig1.K0, fig1_field, 0.1)
    with pytest.raises(ValueError):
        v0([[1.2, 0.0]])


def test_psi_hat_ray_doubling(fig1, fig1_field):
    half = wkb.eikonal_psi_hat(fig1.system, fig1.cycle, fig1.Q, 32, xi=fig1.xi)
    assert half.psi_hat == pytest.approx(fig1_field.psi_hat, rel=5e-3)


def test_lambda0_is_reciprocal_of_tau(fig1, fig1_field):
    for eps in (0.2, 0.05, 1e-4):
        t = wkb.mfpt(fig1.system, fig1.frame, fig1.xi, fig1.K0, fig1.Q, fig1_field.psi_hat, eps)
        assert t.lambda0_log == -t.tau_bar_log
        if not t.overflow:
            assert t.lambda0 * t.tau_bar == pytest.approx(1.0, rel=1e-14)
