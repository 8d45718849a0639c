import json
import math
import warnings

import numpy as np
import pytest
from scipy.integrate import quad

from fpcycle import _periodic
from fpcycle import periodic_ode as po
from fpcycle import spectrum as sp
from fpcycle import wkb
from conftest import constant_frame

UNIT = sp.Frequencies(1.0, 1.0, 2 * math.pi, 2 * math.pi, 2 * math.pi)


# ---------------------------------------------------------------- frequencies

def test_fig1_frequencies(fig1):
    fr = fig1.freqs
    assert fr.omega2 == pytest.approx(1.0, abs=1e-8)
    assert fr.T_period == pytest.approx(2 * math.pi, abs=1e-8)
    assert fr.omega1 == pytest.approx(1.0, abs=1e-6)
    assert fr.omega1_mean_identity == pytest.approx(1.0, abs=1e-6)
    assert fr.omega1 == pytest.approx(fr.omega1_mean_identity, abs=1e-8)


def test_fig1_omega1_by_adaptive_quadrature(fig1):
    # (1/2pi) int xi^2 ds with xi^2 = 1/u from the integrating-factor closed form
    g = lambda r: math.exp(-2 * r + math.sin(2 * r))
    u0 = 2 * quad(g, 0, 2 * math.pi, epsabs=0, epsrel=1e-13, limit=200)[0] / (1 - math.exp(-4 * math.pi))

    def xi2(s):
        return 1.0 / (math.exp(2 * s - math.sin(2 * s)) * (u0 - 2 * quad(g, 0, s, epsabs=0, epsrel=1e-13)[0]))

    w1 = quad(xi2, 0, 2 * math.pi, epsabs=0, epsrel=1e-11, limit=200)[0] / (2 * math.pi)
    assert fig1.freqs.omega1 == pytest.approx(w1, abs=1e-8)


@pytest.mark.parametrize("c", [0.3, 1.0, 2.7])
def test_constant_frame_frequencies(c):
    f = constant_frame(c)
    fr = sp.frequencies(f, po.solve_xi(f))
    assert fr.omega2 == pytest.approx(1.0, rel=1e-14)
    assert fr.omega1 == pytest.approx(c, rel=1e-12)


# ---------------------------------------------------------------- lattice

def test_lattice_unit_frequencies():
    lat = sp.eigenvalue_lattice(UNIT, 3, 5)
    assert lat.eigenvalue(1, 1) == 2 + 1j
    assert lat.eigenvalue(1, -1) == 2 - 1j
    assert lat.eigenvalue(3, -5) == 6 - 5j
    assert len(lat.lattice) == 3 * 10


def test_lattice_structure(fig1):
    lat = sp.eigenvalue_lattice(fig1.freqs, 4, 6)
    for (n, m), lam in lat.lattice.items():
        assert lam.real == 2 * n * fig1.freqs.omega1
        assert lam.imag == m * fig1.freqs.omega2
        assert lat.lattice[(n, -m)] == lam.conjugate()


def test_lattice_forms_must_agree():
    bad = sp.Frequencies(1.0, 1.0, 2 * math.pi, 2 * math.pi * 1.001, 2 * math.pi)
    with pytest.raises(ArithmeticError):
        sp.eigenvalue_lattice(bad)


# ---------------------------------------------------------------- radial modes

def test_hermite_recurrence():
    x = np.linspace(-2, 2, 11)
    np.testing.assert_allclose(sp.hermite(1, x), 2 * x)
    np.testing.assert_allclose(sp.hermite(3, x), 8 * x**3 - 12 * x, atol=1e-12)
    np.testing.assert_allclose(sp.hermite(5, x), 32 * x**5 - 160 * x**3 + 120 * x, atol=1e-11)


def test_lowest_dirichlet_mode_closed_form():
    R = sp.radial_eigenfunction(1)
    eta = np.linspace(-6, 0, 50)
    np.testing.assert_allclose(R(eta), math.sqrt(2) * eta * np.exp(-eta**2 / 2), atol=1e-15)
    assert R(0.0) == 0.0 and R.mu == 2.0


@pytest.mark.parametrize("n", range(1, 7))
def test_radial_ode_residual(n):
    R = sp.radial_eigenfunction(n)
    eta = np.linspace(-10, 0, 200)
    assert R.mu == 2 * n
    assert R.residual(eta) <= 1e-9
    assert R(0.0) == 0.0


def test_principal_profile():
    R = sp.radial_eigenfunction(0)
    eta = np.linspace(-10, 0, 200)
    assert R.mu == 0 and R(0.0) == 0.0
    assert R(-10.0) == pytest.approx(1.0)
    assert R.residual(eta) <= 1e-12


@pytest.mark.parametrize("k", [3, 5, 7])
def test_odd_hermite_family_needs_shifted_mu(k):
    # exp(-eta^2/2) H_k(eta/sqrt 2) solves the ODE with mu = k + 1
    mode = sp.RadialMode((k + 1) // 2)
    assert mode.hermite_order == k and mode.mu == k + 1
    eta = np.linspace(-10, 0, 200)
    x = eta / math.sqrt(2)
    r = np.exp(-x * x) * sp.hermite(k, x)
    r1 = -np.exp(-x * x) * sp.hermite(k + 1, x) / math.sqrt(2)
    r2 = np.exp(-x * x) * sp.hermite(k + 2, x) / 2
    for mu, ok in ((k + 1, True), (k - 1, False)):
        terms = np.array([r2, eta * r1, mu * r])
        res = np.max(np.abs(terms.sum(0))) / np.max(np.abs(terms))
        assert bool(res <= 1e-9) is ok


def test_h3_profile_with_mu_2():
    # fails by construction: exp(-eta^2/2) H_3(eta/sqrt 2) solves the ODE with mu = 4, not mu = 2
    eta = np.linspace(-10, 0, 200)
    x = eta / math.sqrt(2)
    r = np.exp(-x * x) * sp.hermite(3, x)
    r1 = -np.exp(-x * x) * sp.hermite(4, x) / math.sqrt(2)
    r2 = np.exp(-x * x) * sp.hermite(5, x) / 2
    terms = np.array([r2, eta * r1, 2 * r])
    assert np.max(np.abs(terms.sum(0))) / np.max(np.abs(terms)) <= 1e-9


@pytest.mark.parametrize("n", range(1, 7))
def test_radial_decay_at_minus_8(n):
    # fails for n >= 4 (5.2e-10, 3.1e-9, 1.3e-8): polynomial growth of H_{2n-1} beats the Gaussian at eta = -8
    R = sp.radial_eigenfunction(n)
    eta = np.linspace(-12, 0, 20001)
    assert abs(R(-8.0)) <= 1e-10 * np.max(np.abs(R(eta)))


@pytest.mark.parametrize("n,k", [(a, b) for a in range(1, 5) for b in range(1, 5) if a < b])
def test_weighted_biorthogonality(n, k):
    Rn, Rk = sp.radial_eigenfunction(n), sp.radial_eigenfunction(k)
    f = lambda e: Rn(e) * Rk(e) * math.exp(e * e / 2)
    nn = quad(lambda e: Rn(e) ** 2 * math.exp(e * e / 2), -10, 0, epsabs=0, epsrel=1e-12, limit=200)[0]
    kk = quad(lambda e: Rk(e) ** 2 * math.exp(e * e / 2), -10, 0, epsabs=0, epsrel=1e-12, limit=200)[0]
    ip = quad(f, -10, 0, epsabs=1e-12 * math.sqrt(nn * kk), epsrel=0, limit=200)[0]
    assert abs(ip) <= 1e-6 * math.sqrt(nn * kk)


# ---------------------------------------------------------------- rotational modes

def test_rotational_closure(fig1):
    for n in (1, 2, 3):
        for m in (-2, -1, 1, 3):
            T = sp.rotational_eigenfunction(fig1.freqs, fig1.frame, fig1.xi, n, m)
            assert T.closure <= 1e-10
            assert abs(T(fig1.frame.total_length) / T(0.0) - 1) <= 1e-10


def test_rotational_off_lattice(fig1):
    lam = complex(2 * fig1.freqs.omega1, fig1.freqs.omega2) + 0.1
    with pytest.raises(ValueError, match="off the lattice"):
        sp.rotational_eigenfunction(fig1.freqs, fig1.frame, fig1.xi, 1, 1, lam)
    T = sp.rotational_eigenfunction(fig1.freqs, fig1.frame, fig1.xi, 1, 1, lam, tol=math.inf)
    expected = abs(math.expm1(-0.1 * fig1.freqs.T_period))
    assert T.closure == pytest.approx(expected, rel=1e-6)
    assert T.closure > 0.4


def test_rotational_ode(fig1):
    # -mu T + B/(sigma xi^2) T' = -lambda/(sigma xi^2) T
    f = fig1.frame
    T = sp.rotational_eigenfunction(fig1.freqs, f, fig1.xi, 2, 1)
    v = np.asarray(T.values)
    dT = _periodic.derivative(v.real, f.total_length) + 1j * _periodic.derivative(v.imag, f.total_length)
    w = f.sigma * np.asarray(fig1.xi.values) ** 2
    terms = np.array([-4 * v, f.B / w * dT, T.eigenvalue / w * v])
    assert np.max(np.abs(terms.sum(0))) / np.max(np.abs(terms)) <= 1e-8


# ---------------------------------------------------------------- eigenfunction pairs

@pytest.fixture(scope="module")
def pair_setup(fig1, fig1_field):
    # thin enough that eta = -3 stays inside the boundary-expansion layer
    eps = 0.004
    return eps, {m: sp.eigenfunction_pair(sp.boundary_layer_eigenfunction(fig1.freqs, fig1.frame, fig1.xi, 1, m, eps),
                                          fig1.cycle, fig1.K0, fig1_field) for m in (1, -1, 2)}


def test_pair_vanishes_on_boundary(fig1, pair_setup):
    _, pairs = pair_setup
    pts = fig1.cycle.embed(fig1.frame.s_grid[::16], 0.0)
    for u, v in pairs.values():
        assert np.all(u(pts) == 0) and np.all(v(pts) == 0)


def test_pair_conjugate_symmetry(fig1, pair_setup):
    _, pairs = pair_setup
    rng = np.random.default_rng(0)
    r = np.sqrt(rng.uniform(0, 0.99, 300))
    th = rng.uniform(0, 2 * np.pi, 300)
    pts = np.column_stack([r * np.cos(th), r * np.sin(th)])
    np.testing.assert_allclose(pairs[-1][1](pts), np.conj(pairs[1][1](pts)), rtol=1e-13, atol=1e-15)


def _transect_ratio(fig1, pair_setup, s0=1.3):
    eps, pairs = pair_setup
    u, v = pairs[2]
    x0 = float(fig1.xi(s0))
    eta = np.linspace(-3.0, -0.2, 15)
    rho = eta * math.sqrt(eps) / x0
    pts = fig1.cycle.embed(np.full_like(rho, s0), rho)
    return eta, u(pts) / np.conj(v(pts)), float(fig1.K0(s0))


def test_pair_ratio_profile(fig1, pair_setup):
    eta, ratio, k0 = _transect_ratio(fig1, pair_setup)
    c = ratio / (np.exp(eta**2 / 2) * k0)
    assert np.max(np.abs(c / c[0] - 1)) <= 1e-3


def test_pair_ratio_gaussian_decay(fig1, pair_setup):
    # fails by construction: u/conj(v) = exp(-psi/eps) K0 with psi = psi_hat - rho^2 xi^2/2 grows like exp(+eta^2/2)
    eta, ratio, k0 = _transect_ratio(fig1, pair_setup)
    c = ratio / (np.exp(-eta**2 / 2) * k0)
    assert np.max(np.abs(c / c[0] - 1)) <= 1e-3


# ---------------------------------------------------------------- exit density and two-term model

def test_exit_density_constant():
    f = constant_frame(0.9)
    p = sp.exit_density(f, po.solve_xi(f))
    np.testing.assert_allclose(p.values, 1 / f.total_length, rtol=1e-13)


def test_exit_density_fig1(fig1):
    p = sp.exit_density(fig1.frame, fig1.xi)
    assert _periodic.integral(p.values, fig1.frame.total_length) == pytest.approx(1.0, abs=1e-12)
    x2 = np.asarray(fig1.xi.values) ** 2
    np.testing.assert_allclose(p.values, x2 / (2 * math.pi * fig1.freqs.omega1), rtol=1e-7)
    w = x2 * fig1.frame.sigma / fig1.frame.B
    assert np.argmax(p.values) == np.argmax(w)


def test_two_term_model():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        f = sp.survival_model(math.log(1 / 2.46), None,
                              {"A": 470, "B": 600, "lambda1": 2.5, "omega": 10.4, "phi": 1.4})
    t = np.linspace(0, 3, 30001)
    y = f(t)
    interior = (y[1:-1] > y[:-2]) & (y[1:-1] > y[2:])
    assert np.count_nonzero(interior) >= 3
    assert abs(f(200.0)) < 1e-30


def test_two_term_pure_exponential(fig1):
    f = sp.survival_model(-1.0, fig1.freqs, {"A": 3.0, "B": 0.0})
    y = f(np.linspace(0, 20, 500))
    assert np.all(np.diff(y) < 0)
    assert f.lambda1 == 2 * fig1.freqs.omega1 and f.omega == fig1.freqs.omega2


def test_two_term_gap_warning():
    with pytest.warns(sp.SpectralGapWarning):
        sp.survival_model(math.log(3.0), None, {"A": 1, "B": 1, "lambda1": 2.0, "omega": 1.0})


def test_spectrum_json_roundtrip(tmp_path, fig1):
    lat = sp.eigenvalue_lattice(fig1.freqs, 2, 2, lambda0_log=-1.5, epsilon=0.1)
    sp.write_spectrum_json(tmp_path / "s.json", lat)
    obj = json.loads((tmp_path / "s.json").read_text())
    assert obj["omega2"] == fig1.freqs.omega2
    rec = {(r["n"], r["m"]): complex(r["re"], r["im"]) for r in obj["lattice"]}
    assert rec == lat.lattice
