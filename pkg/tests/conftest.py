import types
import warnings

import numpy as np
import pytest

from fpcycle import periodic_ode as po
from fpcycle import spectrum as sp
from fpcycle import wkb
from fpcycle.cycle import boundary_frame, find_limit_cycle
from fpcycle.dynamics import jacobian_at, make_builtin


def _pipeline(name, n_samples, overrides=None, tol=1e-8):
    system = make_builtin(name, overrides or {})
    cycle = find_limit_cycle(system, n_samples)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        frame = boundary_frame(system, cycle)
    xi = po.solve_xi(frame)
    phi = po.solve_phi(frame, xi, tol=tol)
    K0 = po.k0_boundary(frame, xi)
    A = jacobian_at(system, system.focus)
    Q = wkb.solve_riccati(A, system.sigma(system.focus))
    wf = float(np.max(np.abs(np.linalg.eigvals(A).imag)))
    freqs = sp.frequencies(frame, xi, wf)
    return types.SimpleNamespace(system=system, cycle=cycle, frame=frame, xi=xi, phi=phi, K0=K0, A=A, Q=Q,
                                 freqs=freqs)


@pytest.fixture(scope="session")
def fig1():
    return _pipeline("fig1", 512)


@pytest.fixture(scope="session")
def fig1_field(fig1):
    return wkb.eikonal_psi_hat(fig1.system, fig1.cycle, fig1.Q, 64, xi=fig1.xi)


@pytest.fixture(scope="session")
def ht():
    return _pipeline("ht_upstate", 2**20, tol=1e-6)


def constant_frame(c=0.7, sigma=1.0, B=1.0, n=256):
    from fpcycle.cycle import BoundaryFrame

    return BoundaryFrame.from_functions(c, B=B, sigma=sigma, n=n)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
