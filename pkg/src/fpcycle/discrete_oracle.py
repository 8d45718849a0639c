"""
Finite-difference oracle for the spectrum
=========================================

``-L* = -(eps sigma:grad^2 + a.grad)`` is discretized on a uniform grid over the
bounding box of the cycle, with Dirichlet data on the cycle. Interior nodes
next to the boundary use Shortley-Weller stencils with the exact distance to
the curve along each grid line; the first-order "staircase" treatment (outside
neighbours simply set to zero) is available as an option.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as sla
from numba import njit
from scipy.linalg import eig
from scipy.special import jn_zeros

from ._geometry import locate
from ._io import write_json
from .cycle import LimitCycle
from .dynamics import DriftDiffusionSystem

__all__ = [
    "GridOperator",
    "RitzResult",
    "SpectrumComparison",
    "OracleError",
    "discretize",
    "apply_stencil",
    "leading_eigenvalues",
    "dense_eigenvalues",
    "compare_spectrum",
    "bessel_j0_zero",
    "write_oracle_json",
]

# neighbour offsets: E, W, N, S, NE, NW, SE, SW
_OFFS = np.array([(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, 1), (1, -1), (-1, -1)])


class OracleError(RuntimeError):
    """Factorization or eigensolver failure."""


@dataclass(frozen=True, eq=False)
class GridOperator:
    """Sparse ``-L*`` restricted to the interior grid nodes.

    ``coef[k, 0]`` is the diagonal and ``coef[k, 1 + j]`` the weight of
    neighbour ``_OFFS[j]`` (zero where that neighbour is not interior).
    """

    nx: int
    ny: int
    spacing: np.ndarray
    origin: np.ndarray
    node_ij: np.ndarray
    interior_index: np.ndarray
    matrix: sparse.csr_matrix
    coef: np.ndarray
    neighbours: np.ndarray
    epsilon: float
    boundary: str
    advection: str

    @property
    def n(self) -> int:
        return self.node_ij.shape[0]

    @property
    def h(self) -> float:
        """Largest grid spacing."""
        return float(self.spacing.max())

    def coordinates(self) -> np.ndarray:
        return self.origin + self.spacing * self.node_ij


@njit(cache=True)
def _crossing(px, py, dx, dy, loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand):
    """Fraction ``t`` in (0, 1] where the segment ``p + t d`` meets the cycle."""
    lo = 0.0
    hi = 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        r = locate(px + mid * dx, py + mid * dy, loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand)
        if r < 0.0:
            lo = mid
        else:
            hi = mid
    return max(0.5 * (lo + hi), 1e-12)


@njit(cache=True)
def _crossings(pts, dirs, loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand):
    out = np.empty(pts.shape[0])
    for k in range(pts.shape[0]):
        out[k] = _crossing(pts[k, 0], pts[k, 1], dirs[k, 0], dirs[k, 1],
                           loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand)
    return out


def discretize(system: DriftDiffusionSystem, cycle: LimitCycle, nx: int = 201, ny: int | None = None, *,
               epsilon: float | None = None, boundary: str = "shortley-weller", advection: str = "central",
               margin: float = 0.02, drift: bool = True, regularized: bool = True,
               min_interior: int = 400) -> GridOperator:
    """Assemble ``-L*`` on an ``nx x ny`` node grid over the cycle's bounding box.

    The grid spacing may differ between the axes; for ``nx == ny`` on a square
    box the cells are square.

    Parameters
    ----------
    boundary : {"shortley-weller", "staircase"}
    advection : {"central", "upwind"}
    drift : bool
        ``False`` drops the drift term (pure diffusion).
    """
    if boundary not in ("shortley-weller", "staircase"):
        raise ValueError(f"unknown boundary treatment {boundary!r}")
    if advection not in ("central", "upwind"):
        raise ValueError(f"unknown advection scheme {advection!r}")
    ny = nx if ny is None else ny
    eps = float(system.epsilon if epsilon is None else epsilon)
    P = cycle.points
    lo, hi = P.min(axis=0), P.max(axis=0)
    ext = hi - lo
    lo = lo - margin * ext
    hi = hi + margin * ext
    hxy = (hi - lo) / np.array([nx - 1, ny - 1])
    origin = lo
    I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    ij = np.stack([I.ravel(), J.ravel()], axis=1)
    X = origin + hxy * ij
    inside = cycle.contains(X)
    loc = cycle.locator()
    rho = loc.signed_distance(X)
    inside &= rho < 0
    idx = -np.ones(nx * ny, dtype=np.int64)
    node = np.flatnonzero(inside)
    idx[node] = np.arange(node.size)
    n = node.size
    if n < min_interior:
        raise ValueError(f"only {n} interior nodes (< {min_interior}): refine the grid")
    ij = ij[node]
    x = X[node]

    a = system.drift(x) if drift else np.zeros_like(x)
    S = system.sigma(x, regularized=regularized)
    s11, s12, s22 = S[:, 0, 0], S[:, 0, 1], S[:, 1, 1]

    nb = -np.ones((n, 8), dtype=np.int64)
    for j, (di, dj) in enumerate(_OFFS):
        ii, jj = ij[:, 0] + di, ij[:, 1] + dj
        ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
        flat = np.where(ok, ii * ny + jj, 0)
        nb[:, j] = np.where(ok, idx[flat], -1)

    coef = np.zeros((n, 9))
    # arm lengths (in units of h) along +-x and +-y
    arms = np.ones((n, 4))
    if boundary == "shortley-weller":
        for j in range(4):
            cut = nb[:, j] < 0
            if np.any(cut):
                d = np.repeat((_OFFS[j] * hxy)[None, :], cut.sum(), axis=0)
                arms[cut, j] = _crossings(np.ascontiguousarray(x[cut]), d, *loc.args)
    for h, (jp, jm), diff, adv in ((hxy[0], (0, 1), s11, a[:, 0]), (hxy[1], (2, 3), s22, a[:, 1])):
        hp = arms[:, jp] * h
        hm = arms[:, jm] * h
        cp = 2 * eps * diff / (hp * (hp + hm))
        cm = 2 * eps * diff / (hm * (hp + hm))
        if advection == "central":
            dp = adv * hm / (hp * (hp + hm))
            dm = -adv * hp / (hm * (hp + hm))
            dc = adv * (hp - hm) / (hp * hm)
        else:
            pos = adv > 0
            dp = np.where(pos, adv / hp, 0.0)
            dm = np.where(pos, 0.0, -adv / hm)
            dc = np.where(pos, -adv / hp, adv / hm)
        coef[:, 0] += -(cp + cm) + dc
        coef[:, 1 + jp] += cp + dp
        coef[:, 1 + jm] += cm + dm
    # cross term 2 eps s12 d2/dxdy with the 4-point stencil
    cx = 2 * eps * s12 / (4 * hxy[0] * hxy[1])
    coef[:, 5] += cx
    coef[:, 8] += cx
    coef[:, 6] -= cx
    coef[:, 7] -= cx
    coef = -coef  # -L*
    coef[:, 1:][nb < 0] = 0.0

    rows = np.repeat(np.arange(n), 9)
    cols = np.concatenate([np.arange(n)[:, None], nb], axis=1).ravel()
    vals = coef.ravel()
    keep = (cols >= 0) & (vals != 0)
    M = sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))
    M.sum_duplicates()
    return GridOperator(nx, ny, hxy, origin, ij, idx.reshape(nx, ny), M, coef, nb, eps, boundary, advection)


# neighbour slots in increasing node-index order (SW, W, NW, S, centre, N, SE, E, NE)
_ORDER = (8, 2, 6, 4, 0, 3, 7, 1, 5)


def apply_stencil(op: GridOperator, u) -> np.ndarray:
    """``(-L*) u`` by direct stencil application (independent of the sparse matrix).

    Terms are accumulated in increasing neighbour index, the order of a CSR
    row, so both products round identically.
    """
    u = np.asarray(u)
    out = np.zeros(op.n, dtype=np.result_type(u, float))
    rows = np.arange(op.n)
    for slot in _ORDER:
        c = op.coef[:, slot]
        nbr = rows if slot == 0 else op.neighbours[:, slot - 1]
        m = (nbr >= 0) & (c != 0)
        out[m] = out[m] + c[m] * u[nbr[m]]
    return out


@dataclass(frozen=True)
class RitzResult:
    """Eigenvalues of ``-L*`` nearest the shift, closed under conjugation.

    ``edge[k]`` flags a complex value whose conjugate fell outside the ``k``
    returned values.
    """

    values: np.ndarray
    residuals: np.ndarray
    edge: np.ndarray
    shift: complex
    method: str

    def principal(self) -> complex:
        real = self.values[np.abs(self.values.imag) <= 1e-8 * np.maximum(1.0, np.abs(self.values))]
        if real.size == 0:
            raise ValueError("no real eigenvalue among the Ritz values")
        return real[np.argmin(real.real)]

    def conjugate_pairs(self) -> np.ndarray:
        """Values with ``Im > 0`` whose conjugate is also present, sorted by real part."""
        v = self.values
        up = v[(v.imag > 1e-8) & ~self.edge]
        return up[np.argsort(up.real)]


def _residuals(A, vals, vecs):
    r = A @ vecs - vecs * vals[None, :]
    return np.linalg.norm(r, axis=0) / np.linalg.norm(vecs, axis=0)


def _close_conjugates(vals, vecs, shift, k, tol=1e-8):
    allv = list(vals)
    allx = [vecs[:, i] for i in range(vals.size)]
    for lam, v in zip(vals, vecs.T):
        if abs(lam.imag) > tol * max(1.0, abs(lam)):
            if not np.any(np.abs(np.asarray(allv) - np.conj(lam)) <= 1e-6 * max(1.0, abs(lam))):
                allv.append(np.conj(lam))
                allx.append(np.conj(v))
    allv = np.asarray(allv)
    order = np.lexsort((allv.imag, np.round(np.abs(allv - shift), 10)))[:k]
    keepv = allv[order]
    keepx = np.stack([allx[i] for i in order], axis=1)
    edge = np.zeros(keepv.size, dtype=bool)
    for i, lam in enumerate(keepv):
        if abs(lam.imag) > tol * max(1.0, abs(lam)):
            edge[i] = not np.any(np.abs(keepv - np.conj(lam)) <= 1e-6 * max(1.0, abs(lam)))
    return keepv, keepx, edge


def dense_eigenvalues(op: GridOperator, k: int = 10, shift: complex = 0.0, max_nodes: int = 4000) -> RitzResult:
    """All eigenvalues by the dense QR algorithm; the ``k`` nearest ``shift`` are returned."""
    if op.n > max_nodes:
        raise ValueError(f"dense path limited to {max_nodes} nodes (have {op.n})")
    A = op.matrix.toarray()
    w, V = eig(A)
    vals, vecs, edge = _close_conjugates(w, V, complex(shift), k)
    return RitzResult(vals, _residuals(A, vals, vecs), edge, complex(shift), "dense")


def leading_eigenvalues(op: GridOperator, k: int = 6, shift: complex = 0.0, *, seed: int = 0,
                        tol: float = 1e-8, method: str = "arnoldi") -> RitzResult:
    """``k`` eigenvalues of ``-L*`` nearest ``shift`` by shift-invert Arnoldi.

    The starting vector is seeded. Every value is checked against
    ``||(-L* - lambda) v|| / ||v|| <= tol``; values that miss it get one step of
    shifted inverse iteration. Small problems (``method="dense"``) use the
    dense solver instead.
    """
    if not 1 <= k <= 20:
        raise ValueError("k must be in 1..20")
    if method == "dense":
        return dense_eigenvalues(op, k, shift)
    A = op.matrix
    shift = complex(shift)
    v0 = np.random.default_rng(seed).standard_normal(op.n)
    try:
        if shift.imag == 0.0:
            w, V = sla.eigs(A, k=k, sigma=shift.real, which="LM", v0=v0, tol=0, maxiter=10 * op.n)
        else:
            Ac = A.astype(complex)
            w, V = sla.eigs(Ac, k=k, sigma=shift, which="LM", v0=v0.astype(complex), tol=0, maxiter=10 * op.n)
    except (RuntimeError, sla.ArpackError) as exc:
        if op.n <= 4000:
            return dense_eigenvalues(op, k, shift)
        raise OracleError(f"shift-invert Arnoldi failed: {exc}") from exc
    res = _residuals(A, w, V)
    for i in np.flatnonzero(res > tol):
        lam = w[i]
        try:
            lu = sla.splu((A - (lam + 1e-10 * max(1.0, abs(lam))) * sparse.identity(op.n, format="csc")).tocsc())
        except RuntimeError as exc:
            raise OracleError(f"factorization failed near {lam}: {exc}") from exc
        v = lu.solve(V[:, i].astype(complex))
        v /= np.linalg.norm(v)
        w[i] = np.vdot(v, A @ v)
        V[:, i] = v
    vals, vecs, edge = _close_conjugates(w, V, shift, k)
    res = _residuals(A, vals, vecs)
    if np.any(res > tol):
        raise OracleError(f"Ritz residual {res.max():.3g} exceeds {tol:.1g}")
    return RitzResult(vals, res, edge, shift, "arnoldi")


@dataclass(frozen=True)
class SpectrumComparison:
    matches: list = field(default_factory=list)
    unmatched: list = field(default_factory=list)
    radius: float = 0.0

    @property
    def unmatched_count(self) -> int:
        return len(self.unmatched)


def compare_spectrum(ritz, lattice, radius: float | None = None) -> SpectrumComparison:
    """Greedy nearest-neighbour matching of Ritz values to lattice points.

    ``lattice`` is a :class:`~fpcycle.spectrum.SpectrumResult` or a mapping
    ``(n, m) -> lambda``. Pairs closer than ``radius`` (default
    ``0.5 min(omega1, omega2)``) are matched in order of increasing distance.
    """
    vals = np.asarray(getattr(ritz, "values", ritz), dtype=complex)
    table = getattr(lattice, "lattice", lattice)
    if radius is None:
        fr = lattice.freqs
        radius = 0.5 * min(fr.omega1, fr.omega2)
    keys = list(table)
    pairs = []
    for a, key in enumerate(keys):
        d = np.abs(vals - table[key])
        for b in np.flatnonzero(d < radius):
            pairs.append((float(d[b]), a, int(b)))
    pairs.sort()
    used_l, used_r = set(), set()
    matches = []
    for d, a, b in pairs:
        if a in used_l or b in used_r:
            continue
        used_l.add(a)
        used_r.add(b)
        n, m = keys[a]
        lam = complex(table[keys[a]])
        z = vals[b]
        matches.append({
            "n": n, "m": m,
            "lattice_re": lam.real, "lattice_im": lam.imag,
            "ritz_re": z.real, "ritz_im": z.imag,
            "re_err": z.real - lam.real, "im_err": z.imag - lam.imag,
            "re_rel": (z.real - lam.real) / abs(lam.real) if lam.real else math.nan,
            "im_rel": (z.imag - lam.imag) / abs(lam.imag) if lam.imag else math.nan,
        })
    matches.sort(key=lambda r: (r["n"], r["m"]))
    unmatched = [complex(vals[b]) for b in range(vals.size) if b not in used_r]
    return SpectrumComparison(matches, unmatched, float(radius))


# ---------------------------------------------------------------------------
# Bessel oracle for the pure-diffusion disc


def bessel_j0_zero() -> float:
    """First zero of ``J0``; ``j01^2`` is the principal Dirichlet eigenvalue of the unit disc."""
    return float(jn_zeros(0, 1)[0])


def write_oracle_json(path, op: GridOperator, ritz: RitzResult, comparison: SpectrumComparison,
                      extra: dict | None = None) -> None:
    obj = {
        "epsilon": op.epsilon,
        "grid": {"nx": op.nx, "ny": op.ny, "hx": op.spacing[0], "hy": op.spacing[1], "interior_nodes": op.n,
                 "boundary": op.boundary, "advection": op.advection},
        "ritz": [{"re": z.real, "im": z.imag, "residual": r} for z, r in zip(ritz.values, ritz.residuals)],
        "matches": [{k: m[k] for k in ("n", "m", "re_err", "im_err", "re_rel", "im_rel")} for m in comparison.matches],
        "unmatched_count": comparison.unmatched_count,
    }
    if extra:
        obj.update(extra)
    write_json(path, obj)
