"""Compiled point-versus-polyline geometry: inside tests and signed distance."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.spatial import cKDTree


@njit(cache=True)
def _winding_inside(px, py, vx, vy):
    # crossing-number parity; identical to the winding test for simple curves
    m = vx.shape[0]
    inside = False
    j = m - 1
    for i in range(m):
        yi, yj = vy[i], vy[j]
        if (yi > py) != (yj > py):
            xc = vx[i] + (py - yi) * (vx[j] - vx[i]) / (yj - yi)
            if px < xc:
                inside = not inside
        j = i
    return inside


@njit(cache=True)
def _winding_many(p, vx, vy):
    out = np.empty(p.shape[0], dtype=np.bool_)
    for k in range(p.shape[0]):
        out[k] = _winding_inside(p[k, 0], p[k, 1], vx, vy)
    return out


def winding_inside(points, poly) -> np.ndarray:
    """Strict inside test of ``points`` against the closed polyline ``poly``."""
    p = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    poly = np.asarray(poly, dtype=float)
    return _winding_many(p, np.ascontiguousarray(poly[:, 0]), np.ascontiguousarray(poly[:, 1]))


@njit(cache=True)
def _seg_normal(vx, vy, i, orient):
    m = vx.shape[0]
    j = (i + 1) % m
    dx = vx[j] - vx[i]
    dy = vy[j] - vy[i]
    ln = math.sqrt(dx * dx + dy * dy)
    return orient * dy / ln, -orient * dx / ln


@njit(cache=True)
def _signed_distance_candidates(px, py, vx, vy, orient, cand, lo, hi):
    """Signed distance to the polyline using segments starting at ``cand[lo:hi]``
    and their predecessors. Sign from the segment normal, or the summed normals
    of the two segments meeting at a vertex foot."""
    m = vx.shape[0]
    best = 1e300
    bi = -1
    bt = 0.0
    for q in range(lo, hi):
        c = cand[q]
        for i in (c, (c - 1 + m) % m):
            j = (i + 1) % m
            dx = vx[j] - vx[i]
            dy = vy[j] - vy[i]
            l2 = dx * dx + dy * dy
            t = ((px - vx[i]) * dx + (py - vy[i]) * dy) / l2
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            ex = px - (vx[i] + t * dx)
            ey = py - (vy[i] + t * dy)
            d2 = ex * ex + ey * ey
            if d2 < best:
                best = d2
                bi = i
                bt = t
    j = (bi + 1) % m
    fx = vx[bi] + bt * (vx[j] - vx[bi])
    fy = vy[bi] + bt * (vy[j] - vy[bi])
    if bt <= 0.0 or bt >= 1.0:
        v = bi if bt <= 0.0 else j
        n1x, n1y = _seg_normal(vx, vy, (v - 1 + m) % m, orient)
        n2x, n2y = _seg_normal(vx, vy, v, orient)
        nx, ny = n1x + n2x, n1y + n2y
    else:
        nx, ny = _seg_normal(vx, vy, bi, orient)
    sgn = 1.0 if (px - fx) * nx + (py - fy) * ny > 0.0 else -1.0
    return sgn * math.sqrt(best)


@njit(cache=True)
def locate(px, py, loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand):
    """Signed distance of ``(px, py)`` from the cycle (negative inside).

    Exact near the curve; bilinear in the node table elsewhere, where only the
    sign is reliable. Points outside the table box count as far outside.
    """
    x0, y0, h, orient = loc_f[0], loc_f[1], loc_f[2], loc_f[3]
    nx, ny = loc_i[0], loc_i[1]
    u = (px - x0) / h
    v = (py - y0) / h
    if not (u >= 0.0 and v >= 0.0 and u < nx and v < ny):
        return 1e300
    i = int(u)
    j = int(v)
    c = i * ny + j
    if flags[c] == 2:
        return _signed_distance_candidates(px, py, vx, vy, orient, cand, ptr[c], ptr[c + 1])
    fu = u - i
    fv = v - j
    return ((1 - fu) * (1 - fv) * node_rho[i, j] + fu * (1 - fv) * node_rho[i + 1, j]
            + (1 - fu) * fv * node_rho[i, j + 1] + fu * fv * node_rho[i + 1, j + 1])


@dataclass(frozen=True, eq=False)
class BoundaryLocator:
    """Arrays consumed by :func:`locate` (pass ``args`` after the point)."""

    vertices: np.ndarray
    loc_f: np.ndarray
    loc_i: np.ndarray
    flags: np.ndarray
    node_rho: np.ndarray
    ptr: np.ndarray
    cand: np.ndarray
    bbox: np.ndarray

    @property
    def args(self):
        return (self.loc_f, self.loc_i, np.ascontiguousarray(self.vertices[:, 0]),
                np.ascontiguousarray(self.vertices[:, 1]), self.flags, self.node_rho, self.ptr, self.cand)

    def signed_distance(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return _locate_many(p, *self.args)


@njit(cache=True)
def _locate_many(p, loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand):
    out = np.empty(p.shape[0])
    for k in range(p.shape[0]):
        out[k] = locate(p[k, 0], p[k, 1], loc_f, loc_i, vx, vy, flags, node_rho, ptr, cand)
    return out


@njit(cache=True)
def _node_distances(px, py, near, vx, vy, orient):
    out = np.empty(px.shape[0])
    cand = np.empty(1, dtype=np.int64)
    for k in range(px.shape[0]):
        cand[0] = near[k]
        out[k] = _signed_distance_candidates(px[k], py[k], vx, vy, orient, cand, 0, 1)
    return out


def build_locator(poly, orientation: int, max_cells: int = 4_000_000) -> BoundaryLocator:
    """Cell grid over the bounding box of ``poly`` with per-cell segment lists."""
    poly = np.ascontiguousarray(poly, dtype=float)
    m = poly.shape[0]
    seg = np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1)
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    ext = hi - lo
    h = max(2.0 * float(np.median(seg)), math.sqrt(float(np.prod(ext * 1.2)) / max_cells))
    margin = 0.1 * ext + 2 * h
    lo = lo - margin
    hi = hi + margin
    nx = int(math.ceil((hi[0] - lo[0]) / h))
    ny = int(math.ceil((hi[1] - lo[1]) / h))
    gx = lo[0] + h * np.arange(nx + 1)
    gy = lo[1] + h * np.arange(ny + 1)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    tree = cKDTree(poly)
    _, near = tree.query(np.stack([X.ravel(), Y.ravel()], axis=1))
    vx, vy = np.ascontiguousarray(poly[:, 0]), np.ascontiguousarray(poly[:, 1])
    node_rho = _node_distances(X.ravel(), Y.ravel(), near.astype(np.int64), vx, vy, float(orientation))
    node_rho = node_rho.reshape(nx + 1, ny + 1)
    diag = h * math.sqrt(2.0)
    corners = np.stack([node_rho[:-1, :-1], node_rho[1:, :-1], node_rho[:-1, 1:], node_rho[1:, 1:]])
    flags = np.full((nx, ny), 2, dtype=np.int8)
    flags[corners.max(axis=0) < -diag] = 1
    flags[corners.min(axis=0) > diag] = 0
    flags = flags.ravel()
    bidx = np.flatnonzero(flags == 2)
    ci, cj = np.divmod(bidx, ny)
    centers = np.stack([lo[0] + (ci + 0.5) * h, lo[1] + (cj + 0.5) * h], axis=1)
    lists = tree.query_ball_point(centers, r=2.5 * diag + float(seg.max()))
    counts = np.zeros(nx * ny, dtype=np.int64)
    counts[bidx] = [len(lst) for lst in lists]
    ptr = np.zeros(nx * ny + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    cand = np.concatenate([np.sort(np.asarray(lst, dtype=np.int64)) for lst in lists]) if len(lists) else np.zeros(0, np.int64)
    return BoundaryLocator(
        vertices=poly,
        loc_f=np.array([lo[0], lo[1], h, float(orientation)]),
        loc_i=np.array([nx, ny], dtype=np.int64),
        flags=flags,
        node_rho=node_rho,
        ptr=ptr,
        cand=cand.astype(np.int64),
        bbox=np.array([lo, hi]),
    )
