"""Tensor-product B-spline discretisation of a (masked) rectangle.

The reference domain is ``[ax, bx] x [ay, by]`` split into ``nx * ny``
cells; optional rectangular holes deactivate cells, giving axis-aligned
unions of rectangles (U shapes, hairpins, ...).  Fields are expanded in
open-uniform B-splines of degree ``k >= 3`` so that the second gradient is
continuous everywhere.

Coefficient layout: basis function ``(i, j)`` (``i`` along x) has flat
index ``m = i * nby + j``; coefficient arrays have shape ``(M, 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DomainError

_SIDES = ("left", "right", "bottom", "top")
_EDGE_TOL = 1e-12


def open_uniform_knots(a, b, n, k):
    inner = np.linspace(a, b, n + 1)
    return np.concatenate([np.full(k, float(a)), inner, np.full(k, float(b))])


def greville(knots, k):
    n_basis = len(knots) - k - 1
    return np.array([knots[i + 1:i + k + 1].mean() for i in range(n_basis)])


def basis_derivatives(knots, k, x, span, nder=2):
    """Non-zero B-spline values and derivatives at ``x`` (vectorised).

    Returns an array of shape ``(len(x), nder + 1, k + 1)``; entry
    ``[p, d, r]`` is the ``d``-th derivative of basis function
    ``span - k + r`` at ``x[p]``.  Cox-de Boor with the derivative
    recurrence of Piegl & Tiller (algorithm A2.3).
    """
    x = np.asarray(x, dtype=float)
    span = np.asarray(span)
    npts = x.size
    ndu = np.zeros((npts, k + 1, k + 1))
    ndu[:, 0, 0] = 1.0
    left = np.zeros((npts, k + 1))
    right = np.zeros((npts, k + 1))
    for j in range(1, k + 1):
        left[:, j] = x - knots[span + 1 - j]
        right[:, j] = knots[span + j] - x
        saved = np.zeros(npts)
        for r in range(j):
            ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
            temp = ndu[:, r, j - 1] / ndu[:, j, r]
            ndu[:, r, j] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        ndu[:, j, j] = saved

    ders = np.zeros((npts, nder + 1, k + 1))
    ders[:, 0, :] = ndu[:, :, k]
    for r in range(k + 1):
        a = np.zeros((npts, 2, k + 1))
        a[:, 0, 0] = 1.0
        s1, s2 = 0, 1
        for kk in range(1, nder + 1):
            d = np.zeros(npts)
            rk, pk = r - kk, k - kk
            if r >= kk:
                a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                d = a[:, s2, 0] * ndu[:, rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = kk - 1 if r - 1 <= pk else k - r
            for j in range(j1, j2 + 1):
                a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                d = d + a[:, s2, j] * ndu[:, rk + j, pk]
            if r <= pk:
                a[:, s2, kk] = -a[:, s1, kk - 1] / ndu[:, pk + 1, r]
                d = d + a[:, s2, kk] * ndu[:, r, pk]
            ders[:, kk, r] = d
            s1, s2 = s2, s1
    fac = k
    for kk in range(1, nder + 1):
        ders[:, kk, :] *= fac
        fac *= k - kk
    return ders


@dataclass(frozen=True)
class BoundarySamples:
    """Boundary quadrature: points, unit outward normals, weights."""

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    edge: np.ndarray  # index of the cell edge each sample belongs to

    def __len__(self):
        return len(self.weights)

    def __iter__(self):
        return iter(zip(self.points, self.normals, self.weights))


@dataclass(frozen=True, eq=False)
class ReferenceGrid:
    """Spline space, quadrature and boundary decomposition.

    ``holes`` is a tuple of half-open cell-index boxes ``(i0, i1, j0, j1)``
    that are removed from the domain.  ``dirichlet`` lists the parts of the
    boundary carrying ``y = x``: a side name (``left``/``right``/
    ``bottom``/``top`` of the bounding box) or an axis-aligned segment
    ``(x0, y0, x1, y1)``.  Everything else is Neumann.
    """

    x_range: tuple = (0.0, 1.0)
    y_range: tuple = (0.0, 1.0)
    nx: int = 8
    ny: int = 8
    degree: int = 3
    quad_order: int | None = None
    dirichlet: tuple = ("left",)
    holes: tuple = ()

    def __post_init__(self):
        if self.degree < 3:
            raise ValueError("spline degree must be >= 3 for C2 fields")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("cell counts must be positive")
        if not (self.x_range[1] > self.x_range[0] and self.y_range[1] > self.y_range[0]):
            raise ValueError("empty domain extents")
        if self.quad_order is not None and self.quad_order < 1:
            raise ValueError("quadrature order must be positive")
        for tag in self.dirichlet:
            if isinstance(tag, str):
                if tag not in _SIDES:
                    raise ValueError(f"unknown boundary side {tag!r}")
            elif len(tag) != 4 or (tag[0] != tag[2] and tag[1] != tag[3]):
                raise ValueError(f"Dirichlet segment {tag!r} is not axis aligned")
        if not self.active_cells.any():
            raise ValueError("all cells are masked")

    # -- basic geometry ------------------------------------------------

    @property
    def k(self):
        return self.degree

    @property
    def g(self):
        return self.quad_order if self.quad_order is not None else self.degree + 1

    @property
    def hx(self):
        return (self.x_range[1] - self.x_range[0]) / self.nx

    @property
    def hy(self):
        return (self.y_range[1] - self.y_range[0]) / self.ny

    @property
    def cell_diagonal(self):
        return float(np.hypot(self.hx, self.hy))

    @property
    def nbx(self):
        return self.nx + self.degree

    @property
    def nby(self):
        return self.ny + self.degree

    @property
    def n_basis(self):
        return self.nbx * self.nby

    @cached_property
    def knots_x(self):
        return open_uniform_knots(*self.x_range, self.nx, self.degree)

    @cached_property
    def knots_y(self):
        return open_uniform_knots(*self.y_range, self.ny, self.degree)

    @cached_property
    def active_cells(self):
        """Boolean ``(nx, ny)`` array of cells belonging to the domain."""
        mask = np.ones((self.nx, self.ny), dtype=bool)
        for i0, i1, j0, j1 in self.holes:
            mask[i0:i1, j0:j1] = False
        mask.setflags(write=False)
        return mask

    @property
    def area(self):
        return float(self.active_cells.sum()) * self.hx * self.hy

    @property
    def diameter(self):
        cells = np.argwhere(self.active_cells)
        lo = cells.min(axis=0)
        hi = cells.max(axis=0) + 1
        return float(np.hypot((hi[0] - lo[0]) * self.hx, (hi[1] - lo[1]) * self.hy))

    @cached_property
    def greville_points(self):
        gx = greville(self.knots_x, self.k)
        gy = greville(self.knots_y, self.k)
        X, Y = np.meshgrid(gx, gy, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    # -- point location and basis evaluation ---------------------------

    def _cell_index(self, t, lo, h, n):
        c = np.floor((t - lo) / h).astype(int)
        return np.clip(c, 0, n - 1)

    def locate(self, points):
        """Cell indices ``(ci, cj)`` of points; DomainError if outside."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        (ax, bx), (ay, by) = self.x_range, self.y_range
        tol_x = _EDGE_TOL * max(1.0, abs(ax), abs(bx))
        tol_y = _EDGE_TOL * max(1.0, abs(ay), abs(by))
        x, y = pts[:, 0], pts[:, 1]
        outside = (x < ax - tol_x) | (x > bx + tol_x) | (y < ay - tol_y) | (y > by + tol_y)
        if outside.any():
            bad = pts[np.argmax(outside)]
            raise DomainError(f"point {tuple(bad)} lies outside the reference domain")
        ci = self._cell_index(x, ax, self.hx, self.nx)
        cj = self._cell_index(y, ay, self.hy, self.ny)
        act = self.active_cells
        off = ~act[ci, cj]
        if off.any():
            # points on an edge shared with an active neighbour still belong to the closure
            for p in np.flatnonzero(off):
                found = False
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        i, j = ci[p] + di, cj[p] + dj
                        if not (0 <= i < self.nx and 0 <= j < self.ny) or not act[i, j]:
                            continue
                        x0 = ax + i * self.hx
                        y0 = ay + j * self.hy
                        if (x0 - tol_x <= x[p] <= x0 + self.hx + tol_x
                                and y0 - tol_y <= y[p] <= y0 + self.hy + tol_y):
                            ci[p], cj[p] = i, j
                            found = True
                            break
                    if found:
                        break
                if not found:
                    raise DomainError(f"point {tuple(pts[p])} lies in a masked region")
        return ci, cj

    def basis_matrices(self, points, nder=2, cells=None):
        """Sparse evaluation operators at ``points``.

        Returns a dict keyed by derivative multi-index: ``"0"``, ``"x"``,
        ``"y"`` and (for ``nder >= 2``) ``"xx"``, ``"xy"``, ``"yy"``; each
        is a CSR matrix of shape ``(len(points), n_basis)``.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if cells is None:
            ci, cj = self.locate(pts)
        else:
            ci, cj = cells
        k = self.k
        x = np.clip(pts[:, 0], *self.x_range)
        y = np.clip(pts[:, 1], *self.y_range)
        Dx = basis_derivatives(self.knots_x, k, x, ci + k, nder)
        Dy = basis_derivatives(self.knots_y, k, y, cj + k, nder)
        npts = len(pts)
        ix = ci[:, None] + np.arange(k + 1)[None, :]
        jy = cj[:, None] + np.arange(k + 1)[None, :]
        cols = (ix[:, :, None] * self.nby + jy[:, None, :]).reshape(npts, -1)
        rows = np.repeat(np.arange(npts), (k + 1) ** 2)
        combos = {"0": (0, 0)}
        if nder >= 1:
            combos.update({"x": (1, 0), "y": (0, 1)})
        if nder >= 2:
            combos.update({"xx": (2, 0), "xy": (1, 1), "yy": (0, 2)})
        out = {}
        for name, (dx, dy) in combos.items():
            vals = (Dx[:, dx, :, None] * Dy[:, dy, None, :]).reshape(npts, -1)
            out[name] = sp.csr_matrix(
                (vals.ravel(), (rows, cols.ravel())), shape=(npts, self.n_basis))
        return out

    # -- bulk quadrature -------------------------------------------------

    @cached_property
    def _gauss(self):
        return np.polynomial.legendre.leggauss(self.g)

    @cached_property
    def quadrature(self):
        """Bulk Gauss points ``(N, 2)``, weights ``(N,)`` and cell ids ``(N, 2)``."""
        gp, gw = self._gauss
        cells = np.argwhere(self.active_cells)  # deterministic (i, j) order
        (ax, _), (ay, _) = self.x_range, self.y_range
        ux = 0.5 * (gp + 1.0) * self.hx
        uy = 0.5 * (gp + 1.0) * self.hy
        wx = 0.5 * gw * self.hx
        wy = 0.5 * gw * self.hy
        UX, UY = np.meshgrid(ux, uy, indexing="ij")
        WX, WY = np.meshgrid(wx, wy, indexing="ij")
        px = ax + cells[:, 0, None] * self.hx + UX.ravel()[None, :]
        py = ay + cells[:, 1, None] * self.hy + UY.ravel()[None, :]
        pts = np.column_stack([px.ravel(), py.ravel()])
        w = np.tile((WX * WY).ravel(), len(cells))
        cid = np.repeat(cells, self.g * self.g, axis=0)
        for arr in (pts, w, cid):
            arr.setflags(write=False)
        return pts, w, cid

    @property
    def qp_points(self):
        return self.quadrature[0]

    @property
    def qp_weights(self):
        return self.quadrature[1]

    @property
    def n_qp(self):
        return len(self.quadrature[1])

    @cached_property
    def operators(self):
        """Basis operators at bulk quadrature points (see ``basis_matrices``)."""
        pts, _, cid = self.quadrature
        return self.basis_matrices(pts, nder=2, cells=(cid[:, 0], cid[:, 1]))

    @cached_property
    def active_basis(self):
        """Basis functions whose support meets at least one active cell."""
        used = np.zeros(self.n_basis, dtype=bool)
        used[np.unique(self.operators["0"].indices)] = True
        return used

    # -- boundary --------------------------------------------------------

    @cached_property
    def boundary_edges(self):
        """Cell edges on the domain boundary.

        Returns ``(start, end, normal, tag)`` arrays; ``tag`` is ``"D"`` or
        ``"N"``.  Edges are ordered by cell (i, j) and then left, right,
        bottom, top.
        """
        act = self.active_cells
        (ax, _), (ay, _) = self.x_range, self.y_range
        hx, hy = self.hx, self.hy
        starts, ends, normals = [], [], []
        for i, j in np.argwhere(act):
            x0, y0 = ax + i * hx, ay + j * hy
            x1, y1 = x0 + hx, y0 + hy
            if i == 0 or not act[i - 1, j]:
                starts.append((x0, y0)); ends.append((x0, y1)); normals.append((-1.0, 0.0))
            if i == self.nx - 1 or not act[i + 1, j]:
                starts.append((x1, y0)); ends.append((x1, y1)); normals.append((1.0, 0.0))
            if j == 0 or not act[i, j - 1]:
                starts.append((x0, y0)); ends.append((x1, y0)); normals.append((0.0, -1.0))
            if j == self.ny - 1 or not act[i, j + 1]:
                starts.append((x0, y1)); ends.append((x1, y1)); normals.append((0.0, 1.0))
        starts = np.array(starts)
        ends = np.array(ends)
        normals = np.array(normals)
        mids = 0.5 * (starts + ends)
        tags = np.array(["D" if self._on_dirichlet(m, n) else "N" for m, n in zip(mids, normals)])
        return starts, ends, normals, tags

    def _on_dirichlet(self, mid, normal):
        (ax, bx), (ay, by) = self.x_range, self.y_range
        tol = 1e-9 * max(1.0, bx - ax, by - ay)
        for tag in self.dirichlet:
            if isinstance(tag, str):
                hit = {
                    "left": normal[0] < 0 and abs(mid[0] - ax) < tol,
                    "right": normal[0] > 0 and abs(mid[0] - bx) < tol,
                    "bottom": normal[1] < 0 and abs(mid[1] - ay) < tol,
                    "top": normal[1] > 0 and abs(mid[1] - by) < tol,
                }[tag]
            else:
                x0, y0, x1, y1 = tag
                if x0 == x1:
                    hit = (abs(normal[1]) < 0.5 and abs(mid[0] - x0) < tol
                           and min(y0, y1) - tol <= mid[1] <= max(y0, y1) + tol)
                else:
                    hit = (abs(normal[0]) < 0.5 and abs(mid[1] - y0) < tol
                           and min(x0, x1) - tol <= mid[0] <= max(x0, x1) + tol)
            if hit:
                return True
        return False

    @cached_property
    def _boundary_all(self):
        starts, ends, normals, tags = self.boundary_edges
        gp, gw = self._gauss
        s = 0.5 * (gp + 1.0)
        lengths = np.linalg.norm(ends - starts, axis=1)
        pts = starts[:, None, :] + s[None, :, None] * (ends - starts)[:, None, :]
        w = 0.5 * gw[None, :] * lengths[:, None]
        nrm = np.repeat(normals, self.g, axis=0)
        edge = np.repeat(np.arange(len(starts)), self.g)
        tag = np.repeat(tags, self.g)
        return pts.reshape(-1, 2), nrm, w.ravel(), edge, tag

    def boundary_samples(self, tag=None):
        """Boundary quadrature restricted to ``tag`` ("D", "N" or None for all)."""
        pts, nrm, w, edge, tags = self._boundary_all
        sel = np.ones(len(w), dtype=bool) if tag is None else tags == tag
        return BoundarySamples(pts[sel], nrm[sel], w[sel], edge[sel])

    @cached_property
    def boundary_spacing(self):
        """Largest distance between consecutive boundary samples on one edge."""
        gp, _ = self._gauss
        s = 0.5 * (np.sort(gp) + 1.0)
        h = max(self.hx, self.hy)
        gaps = np.diff(np.concatenate([[0.0], s, [1.0]]))
        gaps[0] *= 2.0
        gaps[-1] *= 2.0  # across an edge end the neighbouring edge adds the same gap
        return float(h * max(np.diff(s).max(initial=0.0), gaps[0], gaps[-1]))

    @cached_property
    def pinned(self):
        """Boolean mask of coefficients fixed to identity values.

        All basis functions that do not vanish on Gamma_D are pinned, as
        are functions whose support misses the domain entirely.
        """
        mask = ~self.active_basis.copy()
        dpts = self.boundary_samples("D").points
        if len(dpts):
            B = self.basis_matrices(dpts, nder=0)["0"]
            B.eliminate_zeros()
            mask[np.unique(B.indices)] = True
        mask.setflags(write=False)
        return mask

    @property
    def free(self):
        return ~self.pinned

    def max_qp_spacing(self):
        gp, _ = self._gauss
        s = 0.5 * (np.sort(gp) + 1.0)
        gaps = np.concatenate([np.diff(s), [s[0] + 1.0 - s[-1]]])
        return float(np.hypot(gaps.max() * self.hx, gaps.max() * self.hy))

    def describe(self):
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "nx": self.nx,
            "ny": self.ny,
            "degree": self.degree,
            "quad_order": self.g,
            "dirichlet": [t if isinstance(t, str) else list(t) for t in self.dirichlet],
            "holes": [list(h) for h in self.holes],
        }

    @classmethod
    def from_description(cls, d):
        return cls(
            x_range=tuple(d["x_range"]),
            y_range=tuple(d["y_range"]),
            nx=int(d["nx"]),
            ny=int(d["ny"]),
            degree=int(d["degree"]),
            quad_order=int(d["quad_order"]),
            dirichlet=tuple(t if isinstance(t, str) else tuple(t) for t in d["dirichlet"]),
            holes=tuple(tuple(h) for h in d["holes"]),
        )


@dataclass(frozen=True, eq=False)
class DeformationField:
    """Spline deformation y: Omega -> R^2 given by control coefficients."""

    grid: ReferenceGrid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float)
        if c.shape != (self.grid.n_basis, 2):
            raise ValueError(f"coefficients must have shape {(self.grid.n_basis, 2)}, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficients")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def pinned(self):
        return np.flatnonzero(self.grid.pinned)

    def with_coeffs(self, coeffs):
        return DeformationField(self.grid, coeffs)

    def evaluate(self, points):
        B = self.grid.basis_matrices(points, nder=0)["0"]
        return B @ self.coeffs

    def derivatives_at(self, points):
        """Values, gradients (n, 2, 2) and hessians (n, 2, 2, 2) at points."""
        ops = self.grid.basis_matrices(points, nder=2)
        return _apply(ops, self.coeffs)

    @cached_property
    def _at_qp(self):
        return _apply(self.grid.operators, self.coeffs)

    def qp_values(self):
        return self._at_qp[0]

    def qp_gradients(self):
        """F[q, alpha, i] = d y_alpha / d x_i at every bulk quadrature point."""
        return self._at_qp[1]

    def qp_hessians(self):
        """G[q, alpha, i, j] = d^2 y_alpha / dx_i dx_j at every quadrature point."""
        return self._at_qp[2]

    def to_dict(self):
        return {"grid": self.grid.describe(), "coeffs": self.coeffs.tolist()}

    @classmethod
    def from_dict(cls, d, grid=None):
        if grid is None:
            grid = ReferenceGrid.from_description(d["grid"])
        return cls(grid, np.asarray(d["coeffs"], dtype=float))


def _apply(ops, c):
    y = ops["0"] @ c
    if "x" not in ops:
        return y, None, None
    F = np.stack([ops["x"] @ c, ops["y"] @ c], axis=-1)  # (n, alpha, i)
    if "xx" not in ops:
        return y, F, None
    cxx, cxy, cyy = ops["xx"] @ c, ops["xy"] @ c, ops["yy"] @ c
    G = np.empty(y.shape + (2, 2))
    G[:, :, 0, 0] = cxx
    G[:, :, 0, 1] = cxy
    G[:, :, 1, 0] = cxy
    G[:, :, 1, 1] = cyy
    return y, F, G


def identity_field(grid):
    """y(x) = x, represented exactly by Greville-abscissa coefficients."""
    return DeformationField(grid, grid.greville_points.copy())


def affine_field(grid, A, b=(0.0, 0.0)):
    A = np.asarray(A, dtype=float)
    return DeformationField(grid, grid.greville_points @ A.T + np.asarray(b, dtype=float))


def interpolate_map(grid, func):
    """Spline interpolant of ``func`` at the tensor grid of Greville abscissae.

    ``func`` maps ``(n, 2)`` reference points to ``(n, 2)`` images and must
    be defined on the whole bounding box (masked cells included).
    Interpolation at Greville points is uniquely solvable and reproduces
    polynomials of degree <= k exactly.
    """
    k = grid.k
    gx = greville(grid.knots_x, k)
    gy = greville(grid.knots_y, k)
    ix = np.clip(np.searchsorted(grid.knots_x, gx, side="right") - 1, k, grid.nx + k - 1)
    iy = np.clip(np.searchsorted(grid.knots_y, gy, side="right") - 1, k, grid.ny + k - 1)
    Ax = _collocation(grid.knots_x, k, gx, ix)
    Ay = _collocation(grid.knots_y, k, gy, iy)
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    target = np.asarray(func(np.column_stack([X.ravel(), Y.ravel()])), dtype=float)
    c = np.empty((grid.n_basis, 2))
    for a in range(2):
        V = target[:, a].reshape(len(gx), len(gy))
        C = np.linalg.solve(Ax, np.linalg.solve(Ay, V.T).T)
        c[:, a] = C.ravel()
    return DeformationField(grid, c)


def _collocation(knots, k, x, span):
    vals = basis_derivatives(knots, k, x, span, nder=0)[:, 0, :]
    A = np.zeros((len(x), len(knots) - k - 1))
    for p in range(len(x)):
        A[p, span[p] - k:span[p] + 1] = vals[p]
    return A


# module-level aliases of the operations
def evaluate(field, points):
    return field.evaluate(points)


def gradient(field, qp):
    return field.qp_gradients()[qp]


def hessian(field, qp):
    return field.qp_hessians()[qp]


def boundary_samples(grid, tag=None):
    return grid.boundary_samples(tag)
