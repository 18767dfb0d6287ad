"""Global injectivity: overlap measurement, smooth penalty, self-contact.

The constraint ``int det grad y <= meas y(Omega)`` is measured post hoc by
rasterising the deformed configuration, and enforced inside the optimiser
through a pairwise repulsion between bulk quadrature points that are far
apart in the reference configuration but close after deformation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, asdict, replace

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import BarrierError, ResolutionError
from .materials import det2

CUTOFF = 4.0  # kernel support in units of delta
_TAIL = np.exp(-CUTOFF ** 2)


def _workers():
    try:
        return max(1, int(os.environ.get("VISCO_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class OverlapPenaltyParams:
    """Mollification, rasterisation and continuation parameters.

    Lengths are in reference units except ``delta`` and ``eps_contact``
    which live in the deformed configuration.
    """

    delta: float
    r_min: float
    kappa: float = 1e2
    kappa_max: float = 1e6
    kappa_growth: float = 10.0
    eps_contact: float | None = None
    h_pix: float = 0.0
    tol_cn: float | None = None
    cover: float = 0.5
    max_samples: int = 20_000_000

    def __post_init__(self):
        bad = [n for n in ("delta", "r_min", "kappa", "h_pix") if not getattr(self, n) > 0]
        if bad:
            raise ValueError(f"parameters must be positive: {', '.join(bad)}")
        if self.kappa_max < self.kappa or self.kappa_growth <= 1.0:
            raise ValueError("kappa schedule must grow from kappa to kappa_max")
        if not 0 < self.cover <= 0.5:
            raise ValueError("cover must lie in (0, 1/2]")
        if self.eps_contact is None:
            object.__setattr__(self, "eps_contact", 0.5 * self.delta)
        if self.eps_contact <= 0:
            raise ValueError("eps_contact must be positive")

    @classmethod
    def for_grid(cls, grid, **overrides):
        """Defaults tied to the cell size of ``grid``."""
        diag = grid.cell_diagonal
        h = min(grid.hx, grid.hy)
        base = dict(delta=diag / 4.0, r_min=2.0 * diag, h_pix=h / 8.0)
        base.update({k: v for k, v in overrides.items() if v is not None})
        params = cls(**base)
        if params.tol_cn is None:
            params = replace(params, tol_cn=10.0 * params.h_pix * grid.diameter)
        return params

    def validate_for(self, grid):
        if not self.r_min > grid.max_qp_spacing():
            raise ValueError(
                f"r_min = {self.r_min:g} must exceed the quadrature spacing {grid.max_qp_spacing():g}")

    def to_dict(self):
        return asdict(self)


# -- Ciarlet-Necas inequality ------------------------------------------------

def det_integral(field):
    """Gauss approximation of int_Omega det grad y dx."""
    J = det2(field.qp_gradients())
    return float(np.dot(field.grid.qp_weights, J))


def _lipschitz_bound(field, safety=1.25):
    F = field.qp_gradients()
    pts = field.grid.boundary_samples().points
    _, Fb, _ = field.derivatives_at(pts)
    allF = np.concatenate([F, Fb])
    return safety * float(np.max(np.linalg.norm(allF, ord=2, axis=(1, 2))))


def _sample_axis(lo, h, n, m):
    """Cell-centred sub-lattice: ``m`` samples per cell, ``n`` cells."""
    offs = (np.arange(m) + 0.5) / m * h
    return (lo + np.arange(n)[:, None] * h + offs[None, :]).ravel()


def _axis_basis(grid, axis, t):
    knots = grid.knots_x if axis == 0 else grid.knots_y
    lo, h, n = (grid.x_range[0], grid.hx, grid.nx) if axis == 0 else (grid.y_range[0], grid.hy, grid.ny)
    span = grid._cell_index(t, lo, h, n) + grid.k
    from .grid import basis_derivatives
    vals = basis_derivatives(knots, grid.k, t, span, nder=0)[:, 0, :]
    rows = np.repeat(np.arange(len(t)), grid.k + 1)
    cols = (span[:, None] - grid.k + np.arange(grid.k + 1)[None, :]).ravel()
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(len(t), len(knots) - grid.k - 1))


def raster_pixels(field, h_pix, cover=0.5, max_samples=20_000_000, lipschitz=None):
    """Integer pixel coordinates marked by forward-mapped samples.

    Reference samples are spaced so that every point of y(Omega) lies within
    ``cover * h_pix`` of a sample image (Lipschitz bound ``L`` measured at
    quadrature points, with a safety factor).  A pixel is marked when a
    sample image falls within ``cover * h_pix`` of its centre, so every
    pixel whose centre lies in y(Omega) is marked.
    """
    grid = field.grid
    L = _lipschitz_bound(field) if lipschitz is None else lipschitz
    r_s = cover * h_pix
    spacing = np.sqrt(2.0) * r_s / L
    mx = int(np.ceil(grid.hx / spacing))
    my = int(np.ceil(grid.hy / spacing))
    n_needed = int(grid.active_cells.sum()) * mx * my
    if n_needed > max_samples:
        raise ResolutionError(
            f"rasterisation at h_pix={h_pix:g} needs {n_needed} samples "
            f"(Lipschitz bound {L:.3g}); limit is {max_samples}")
    sx = _sample_axis(grid.x_range[0], grid.hx, grid.nx, mx)
    sy = _sample_axis(grid.y_range[0], grid.hy, grid.ny, my)
    Bx = _axis_basis(grid, 0, sx)
    By = _axis_basis(grid, 1, sy).toarray()
    C = field.coeffs.reshape(grid.nbx, grid.nby, 2)
    act_y = np.repeat(grid.active_cells, my, axis=1)  # (nx, ny*my)
    # pixel bitmap over the image bounding box (inflated by one pixel)
    y_all = field.qp_values()
    lo = np.floor(y_all.min(axis=0) / h_pix - 0.5 * L * max(grid.hx, grid.hy) / h_pix) - 2
    hi = np.ceil(y_all.max(axis=0) / h_pix + 0.5 * L * max(grid.hx, grid.hy) / h_pix) + 2
    shape = (hi - lo + 1).astype(np.int64)
    if shape[0] * shape[1] > 4 * max_samples:
        raise ResolutionError(f"pixel bitmap of {shape[0]} x {shape[1]} exceeds the sample budget")
    img = np.zeros(tuple(shape), dtype=bool)
    ilo = lo.astype(np.int64)
    # one column of cells at a time keeps memory bounded
    for ci in range(grid.nx):
        rows = slice(ci * mx, (ci + 1) * mx)
        cols = act_y[ci]
        if not cols.any():
            continue
        bx = Bx[rows].toarray()
        by = By[cols]
        Y0 = (bx @ C[:, :, 0] @ by.T).ravel()
        Y1 = (bx @ C[:, :, 1] @ by.T).ravel()
        ix = np.floor(Y0 / h_pix)
        iy = np.floor(Y1 / h_pix)
        near = (Y0 - (ix + 0.5) * h_pix) ** 2 + (Y1 - (iy + 0.5) * h_pix) ** 2 <= r_s * r_s
        img[ix[near].astype(np.int64) - ilo[0], iy[near].astype(np.int64) - ilo[1]] = True
    return np.argwhere(img) + ilo


def image_measure(field, h_pix, cover=0.5, max_samples=20_000_000):
    """Rasterised area of y(Omega): marked pixel count times h_pix^2."""
    if not h_pix > 0:
        raise ValueError("h_pix must be positive")
    return len(raster_pixels(field, h_pix, cover, max_samples)) * h_pix * h_pix


def cn_report(field, params):
    J = det2(field.qp_gradients())
    if not np.all(J > 0):
        i = int(np.argmin(J))
        raise BarrierError("non-positive determinant; area formula does not apply",
                           point=field.grid.qp_points[i], index=i, det=float(J[i]))
    lhs = float(np.dot(field.grid.qp_weights, J))
    meas = image_measure(field, params.h_pix, params.cover, params.max_samples)
    return {"det_integral": lhs, "image_measure": meas, "excess": max(0.0, lhs - meas),
            "h_pix": params.h_pix}


def cn_excess(field, params):
    """max(0, int det grad y - meas y(Omega)); zero iff the inequality holds."""
    return cn_report(field, params)["excess"]


# -- smooth penalty --------------------------------------------------------------

def kernel(u):
    """Gaussian exp(-u), u = r^2/delta^2, with a C1 tail correction at u = 16.

    Returns ``(k, dk/du, d2k/du2)``; all vanish identically for u >= 16.
    """
    u = np.asarray(u, dtype=float)
    inside = u < CUTOFF ** 2
    e = np.exp(-np.minimum(u, CUTOFF ** 2))
    k = np.where(inside, e - _TAIL * (CUTOFF ** 2 + 1.0 - u), 0.0)
    dk = np.where(inside, -e + _TAIL, 0.0)
    d2k = np.where(inside, e, 0.0)
    return k, dk, d2k


class OverlapPenalty:
    """P(y) = sum over admissible bulk pairs of w_a w_b k(|y_a - y_b|).

    A pair (a, b) is admissible when ``|x_a - x_b| >= r_min``.  Candidate
    pairs come from a k-d tree in deformed coordinates with radius
    ``4 delta + skin``; the list is rebuilt only once some point moved more
    than ``skin / 2`` since the last build, which keeps repeated evaluations
    inside a line search cheap.  Pairs beyond ``4 delta`` contribute exactly
    zero, so results do not depend on when the list was rebuilt.
    """

    def __init__(self, grid, params, skin=None):
        self.grid = grid
        self.params = params
        self.x = grid.qp_points
        self.w = grid.qp_weights
        self.B = grid.operators["0"]
        self.skin = params.delta if skin is None else skin
        self._pairs = None
        self._y_built = None
        self.rebuilds = 0

    def pairs(self, y):
        if self._pairs is not None:
            moved = np.max(np.abs(y - self._y_built).sum(axis=1))
            if moved <= 0.5 * self.skin:
                return self._pairs
        radius = CUTOFF * self.params.delta + self.skin
        tree = cKDTree(y)
        cand = tree.query_pairs(radius, output_type="ndarray")
        if len(cand):
            dx = self.x[cand[:, 0]] - self.x[cand[:, 1]]
            keep = np.einsum("ij,ij->i", dx, dx) >= self.params.r_min ** 2
            cand = cand[keep]
            cand = np.sort(cand, axis=1)
            cand = cand[np.lexsort((cand[:, 1], cand[:, 0]))]
        self._pairs = cand.reshape(-1, 2).astype(np.int64)
        self._y_built = y.copy()
        self.rebuilds += 1
        return self._pairs

    def _terms(self, y):
        pr = self.pairs(y)
        d = y[pr[:, 0]] - y[pr[:, 1]]
        u = np.einsum("ij,ij->i", d, d) / self.params.delta ** 2
        live = u < CUTOFF ** 2
        pr, d, u = pr[live], d[live], u[live]
        ww = self.w[pr[:, 0]] * self.w[pr[:, 1]]
        return pr, d, u, ww

    def qp_value_and_grad(self, y):
        """P and dP/dy at the quadrature points (unscaled by kappa)."""
        pr, d, u, ww = self._terms(y)
        k, dk, _ = kernel(u)
        value = float(np.sum(ww * k))
        fpair = (ww * dk * 2.0 / self.params.delta ** 2)[:, None] * d
        g = np.zeros_like(y)
        np.add.at(g, pr[:, 0], fpair)
        np.add.at(g, pr[:, 1], -fpair)
        return value, g

    def value_and_grad(self, field):
        y = field.qp_values()
        value, g = self.qp_value_and_grad(y)
        return value, np.asarray(self.B.T @ g)

    def value(self, field):
        return self.qp_value_and_grad(field.qp_values())[0]

    def hessian_abs(self, y):
        """PSD surrogate of d2P/dc2 (absolute eigenvalues per pair) as a sparse matrix.

        Ordering of unknowns: component-major, ``[c[:, 0], c[:, 1]]``.
        """
        M = self.grid.n_basis
        pr, d, u, ww = self._terms(y)
        if len(pr) == 0:
            return sp.csr_matrix((2 * M, 2 * M))
        _, dk, d2k = kernel(u)
        de2 = self.params.delta ** 2
        r2 = np.maximum(u * de2, 1e-300)
        lam_par = np.abs(d2k * 4.0 * u / de2 + 2.0 * dk / de2)
        lam_perp = np.abs(2.0 * dk / de2)
        nhat = d / np.sqrt(r2)[:, None]
        Hp = ((lam_par - lam_perp)[:, None, None] * nhat[:, :, None] * nhat[:, None, :]
              + lam_perp[:, None, None] * np.eye(2)) * ww[:, None, None]
        n = len(pr)
        D = sp.csr_matrix(
            (np.concatenate([np.ones(n), -np.ones(n)]),
             (np.concatenate([np.arange(n), np.arange(n)]), np.concatenate([pr[:, 0], pr[:, 1]]))),
            shape=(n, len(y)))
        DB = (D @ self.B).tocsr()
        blocks = [[None, None], [None, None]]
        for a in range(2):
            for b in range(2):
                blocks[a][b] = DB.T @ sp.diags(Hp[:, a, b]) @ DB
        return sp.bmat(blocks, format="csr")


def overlap_penalty(field, params):
    """Penalty value and its gradient with respect to the coefficients."""
    return OverlapPenalty(field.grid, params).value_and_grad(field)


# -- self contact and normals -------------------------------------------------------

@dataclass
class ContactSet:
    """Gamma_N samples whose image meets the image of a distant material point."""

    index: np.ndarray  # indices into grid.boundary_samples("N")
    points: np.ndarray
    deformed: np.ndarray
    partner: np.ndarray  # reference coordinates of the closest admissible partner
    gap: np.ndarray

    def __len__(self):
        return len(self.index)


def _contact_candidates(field):
    grid = field.grid
    bnd = grid.boundary_samples()
    xs = np.concatenate([grid.qp_points, bnd.points])
    ys = np.concatenate([field.qp_values(), field.evaluate(bnd.points)])
    return xs, ys


def self_contact_set(field, eps_contact, r_min):
    """Discrete, eps-thickened version of the self-contact set.

    A Neumann boundary sample ``x`` is reported when some bulk or boundary
    sample ``x~`` with ``|x - x~| >= r_min`` satisfies
    ``|y(x) - y(x~)| <= eps_contact``.
    """
    grid = field.grid
    bN = grid.boundary_samples("N")
    empty = ContactSet(np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros((0, 2)),
                       np.zeros((0, 2)), np.zeros(0))
    if len(bN) == 0:
        return empty
    xs, ys = _contact_candidates(field)
    yb = field.evaluate(bN.points)
    tree = cKDTree(ys)
    hits = tree.query_ball_point(yb, eps_contact, workers=_workers())
    idx, partner, gap = [], [], []
    for i, cand in enumerate(hits):
        if not cand:
            continue
        cand = np.asarray(sorted(cand))
        far = np.sum((xs[cand] - bN.points[i]) ** 2, axis=1) >= r_min ** 2
        if not far.any():
            continue
        cand = cand[far]
        dist = np.linalg.norm(ys[cand] - yb[i], axis=1)
        j = int(np.argmin(dist))
        idx.append(i)
        partner.append(xs[cand[j]])
        gap.append(dist[j])
    if not idx:
        return empty
    idx = np.asarray(idx)
    return ContactSet(idx, bN.points[idx], yb[idx], np.asarray(partner), np.asarray(gap))


def admissible_gap(field, points, r_min, radius):
    """Distance from y(x) to the nearest admissible partner image (inf if > radius)."""
    xs, ys = _contact_candidates(field)
    tree = cKDTree(ys)
    yp = field.evaluate(points)
    hits = tree.query_ball_point(yp, radius, workers=_workers())
    out = np.full(len(points), np.inf)
    for i, cand in enumerate(hits):
        if not cand:
            continue
        cand = np.asarray(cand)
        far = np.sum((xs[cand] - points[i]) ** 2, axis=1) >= r_min ** 2
        if far.any():
            out[i] = np.min(np.linalg.norm(ys[cand[far]] - yp[i], axis=1))
    return out


def deformed_normal(field, points, normals):
    """Unit vectors (grad y)^{-T} n at boundary points."""
    points = np.atleast_2d(points)
    normals = np.atleast_2d(np.asarray(normals, dtype=float))
    _, F, _ = field.derivatives_at(points)
    J = det2(F)
    if not np.all(J > 0):
        i = int(np.argmin(J))
        raise BarrierError("singular deformation gradient at boundary point",
                           point=points[i], index=i, det=float(J[i]))
    # F^{-T} = cof(F) / det F
    from .materials import cofactor2
    v = np.einsum("nij,nj->ni", cofactor2(F), normals) / J[:, None]
    return v / np.linalg.norm(v, axis=1)[:, None]


def contact_report(field, params, kappa=None):
    """JSON-ready summary of the contact state."""
    cs = self_contact_set(field, params.eps_contact, params.r_min)
    bN = field.grid.boundary_samples("N")
    nu = deformed_normal(field, cs.points, bN.normals[cs.index]) if len(cs) else np.zeros((0, 2))
    cn = cn_report(field, params)
    pen = OverlapPenalty(field.grid, params).value(field)
    return {
        "contact_points": [
            {"reference": p.tolist(), "deformed": q.tolist(), "normal": n.tolist()}
            for p, q, n in zip(cs.points, cs.deformed, nu)
        ],
        "cn_excess": cn["excess"],
        "det_integral": cn["det_integral"],
        "image_measure": cn["image_measure"],
        "penalty": pen,
        "kappa": params.kappa if kappa is None else kappa,
    }
