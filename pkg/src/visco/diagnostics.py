"""Checks of the discrete weak form, contact reactions, Korn quotient and energy balance."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .ciarlet_necas import OverlapPenalty, deformed_normal
from .errors import BarrierError
from .grid import DeformationField
from .materials import det2


def _coeffs(z):
    return z.coeffs if isinstance(z, DeformationField) else np.asarray(z, dtype=float)


def _check_test_field(grid, z):
    zc = _coeffs(z)
    if zc.shape != (grid.n_basis, 2):
        raise ValueError(f"test field must have shape ({grid.n_basis}, 2)")
    if np.any(zc[grid.pinned] != 0.0):
        raise ValueError("test field does not vanish on the Dirichlet boundary (pinned coefficients nonzero)")
    return zc


def residual_vector(y_k, y_prev, tau, f_k, model):
    """Coefficient vector r with weak_residual(z) = <r, z> for every admissible z."""
    from .stepper import _Assembly
    grid = y_k.grid
    asm = _Assembly.for_grid(grid)
    F, G = y_k.qp_gradients(), y_k.qp_hessians()
    Fp = y_prev.qp_gradients()
    _, S = model.phi(F)
    _, T = model.hyper(G)
    Z = model.viscous_stress(Fp, (F - Fp) / tau)
    f = np.zeros((grid.n_qp, 2)) if f_k is None else np.asarray(f_k, dtype=float)
    r = asm.pull_back(S + Z, T, -f)
    r[grid.pinned] = 0.0
    return r


def weak_residual(y_k, y_prev, tau, f_k, z, model):
    """Left-hand side minus load of the discrete momentum balance, tested with z.

    int sigma_el : grad z + sigma_vi(grad y_prev, grad ydot) : grad z
        + h_el : grad^2 z - f_k . z dx,   ydot = (y_k - y_prev) / tau.
    The boundary reaction term is not included.
    """
    zc = _check_test_field(y_k.grid, z)
    return float(np.sum(residual_vector(y_k, y_prev, tau, f_k, model) * zc))


def penalty_pairing(y_k, params, kappa, z):
    """<kappa P'(y_k), z>."""
    zc = _check_test_field(y_k.grid, z)
    _, g = OverlapPenalty(y_k.grid, params).value_and_grad(y_k)
    return float(kappa * np.sum(g * zc))


@dataclass(frozen=True)
class ReactionSample:
    point: np.ndarray
    traction: np.ndarray  # per unit reference boundary length
    normal: np.ndarray  # deformed outward unit normal
    weight: float

    @property
    def sigma(self):
        return float(self.traction @ self.normal)

    @property
    def magnitude(self):
        return float(np.linalg.norm(self.traction))

    def angle(self):
        """Angle in degrees between traction and deformed normal (0 for zero traction)."""
        m = self.magnitude
        if m == 0.0:
            return 0.0
        return float(np.degrees(np.arccos(np.clip(self.sigma / m, -1.0, 1.0))))


def _inside(grid, pts):
    (ax, bx), (ay, by) = grid.x_range, grid.y_range
    x, y = pts[..., 0], pts[..., 1]
    box = (x >= ax) & (x <= bx) & (y >= ay) & (y <= by)
    ci = grid._cell_index(x, ax, grid.hx, grid.nx)
    cj = grid._cell_index(y, ay, grid.hy, grid.ny)
    return box & grid.active_cells[ci, cj]


def _ray_exit(grid, x, d):
    """Last reference point inside the domain on the ray x + s d / |d|, s >= 0."""
    step = 0.25 * min(grid.hx, grid.hy)
    n = int(np.ceil(grid.diameter / step)) + 1
    u = d / np.linalg.norm(d, axis=1, keepdims=True)
    s = step * np.arange(n)
    P = x[:, None, :] + s[None, :, None] * u[:, None, :]
    out = ~_inside(grid, P)
    first = np.where(out.any(axis=1), np.argmax(out, axis=1), n)
    last = P[np.arange(len(x)), np.maximum(first - 1, 0)]
    # refine the crossing by bisection between the last inside and first outside point
    lo, hi = np.zeros(len(x)), np.full(len(x), step)
    hit = first < n
    for _ in range(20):
        mid = 0.5 * (lo + hi)
        ok = _inside(grid, last + mid[:, None] * u)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    return np.where(hit[:, None], last + lo[:, None] * u, last)


def reaction_traction(y_k, y_prev, tau, f_k, params, kappa):
    """Boundary density of the contact reaction on Gamma_N.

    The reaction is the functional z -> <kappa P'(y_k), z>.  Its quadrature-
    point contributions are lumped onto the Gamma_N sample nearest to where
    the ray from the point along the pulled-back force leaves the reference
    domain (the face the force pushes through), and divided by that sample's
    weight (a diagonal boundary mass matrix), so that sum_b w_b s_b . z(x_b)
    reproduces the functional for test fields that are smooth on the scale of
    the lumping distance.  ``y_prev``, ``tau`` and ``f_k`` are accepted for symmetry with the weak residual.
    """
    grid = y_k.grid
    bN = grid.boundary_samples("N")
    if len(bN) == 0:
        return []
    _, gq = OverlapPenalty(grid, params).qp_value_and_grad(y_k.qp_values())
    force = kappa * gq
    s = np.zeros((len(bN), 2))
    live = np.flatnonzero(np.any(force != 0.0, axis=1))
    if len(live):
        F = y_k.qp_gradients()[live]
        d = np.linalg.solve(F, force[live][:, :, None])[:, :, 0]
        exits = _ray_exit(grid, grid.qp_points[live], d)
        _, near = cKDTree(bN.points).query(exits)
        np.add.at(s, near, force[live])
    s /= bN.weights[:, None]
    nu = deformed_normal(y_k, bN.points, bN.normals)
    return [ReactionSample(p, t, n, float(w)) for p, t, n, w in zip(bN.points, s, nu, bN.weights)]


def total_reaction(samples):
    if not samples:
        return np.zeros(2)
    return np.sum([s.weight * s.traction for s in samples], axis=0)


def support_tolerance(samples, tol_grad, rel=0.05):
    """Traction magnitude above which a sample counts as loaded."""
    mags = [s.magnitude for s in samples]
    return max(tol_grad, rel * max(mags, default=0.0))


def traction_support_check(samples, contact_set, margin, tol_support):
    """Every sample with |s| > tol_support lies within ``margin`` of the contact set."""
    loaded = [s for s in samples if s.magnitude > tol_support]
    pts = getattr(contact_set, "points", contact_set)
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    if not loaded:
        return {"ok": True, "n_loaded": 0, "n_outside": 0, "max_distance": 0.0,
                "tol_support": tol_support, "margin": margin}
    lp = np.array([s.point for s in loaded])
    if len(pts) == 0:
        dist = np.full(len(lp), np.inf)
    else:
        dist, _ = cKDTree(pts).query(lp)
    outside = dist > margin
    return {"ok": not bool(outside.any()), "n_loaded": len(loaded), "n_outside": int(outside.sum()),
            "max_distance": float(dist.max()), "tol_support": tol_support, "margin": margin}


# calibrated on the contact presets: sigma >= -TOL_SIGN_REL * max |s| at contact points,
# mean angle between s and the deformed normal over loaded contact points <= ANGLE_TOL_DEG
TOL_SIGN_REL = 0.05
ANGLE_TOL_DEG = 15.0


def contact_step_report(y_k, params, kappa, tol_grad, margin=None):
    """Structure of the reaction at one converged step.

    Contact points are the reported self-contact samples; the mean angle is
    taken over those whose traction exceeds the support tolerance.
    """
    from .ciarlet_necas import self_contact_set
    grid = y_k.grid
    samples = reaction_traction(y_k, y_k, 1.0, None, params, kappa)
    cs = self_contact_set(y_k, params.eps_contact, params.r_min)
    margin = 2.0 * grid.boundary_spacing if margin is None else margin
    max_mag = max((s.magnitude for s in samples), default=0.0)
    tol_support = support_tolerance(samples, tol_grad)
    tol_sign = TOL_SIGN_REL * max_mag
    support = traction_support_check(samples, cs, margin, tol_support)
    at = [samples[i] for i in cs.index]
    loaded = [s for s in at if s.magnitude > tol_support]
    angles = [s.angle() for s in loaded]
    min_sigma = min((s.sigma for s in at), default=0.0)
    mean_angle = float(np.mean(angles)) if angles else 0.0
    contact = len(cs) > 0
    if contact:
        ok = support["ok"] and min_sigma >= -tol_sign and mean_angle <= ANGLE_TOL_DEG
    else:
        ok = max_mag <= tol_grad
    return {"contact": contact, "contact_count": len(cs), "support_ok": support["ok"],
            "n_outside": support["n_outside"], "min_sigma": min_sigma, "tol_sign": tol_sign,
            "mean_angle": mean_angle, "max_angle": max(angles, default=0.0),
            "max_traction": max_mag, "total_reaction": total_reaction(samples).tolist(), "ok": ok}


def korn_quotient(y_field, v_field):
    """||grad v|| / ||grad y^T grad v + grad v^T grad y|| in L2 (quadrature).

    0/0 is reported as 0 and x/0 with x > 0 as +inf.
    """
    grid = y_field.grid
    F = y_field.qp_gradients()
    J = det2(F)
    if not np.all(J > 0):
        i = int(np.argmin(J))
        raise BarrierError("det grad y <= 0 at a quadrature point", index=i, det=float(J[i]))
    vc = _coeffs(v_field)
    scale = float(np.max(np.abs(vc), initial=0.0))
    if np.any(np.abs(vc[grid.pinned]) > 1e-12 * max(scale, 1.0)):
        raise ValueError("v must vanish on the Dirichlet boundary")
    V = v_field.qp_gradients() if isinstance(v_field, DeformationField) else \
        DeformationField(grid, vc).qp_gradients()
    A = np.swapaxes(F, -1, -2) @ V
    sym = A + np.swapaxes(A, -1, -2)
    w = grid.qp_weights
    num = np.sqrt(float(w @ np.sum(V * V, axis=(1, 2))))
    den = np.sqrt(float(w @ np.sum(sym * sym, axis=(1, 2))))
    if den == 0.0:
        return 0.0 if num == 0.0 else float("inf")
    return num / den


# -- energy bookkeeping ---------------------------------------------------------

ENERGY_HEADER = ("k", "t", "stored", "cum_dissipation", "cum_work", "imbalance", "slack_cn",
                 "cum_xi", "xi_vs_2zeta")


def energy_report(traj):
    """Cumulative balance stored + dissipated - work - stored_0 versus the penalty slack.

    ``slack_cn`` is sum_k kappa_k (P(y^{k-1}) - P(y^k)); the incremental
    minimality gives ``imbalance <= slack_cn`` at every prefix.
    ``xi_vs_2zeta`` is the relative gap between the summed dissipation rate
    and twice the summed dissipation potential.
    """
    rows = []
    cum_d = cum_w = cum_xi = slack = 0.0
    s0 = traj.ledger[0]["stored"]
    p_prev = traj.extra[0]["penalty"]
    for row, ex in zip(traj.ledger, traj.extra):
        if row["k"] > 0:
            cum_d += row["dissip_increment"]
            cum_w += row["work_increment"]
            cum_xi += ex["xi_increment"]
            slack += row["kappa"] * (p_prev - ex["penalty"])
            p_prev = ex["penalty"]
        imb = row["stored"] + cum_d - cum_w - s0
        denom = max(abs(cum_xi), 2.0 * abs(cum_d))
        rel = abs(cum_xi - 2.0 * cum_d) / denom if denom > 0 else 0.0
        rows.append({"k": row["k"], "t": row["t"], "stored": row["stored"], "cum_dissipation": cum_d,
                     "cum_work": cum_w, "imbalance": imb, "slack_cn": slack, "cum_xi": cum_xi,
                     "xi_vs_2zeta": rel})
    return rows


def imbalance_holds(report, rel=1e-10):
    """True when imbalance <= slack_cn at every prefix, up to roundoff."""
    for r in report:
        scale = abs(r["stored"]) + abs(r["cum_dissipation"]) + abs(r["cum_work"]) + 1e-300
        if r["imbalance"] > r["slack_cn"] + rel * scale:
            return False
    return True


def write_energy_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t", "stored", "cumulative_dissipation", "cumulative_work", "imbalance_slack"))
        for r in report:
            w.writerow([repr(float(r["t"])), repr(r["stored"]), repr(r["cum_dissipation"]),
                        repr(r["cum_work"]), repr(r["slack_cn"] - r["imbalance"])])


def complementarity(samples, gap):
    """sigma(x) * gap(x) products, reported for inspection only."""
    return np.array([s.sigma for s in samples]) * np.asarray(gap)
