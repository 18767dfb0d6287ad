"""Implicit time stepping by incremental minimisation.

Each step minimises

    E_k(y) = int phi(grad y) + H(grad^2 y)
             + tau zeta(grad y_prev, (grad y - grad y_prev) / tau) - f_k . y dx
             + kappa P(y)

over coefficients not pinned by the Dirichlet condition, with a
preconditioned L-BFGS method whose line search never leaves det > 0.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field as dc_field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ciarlet_necas import OverlapPenalty, cn_report, self_contact_set
from .errors import (BarrierError, ConstraintInfeasibleError, DomainError,
                     NonConvergenceError)
from .grid import DeformationField
from .materials import det2

log = logging.getLogger(__name__)

# local strain vector per component alpha: F[a,0], F[a,1], G[a,0,0], G[a,0,1], G[a,1,0], G[a,1,1]
_LOCAL_OPS = ("x", "y", "xx", "xy", "xy", "yy")
_NLOC = 12
# positions of flattened F (2 alpha + i) and G (4 alpha + 2 i + j) in the local vector
_F_LOC = np.array([6 * a + i for a in range(2) for i in range(2)])
_G_LOC = np.array([6 * a + 2 + 2 * i + j for a in range(2) for i in range(2) for j in range(2)])


@dataclass(frozen=True)
class SolverOptions:
    tol_grad: float = 1e-8
    max_iter: int = 400
    memory: int = 20
    max_halvings: int = 60
    precond_every: int = 30
    c1: float = 1e-4
    c2: float = 0.9

    def violations(self):
        out = []
        if not self.tol_grad > 0:
            out.append("solver.tol_grad: must be positive")
        if self.max_iter < 1:
            out.append("solver.max_iter: must be >= 1")
        if self.memory < 1:
            out.append("solver.memory: must be >= 1")
        if not 0 < self.c1 < self.c2 < 1:
            out.append("solver.c1, solver.c2: need 0 < c1 < c2 < 1")
        return out

    def to_dict(self):
        return {"tol_grad": self.tol_grad, "max_iter": self.max_iter, "memory": self.memory}


class _Assembly:
    """Grid-level operators shared by every step on the same grid."""

    _cache: dict = {}

    def __init__(self, grid):
        self.grid = grid
        ops = grid.operators
        self.ops = ops
        self.opsT = {k: v.T.tocsr() for k, v in ops.items()}
        self.w = grid.qp_weights
        M = grid.n_basis
        self.M = M
        free = np.flatnonzero(grid.free)
        self.free = free
        self.fidx = np.concatenate([free, free + M])

    @classmethod
    def for_grid(cls, grid):
        key = id(grid)
        hit = cls._cache.get(key)
        if hit is None or hit.grid is not grid:
            hit = cls(grid)
            cls._cache.clear()
            cls._cache[key] = hit
        return hit

    @cached_property
    def strain_operator(self):
        """Sparse D with rows q * 12 + 6 alpha + l, columns alpha * M + m."""
        n = self.grid.n_qp
        rows, cols, vals = [], [], []
        for a in range(2):
            for l, name in enumerate(_LOCAL_OPS):
                coo = self.ops[name].tocoo()
                rows.append(coo.row * _NLOC + 6 * a + l)
                cols.append(coo.col + a * self.M)
                vals.append(coo.data)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n * _NLOC, 2 * self.M))

    def apply(self, c):
        o = self.ops
        y = o["0"] @ c
        F = np.stack([o["x"] @ c, o["y"] @ c], axis=-1)
        cxx, cxy, cyy = o["xx"] @ c, o["xy"] @ c, o["yy"] @ c
        G = np.empty(y.shape + (2, 2))
        G[:, :, 0, 0] = cxx
        G[:, :, 0, 1] = cxy
        G[:, :, 1, 0] = cxy
        G[:, :, 1, 1] = cyy
        return y, F, G

    def pull_back(self, S, T, fy):
        """Coefficient gradient of sum_q w (S : dF + T : dG + fy . dy)."""
        w = self.w[:, None]
        oT = self.opsT
        g = oT["x"] @ (w * S[:, :, 0]) + oT["y"] @ (w * S[:, :, 1])
        g += oT["xx"] @ (w * T[:, :, 0, 0]) + oT["xy"] @ (w * (T[:, :, 0, 1] + T[:, :, 1, 0]))
        g += oT["yy"] @ (w * T[:, :, 1, 1])
        if fy is not None:
            g += oT["0"] @ (w * fy)
        return g


def _psd(H):
    lam, V = np.linalg.eigh(H)
    return (V * np.maximum(lam, 0.0)[..., None, :]) @ np.swapaxes(V, -1, -2)


class StepProblem:
    """Data of one incremental problem (previous state, load, parameters)."""

    def __init__(self, grid, model, params, tau, y_prev, f_qp, options=None, kappa=None,
                 penalty=None, precond=None):
        if not tau > 0:
            raise ValueError("tau must be positive")
        self.grid = grid
        self.model = model
        self.params = params
        self.tau = float(tau)
        self.y_prev = y_prev
        self.f_qp = np.zeros((grid.n_qp, 2)) if f_qp is None else np.asarray(f_qp, dtype=float)
        self.options = options or SolverOptions()
        self.kappa = params.kappa if kappa is None else float(kappa)
        self.asm = _Assembly.for_grid(grid)
        self.penalty = OverlapPenalty(grid, params) if penalty is None else penalty
        # factorised preconditioner, reusable across steps of one run
        self.precond = {} if precond is None else precond
        Fp = y_prev.qp_gradients()
        if not np.all(det2(Fp) > 0):
            raise BarrierError("previous state has det <= 0 at a quadrature point")
        self.F_prev = Fp
        self.c_pinned = y_prev.coeffs

    # -- vector <-> coefficients ---------------------------------------------

    def to_vector(self, coeffs):
        return np.ascontiguousarray(coeffs.T).ravel()[self.asm.fidx]

    def to_coeffs(self, z):
        full = np.ascontiguousarray(self.c_pinned.T).ravel().copy()
        full[self.asm.fidx] = z
        return full.reshape(2, -1).T.copy()

    # -- functional ------------------------------------------------------------

    def terms(self, coeffs, kappa=None):
        """Individual contributions at ``coeffs``; raises BarrierError."""
        kappa = self.kappa if kappa is None else kappa
        y, F, G = self.asm.apply(coeffs)
        w = self.asm.w
        J = det2(F)
        if not np.all(J > 0):
            i = int(np.argmin(J))
            raise BarrierError("det grad y <= 0 at a quadrature point",
                               point=self.grid.qp_points[i], index=i, det=float(J[i]))
        phi, _ = self.model.phi(F)
        hyp, _ = self.model.hyper(G)
        zeta, _ = self.model.zeta(self.F_prev, (F - self.F_prev) / self.tau)
        P = self.penalty.qp_value_and_grad(y)[0]
        return {
            "phi": float(w @ phi),
            "hyper": float(w @ hyp),
            "dissipation": self.tau * float(w @ zeta),
            "load": -float(w @ np.einsum("qa,qa->q", self.f_qp, y)),
            "penalty": P,
            "kappa": kappa,
        }

    def value(self, coeffs, kappa=None):
        t = self.terms(coeffs, kappa)
        return t["phi"] + t["hyper"] + t["dissipation"] + t["load"] + t["kappa"] * t["penalty"]

    def value_and_grad(self, coeffs, kappa=None):
        """E_k and dE_k/dc (M, 2), pinned rows zeroed; raises BarrierError."""
        kappa = self.kappa if kappa is None else kappa
        asm = self.asm
        y, F, G = asm.apply(coeffs)
        J = det2(F)
        if not np.all(J > 0):
            i = int(np.argmin(J))
            raise BarrierError("det grad y <= 0 at a quadrature point",
                               point=self.grid.qp_points[i], index=i, det=float(J[i]))
        w = asm.w
        phi, S = self.model.phi(F)
        hyp, T = self.model.hyper(G)
        zeta, Z = self.model.zeta(self.F_prev, (F - self.F_prev) / self.tau)
        P, gP = self.penalty.qp_value_and_grad(y)
        val = (w @ (phi + hyp + self.tau * zeta - np.einsum("qa,qa->q", self.f_qp, y))
               + kappa * P)
        # d/dF of tau * zeta(F_prev, (F - F_prev)/tau) is Z
        g = asm.pull_back(S + Z, T, -self.f_qp)
        if kappa != 0.0 and P != 0.0:
            g += kappa * (asm.opsT["0"] @ gP)
        g[self.grid.pinned] = 0.0
        return float(val), g

    def hessian_free(self, coeffs, kappa=None):
        """PSD surrogate of the Hessian restricted to free unknowns."""
        kappa = self.kappa if kappa is None else kappa
        asm = self.asm
        y, F, G = asm.apply(coeffs)
        n = len(F)
        H = np.zeros((n, _NLOC, _NLOC))
        Hphi = _psd(self.model.phi_hessian(F)) + self.model.zeta_hessian(self.F_prev) / self.tau
        Hhyp = self.model.hyper_hessian(G)
        H[:, _F_LOC[:, None], _F_LOC[None, :]] = Hphi
        H[:, _G_LOC[:, None], _G_LOC[None, :]] += Hhyp
        H *= asm.w[:, None, None]
        W = sp.bsr_matrix((H, np.arange(n), np.arange(n + 1)), shape=(n * _NLOC, n * _NLOC))
        D = asm.strain_operator
        K = (D.T @ (W @ D)).tocsr()
        if kappa > 0:
            K = K + kappa * self.penalty.hessian_abs(y)
        fidx = asm.fidx
        K = K[fidx][:, fidx]
        shift = 1e-12 * max(float(np.abs(K.diagonal()).mean()), 1e-300)
        return (K + shift * sp.identity(len(fidx))).tocsc()


def incremental_functional(y, problem, kappa=None):
    """Value of the incremental functional and its gradient (pinned rows zero)."""
    coeffs = y.coeffs if isinstance(y, DeformationField) else np.asarray(y, dtype=float)
    return problem.value_and_grad(coeffs, kappa)


# -- line search and quasi-Newton ------------------------------------------------

class _LineSearchFailure(Exception):
    pass


def _strong_wolfe(fun, f0, d0, c1, c2, max_halvings, alpha=1.0, max_eval=40):
    """Strong-Wolfe search on phi(a) = E(z + a p); barrier errors halve the step.

    ``fun(a)`` returns ``(f, dphi, payload)``.  Returns ``(a, f, payload)``.
    Once decreases fall below the roundoff level of f the search relies on
    the directional derivative (approximate Wolfe): a point is accepted if
    f <= f0 + eps_f and |dphi| <= c2 |dphi(0)|.
    """
    eps_f = 1e-14 * max(1.0, abs(f0))
    halvings = 0
    n_eval = 0

    def ev(a):
        nonlocal halvings, n_eval
        while True:
            n_eval += 1
            try:
                return a, fun(a)
            except BarrierError:
                halvings += 1
                if halvings > max_halvings:
                    raise _LineSearchFailure("barrier halving cap reached")
                a *= 0.5

    a_lo, f_lo, d_lo, pay_lo = 0.0, f0, d0, None
    a_hi = None
    a, (f, d, pay) = ev(alpha)
    best = None
    while n_eval < max_eval:
        if f <= f0 and (best is None or f < best[1]):
            best = (a, f, pay)
        armijo = f <= f0 + c1 * a * d0
        if f <= f0 + eps_f and abs(d) <= -c2 * d0:
            return a, f, pay
        if a_hi is None:
            if not armijo or (a_lo > 0 and f >= f_lo):
                a_hi = a
            elif abs(d) <= -c2 * d0:
                return a, f, pay
            elif d >= 0:
                a_hi, a_lo, f_lo, d_lo, pay_lo = a_lo, a, f, d, pay
            else:
                a_lo, f_lo, d_lo, pay_lo = a, f, d, pay
                a, (f, d, pay) = ev(2.0 * a)
                continue
        else:
            if not armijo or f >= f_lo:
                a_hi = a
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, pay
                if d * (a_hi - a_lo) >= 0:
                    a_hi = a_lo
                a_lo, f_lo, d_lo, pay_lo = a, f, d, pay
        # zoom: safeguarded quadratic interpolation inside [a_lo, a_hi]
        lo, hi = min(a_lo, a_hi), max(a_lo, a_hi)
        if hi - lo <= 1e-14 * max(1.0, hi):
            break
        denom = 2.0 * (f - f_lo - d_lo * (a - a_lo))
        trial = a_lo - d_lo * (a - a_lo) ** 2 / denom if denom > 0 else 0.5 * (lo + hi)
        if not (lo + 0.1 * (hi - lo) <= trial <= hi - 0.1 * (hi - lo)):
            trial = 0.5 * (lo + hi)
        try:
            n_eval += 1
            f, d, pay = fun(trial)
            a = trial
        except BarrierError:
            halvings += 1
            if halvings > max_halvings:
                break
            a_hi = trial if a_lo < trial else a_hi
            a, f, d, pay = trial, np.inf, 0.0, None
    if best is not None and best[1] < f0:
        return best
    if a_lo > 0 and f_lo < f0:
        return a_lo, f_lo, pay_lo
    raise _LineSearchFailure("no decrease along search direction")


@dataclass
class StepResult:
    field: DeformationField
    value: float
    grad_norm: float
    iterations: int
    kappa: float
    cn: dict
    value_prev: float
    penalty: float
    kappa_history: list = dc_field(default_factory=list)


def _lbfgs(problem, z0, kappa, tol, opts, it_offset=0):
    """Minimise E_k at fixed kappa from z0; returns (z, f, g, iters)."""

    def fg(z):
        c = problem.to_coeffs(z)
        f, g = problem.value_and_grad(c, kappa)
        return f, problem.to_vector(g)

    def factor(z):
        K = problem.hessian_free(problem.to_coeffs(z), kappa)
        return spla.splu(K, permc_spec="COLAMD")

    z = z0.copy()
    f, g = fg(z)
    pc = problem.precond
    if pc.get("kappa") != kappa or pc.get("stale", True):
        pc.update(lu=factor(z), kappa=kappa, stale=False)
    lu = pc["lu"]
    S, Y, RHO = [], [], []
    it = 0
    while True:
        gn = float(np.max(np.abs(g))) if len(g) else 0.0
        if gn <= tol:
            pc["lu"] = lu
            pc["stale"] = it > opts.precond_every // 3
            return z, f, g, it
        if it >= opts.max_iter:
            pc["stale"] = True
            raise NonConvergenceError(
                f"gradient norm {gn:.3e} above tolerance {tol:.3e} after {it} iterations",
                best=problem.to_coeffs(z), grad_norm=gn, iterations=it + it_offset)
        if it and it % opts.precond_every == 0:
            lu = factor(z)
            pc["stale"] = True
        # two-loop recursion with H0 = K^{-1}
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(S), reversed(Y), reversed(RHO)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        r = lu.solve(q)
        for (s, y, rho), a in zip(zip(S, Y, RHO), reversed(alphas)):
            b = rho * (y @ r)
            r += (a - b) * s
        p = -r
        d0 = float(g @ p)
        if not d0 < 0:
            S, Y, RHO = [], [], []
            lu = factor(z)
            p = -lu.solve(g)
            d0 = float(g @ p)
            if not d0 < 0:
                p, d0 = -g, -float(g @ g)

        def line(a):
            zt = z + a * p
            ft, gt = fg(zt)
            return ft, float(gt @ p), (zt, gt)

        try:
            a, f_new, (z_new, g_new) = _strong_wolfe(line, f, d0, opts.c1, opts.c2, opts.max_halvings)
        except _LineSearchFailure:
            if S:
                S, Y, RHO = [], [], []
                lu = factor(z)
                it += 1
                continue
            pc["stale"] = True
            raise NonConvergenceError(
                f"line search failed with gradient norm {gn:.3e} (tolerance {tol:.3e})",
                best=problem.to_coeffs(z), grad_norm=gn, iterations=it + it_offset)
        s = z_new - z
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.sqrt(float(s @ s) * float(y @ y)):
            S.append(s)
            Y.append(y)
            RHO.append(1.0 / sy)
            if len(S) > opts.memory:
                S.pop(0)
                Y.pop(0)
                RHO.pop(0)
        z, f, g = z_new, f_new, g_new
        it += 1


def minimize_step(problem, y_init=None):
    """Minimise the incremental functional with kappa continuation.

    Continuation restarts from the better of the current iterate and
    ``y_prev`` under the new weight, so the accepted state never has a
    larger functional value than the previous state.
    """
    opts = problem.options
    params = problem.params
    y_prev = problem.y_prev
    if y_init is None:
        y_init = y_prev
    kappa = problem.kappa
    total_it = 0
    history = []

    def ev(c, k):
        try:
            return problem.value(c, k)
        except BarrierError:
            return np.inf

    start = y_init.coeffs
    e_init = ev(start, kappa)
    if not np.isfinite(e_init):
        raise BarrierError("initial guess has det <= 0 at a quadrature point")
    e_prev = ev(y_prev.coeffs, kappa)
    if e_prev < e_init:
        start, e_init = y_prev.coeffs, e_prev
    while True:
        tol = opts.tol_grad * max(1.0, abs(e_init))
        z, f, g, it = _lbfgs(problem, problem.to_vector(start), kappa, tol, opts, total_it)
        total_it += it
        coeffs = problem.to_coeffs(z)
        fld = DeformationField(problem.grid, coeffs)
        cn = cn_report(fld, params)
        history.append({"kappa": kappa, "excess": cn["excess"], "iters": it})
        if cn["excess"] <= params.tol_cn:
            break
        if kappa >= params.kappa_max:
            raise ConstraintInfeasibleError(
                f"overlap excess {cn['excess']:.3e} above tol_CN {params.tol_cn:.3e} at kappa_max",
                best=coeffs, excess=cn["excess"], kappa=kappa)
        kappa = min(kappa * params.kappa_growth, params.kappa_max)
        e_cur, e_prev = ev(coeffs, kappa), ev(y_prev.coeffs, kappa)
        start, e_init = (coeffs, e_cur) if e_cur <= e_prev else (y_prev.coeffs, e_prev)
        log.info("kappa raised to %.1e (excess %.3e)", kappa, cn["excess"])
    problem.kappa = kappa
    return StepResult(
        field=fld, value=ev(coeffs, kappa), grad_norm=float(np.max(np.abs(g))) if len(g) else 0.0,
        iterations=total_it, kappa=kappa, cn=cn, value_prev=ev(y_prev.coeffs, kappa),
        penalty=problem.penalty.value(fld), kappa_history=history)


# -- trajectory ------------------------------------------------------------------

LEDGER_HEADER = ("k", "t", "stored", "dissip_increment", "work_increment", "cn_excess",
                 "contact_count", "korn_quotient", "det_min", "iters", "kappa")


@dataclass
class Trajectory:
    grid: object
    tau: float
    times: list = dc_field(default_factory=list)
    coeffs: list = dc_field(default_factory=list)
    ledger: list = dc_field(default_factory=list)
    loads: list = dc_field(default_factory=list)  # f_k at quadrature points, k >= 1
    extra: list = dc_field(default_factory=list)  # per-step bookkeeping beyond the ledger

    def __len__(self):
        return len(self.coeffs)

    def field(self, k):
        return DeformationField(self.grid, self.coeffs[k])

    @property
    def T(self):
        return self.times[-1]

    def ledger_rows(self):
        return [[row[h] for h in LEDGER_HEADER] for row in self.ledger]


class RunAborted(RuntimeError):
    """A step failed; ``trajectory`` holds the accepted prefix."""

    def __init__(self, message, trajectory, cause):
        super().__init__(message)
        self.trajectory = trajectory
        self.cause = cause


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class _Sink:
    """Streams frames and ledger rows to an output directory."""

    def __init__(self, out_dir, stride):
        self.out_dir = out_dir
        self.stride = stride
        if out_dir is None:
            return
        os.makedirs(out_dir, exist_ok=True)
        self._ledger = open(os.path.join(out_dir, "ledger.csv"), "w", newline="")
        self._writer = csv.writer(self._ledger, lineterminator="\n")
        self._writer.writerow(LEDGER_HEADER)

    def step(self, k, t, fld, row, last=False):
        if self.out_dir is None:
            return
        self._writer.writerow([_fmt(row[h]) for h in LEDGER_HEADER])
        self._ledger.flush()
        if k % self.stride == 0 or last:
            write_frame(os.path.join(self.out_dir, f"frame_{k:04d}.json"), k, t, fld)

    def close(self):
        if self.out_dir is not None:
            self._ledger.close()


def write_frame(path, k, t, fld):
    with open(path, "w") as fh:
        json.dump({"k": k, "t": t, "field": fld.to_dict()}, fh)


def read_frame(path):
    with open(path) as fh:
        d = json.load(fh)
    return d["k"], d["t"], DeformationField.from_dict(d["field"])


def stored_energy(model, fld):
    w = fld.grid.qp_weights
    return float(w @ model.phi(fld.qp_gradients())[0] + w @ model.hyper(fld.qp_hessians())[0])


def _step_row(k, t, model, params, tau, prev, cur, f_qp, res, korn):
    w = cur.grid.qp_weights
    Fp, F = prev.qp_gradients(), cur.qp_gradients()
    Fdot = (F - Fp) / tau
    zeta = model.zeta(Fp, Fdot)[0]
    xi = model.dissipation_rate(Fp, Fdot)
    cs = self_contact_set(cur, params.eps_contact, params.r_min)
    row = {
        "k": k, "t": t,
        "stored": stored_energy(model, cur),
        "dissip_increment": tau * float(w @ zeta),
        "work_increment": float(w @ np.einsum("qa,qa->q", f_qp, cur.qp_values() - prev.qp_values())),
        "cn_excess": res.cn["excess"],
        "contact_count": len(cs),
        "korn_quotient": korn,
        "det_min": float(det2(F).min()),
        "iters": res.iterations,
        "kappa": res.kappa,
    }
    extra = {"value": res.value, "value_prev": res.value_prev, "penalty": res.penalty,
             "xi_increment": tau * float(w @ xi), "grad_norm": res.grad_norm,
             "det_integral": res.cn["det_integral"], "image_measure": res.cn["image_measure"],
             "kappa_history": res.kappa_history}
    return row, extra


def run(config, out_dir=None, y0=None, progress=None):
    """Solve the time-discrete problem for k = 1..T/tau from y0 (identity by default)."""
    from .diagnostics import korn_quotient
    from .grid import identity_field

    grid = config.build_grid()
    model = config.material
    params = config.penalty_params(grid)
    params.validate_for(grid)
    tau, n_steps = config.tau, config.n_steps
    load = config.load
    opts = config.solver
    y = identity_field(grid) if y0 is None else y0
    if not np.all(det2(y.qp_gradients()) > 0):
        raise BarrierError("initial state has det <= 0 at a quadrature point")
    traj = Trajectory(grid=grid, tau=tau)
    traj.times.append(0.0)
    traj.coeffs.append(y.coeffs)
    cn0 = cn_report(y, params)
    row0 = {"k": 0, "t": 0.0, "stored": stored_energy(model, y), "dissip_increment": 0.0,
            "work_increment": 0.0, "cn_excess": cn0["excess"],
            "contact_count": len(self_contact_set(y, params.eps_contact, params.r_min)),
            "korn_quotient": 0.0, "det_min": float(det2(y.qp_gradients()).min()),
            "iters": 0, "kappa": params.kappa}
    traj.ledger.append(row0)
    traj.extra.append({"value": 0.0, "value_prev": 0.0, "penalty": 0.0, "xi_increment": 0.0,
                       "grad_norm": 0.0, "det_integral": cn0["det_integral"],
                       "image_measure": cn0["image_measure"], "kappa_history": []})
    sink = _Sink(out_dir, config.frame_stride)
    sink.step(0, 0.0, y, row0, last=n_steps == 0)
    kappa = params.kappa
    y_older = None
    qp = grid.qp_points
    penalty = OverlapPenalty(grid, params)
    precond = {}
    try:
        for k in range(1, n_steps + 1):
            t0, t1 = (k - 1) * tau, k * tau
            f_qp = load.step_average(t0, t1, qp)
            problem = StepProblem(grid, model, params, tau, y, f_qp, opts, kappa=kappa,
                                  penalty=penalty, precond=precond)
            guess = y
            if y_older is not None:
                ext = DeformationField(grid, 2.0 * y.coeffs - y_older.coeffs)
                try:
                    if problem.value(ext.coeffs) < problem.value(y.coeffs):
                        guess = ext
                except BarrierError:
                    pass
            try:
                res = minimize_step(problem, guess)
            except Exception as exc:
                raise RunAborted(f"step {k} failed: {exc}", traj, exc) from exc
            kappa = res.kappa
            cur = res.field
            korn = korn_quotient(cur, DeformationField(grid, (cur.coeffs - y.coeffs) / tau))
            row, extra = _step_row(k, t1, model, params, tau, y, cur, f_qp, res, korn)
            traj.times.append(t1)
            traj.coeffs.append(cur.coeffs)
            traj.ledger.append(row)
            traj.loads.append(f_qp)
            traj.extra.append(extra)
            sink.step(k, t1, cur, row, last=k == n_steps)
            if progress is not None:
                progress(k, row)
            y_older, y = y, cur
    finally:
        sink.close()
    return traj


def interpolants(traj, t):
    """Right/left piecewise-constant and piecewise-affine interpolants at time t.

    For t in ((k-1) tau, k tau] returns ``(y^k, y^{k-1}, affine blend)``.
    """
    tau = traj.tau
    T = traj.times[-1]
    if not 0 < t <= T * (1 + 1e-12):
        raise DomainError(f"t = {t} outside (0, {T}]")
    k = int(np.ceil(t / tau - 1e-9))
    k = min(max(k, 1), len(traj.coeffs) - 1)
    lam = (t - (k - 1) * tau) / tau
    ck, cp = traj.coeffs[k], traj.coeffs[k - 1]
    aff = lam * ck + (1.0 - lam) * cp
    return traj.field(k), traj.field(k - 1), DeformationField(traj.grid, aff)
