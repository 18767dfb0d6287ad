"""Energy densities, dissipation potential and their derivatives (d = 2).

All routines are vectorised: ``F`` has shape ``(..., 2, 2)`` with
``F[..., alpha, i] = d y_alpha / d x_i`` and ``G`` has shape
``(..., 2, 2, 2)`` with ``G[..., alpha, i, j] = d F_alpha_i / d x_j``.

Default model::

    phi(F) = a |F|^s + b det(F)^-q + c_vol det F + c0
    H(G)   = (nu / p) |G|^p
    zeta(F; Fdot) = (eta / 2) |Cdot|^2,   Cdot = Fdot^T F + F^T Fdot

``c_vol`` and ``c0`` make the identity stress free with zero energy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BarrierError

DIM = 2

# flattened index of F[alpha, i] is 2 * alpha + i; second derivative of det F
_D2_DET = np.array([
    [0.0, 0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0, 0.0],
    [1.0, 0.0, 0.0, 0.0],
])


def det2(F):
    return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]


def cofactor2(F):
    """d det F / dF."""
    C = np.empty_like(F)
    C[..., 0, 0] = F[..., 1, 1]
    C[..., 0, 1] = -F[..., 1, 0]
    C[..., 1, 0] = -F[..., 0, 1]
    C[..., 1, 1] = F[..., 0, 0]
    return C


def _norm2(A, axes):
    return np.sum(A * A, axis=axes)


def cauchy_green(F):
    return np.swapaxes(F, -1, -2) @ F


def cdot(F, Fdot):
    M = np.swapaxes(Fdot, -1, -2) @ F
    return M + np.swapaxes(M, -1, -2)


@dataclass(frozen=True)
class MaterialModel:
    """Kelvin-Voigt second-grade material with a determinant barrier."""

    a: float = 1.0
    b: float = 1.0
    s: float = 4.0
    q: float = 4.0
    p: float = 4.0
    nu: float = 1e-3
    eta: float = 1.0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ValueError("; ".join(problems))

    def violations(self):
        out = []
        for name in ("a", "b", "nu", "eta"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be positive")
        if not self.s > 1:
            out.append("s must exceed 1")
        if not self.p > DIM:
            out.append(f"p must exceed d = {DIM}")
        elif not self.q >= self.q_min:
            out.append(f"q must satisfy q >= p*d/(p-d) = {self.q_min:g}")
        if self.p < 2:
            out.append("p must be >= 2 for a monotone hyperstress")
        return out

    @property
    def q_min(self):
        return self.p * DIM / (self.p - DIM) if self.p > DIM else np.inf

    @property
    def c_vol(self):
        # phi'(I) = (a s d^{(s-2)/2} - q b + c_vol) I = 0
        return self.q * self.b - self.a * self.s * DIM ** ((self.s - 2.0) / 2.0)

    @property
    def c0(self):
        return -(self.a * DIM ** (self.s / 2.0) + self.b + self.c_vol)

    @property
    def monotonicity_constant(self):
        """alpha with alpha|G1-G2|^p <= (H'(G1)-H'(G2)) : (G1-G2)."""
        return self.nu * 2.0 ** (2.0 - self.p)

    # -- elastic part ------------------------------------------------------

    def _check_det(self, J):
        bad = ~(J > 0)
        if np.any(bad):
            idx = int(np.flatnonzero(np.ravel(bad))[0])
            raise BarrierError(f"det F = {np.ravel(J)[idx]:.3e} <= 0", index=idx,
                               det=float(np.ravel(J)[idx]))

    def phi(self, F):
        """Stored energy density and elastic stress phi'(F)."""
        F = np.asarray(F, dtype=float)
        J = det2(F)
        self._check_det(J)
        n2 = _norm2(F, (-2, -1))
        energy = self.a * n2 ** (self.s / 2) + self.b * J ** (-self.q) + self.c_vol * J + self.c0
        coef_f = self.a * self.s * n2 ** (self.s / 2 - 1)
        coef_j = -self.q * self.b * J ** (-self.q - 1) + self.c_vol
        stress = coef_f[..., None, None] * F + coef_j[..., None, None] * cofactor2(F)
        return energy, stress

    def phi_energy(self, F):
        return self.phi(F)[0]

    def phi_hessian(self, F):
        """Second derivative of phi as ``(..., 4, 4)`` over flattened F."""
        F = np.asarray(F, dtype=float)
        J = det2(F)
        self._check_det(J)
        f = F.reshape(F.shape[:-2] + (4,))
        n2 = np.sum(f * f, axis=-1)
        s, q = self.s, self.q
        eye = np.eye(4)
        H = self.a * s * n2[..., None, None] ** (s / 2 - 1) * (
            eye + (s - 2) * f[..., :, None] * f[..., None, :] / n2[..., None, None])
        cof = cofactor2(F).reshape(f.shape)
        g1 = -q * self.b * J ** (-q - 1) + self.c_vol
        g2 = q * (q + 1) * self.b * J ** (-q - 2)
        H = H + g2[..., None, None] * cof[..., :, None] * cof[..., None, :]
        H = H + g1[..., None, None] * _D2_DET
        return H

    # -- hyperstress -------------------------------------------------------

    def hyper(self, G):
        """H(G) = (nu/p)|G|^p and hyperstress nu |G|^{p-2} G."""
        G = np.asarray(G, dtype=float)
        n2 = _norm2(G, (-3, -2, -1))
        energy = self.nu / self.p * n2 ** (self.p / 2)
        stress = (self.nu * n2 ** (self.p / 2 - 1))[..., None, None, None] * G
        return energy, stress

    def hyper_hessian(self, G):
        """Second derivative of H as ``(..., 8, 8)`` over flattened G."""
        G = np.asarray(G, dtype=float)
        g = G.reshape(G.shape[:-3] + (8,))
        n2 = np.sum(g * g, axis=-1)
        p = self.p
        with np.errstate(divide="ignore", invalid="ignore"):
            outer = np.where(n2[..., None, None] > 0,
                             g[..., :, None] * g[..., None, :] / n2[..., None, None], 0.0)
        return self.nu * n2[..., None, None] ** (p / 2 - 1) * (np.eye(8) + (p - 2) * outer)

    # -- viscosity ---------------------------------------------------------

    def zeta(self, F, Fdot):
        """Dissipation potential and its derivative in Fdot."""
        F = np.asarray(F, dtype=float)
        Cd = cdot(F, np.asarray(Fdot, dtype=float))
        value = 0.5 * self.eta * _norm2(Cd, (-2, -1))
        return value, 2.0 * self.eta * F @ Cd

    def viscous_stress(self, F, Fdot):
        """sigma_vi = 2 F D (F^T Fdot + Fdot^T F) with D = eta Id."""
        F = np.asarray(F, dtype=float)
        return 2.0 * self.eta * F @ cdot(F, np.asarray(Fdot, dtype=float))

    def dissipation_rate(self, F, Fdot):
        """xi = sigma_vi : Fdot (equals 2 zeta for the quadratic potential)."""
        return np.sum(self.viscous_stress(F, Fdot) * np.asarray(Fdot, dtype=float), axis=(-2, -1))

    def zeta_hessian(self, F):
        """d^2 zeta / dFdot^2 as ``(..., 4, 4)``; independent of Fdot."""
        F = np.asarray(F, dtype=float)
        L = _cdot_operator(F)
        return self.eta * np.swapaxes(L, -1, -2) @ L

    # -- assumption bookkeeping ---------------------------------------------

    @property
    def coercivity(self):
        """(eps, K) with phi(F) >= eps (|F|^s + det F^-q) - K for all F in GL+.

        phi(I) = 0 rules out K = 0.  Using det F <= |F|^2 / 2 and Young's
        inequality on the volumetric term, eps = min(a/2, b).  Defaults give
        (1/2, 3).  Requires s > 2 when c_vol < 0.
        """
        young = 0.0
        if self.c_vol < 0:
            if not self.s > 2:
                raise ValueError("coercivity bound needs s > 2 when c_vol < 0")
            cj = -self.c_vol / DIM
            r = self.s / 2.0
            t_star = (2.0 * cj / (self.a * r)) ** (1.0 / (r - 1.0))
            young = cj * t_star - 0.5 * self.a * t_star ** r
        return min(0.5 * self.a, self.b), young - self.c0

    def to_dict(self):
        return {k: getattr(self, k) for k in ("a", "b", "s", "q", "p", "nu", "eta")}


def _cdot_operator(F):
    """Matrix L with vec(Cdot) = L vec(Fdot) (row-major 2x2 vec)."""
    F = np.asarray(F, dtype=float)
    L = np.zeros(F.shape[:-2] + (4, 4))
    # Cdot_ij = sum_a Fdot_ai F_aj + F_ai Fdot_aj
    for i in range(2):
        for j in range(2):
            row = 2 * i + j
            for a in range(2):
                L[..., row, 2 * a + i] += F[..., a, j]
                L[..., row, 2 * a + j] += F[..., a, i]
    return L


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def skew(w):
    return np.array([[0.0, -w], [w, 0.0]])


def random_gl_plus(rng, n=None, det_range=(1e-3, 1e3)):
    """Random matrices with det in ``det_range`` (log-uniform)."""
    size = () if n is None else (n,)
    A = rng.normal(size=size + (2, 2))
    J = det2(A)
    A[..., 0, :] *= np.where(J < 0, -1.0, 1.0)[..., None]
    J = np.abs(det2(A))
    target = np.exp(rng.uniform(np.log(det_range[0]), np.log(det_range[1]), size=size))
    return A * np.sqrt(target / J)[..., None, None]


def frame_indifference_suite(model, n_samples, rng=None, seed=0):
    """Max relative deviations of phi, H and zeta under superimposed rotations.

    For each sample draws ``R`` in SO(2), ``Rdot = W R`` with ``W`` skew,
    ``F`` in GL+(2), ``Fdot`` and ``G``; compares
    ``phi(RF)`` vs ``phi(F)``, ``H(RG)`` vs ``H(G)`` (R on the first index)
    and ``zeta(RF; Rdot F + R Fdot)`` vs ``zeta(F; Fdot)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed) if rng is None else rng
    theta = rng.uniform(-np.pi, np.pi, n_samples)
    omega = rng.normal(size=n_samples)
    R = np.stack([rotation(t) for t in theta])
    Rdot = np.stack([skew(w) for w in omega]) @ R
    F = random_gl_plus(rng, n_samples, det_range=(0.2, 5.0))
    Fdot = rng.normal(size=(n_samples, 2, 2))
    G = rng.normal(size=(n_samples, 2, 2, 2))
    return _invariance_deviations(model, R, Rdot, F, Fdot, G)


def _invariance_deviations(model, R, Rdot, F, Fdot, G):
    phi0 = model.phi(F)[0]
    phi1 = model.phi(R @ F)[0]
    h0 = model.hyper(G)[0]
    h1 = model.hyper(np.einsum("nab,nbij->naij", R, G))[0]
    z0 = model.zeta(F, Fdot)[0]
    z1 = model.zeta(R @ F, Rdot @ F + R @ Fdot)[0]

    def dev(x0, x1):
        return float(np.max(np.abs(x1 - x0) / (1.0 + np.abs(x0))))

    return {
        "n_samples": int(len(F)),
        "phi": dev(phi0, phi1),
        "hyper": dev(h0, h1),
        "zeta": dev(z0, z1),
        "max": max(dev(phi0, phi1), dev(h0, h1), dev(z0, z1)),
    }


def phi(model, F):
    return model.phi(F)


def hyper(model, G):
    return model.hyper(G)


def zeta(model, F, Fdot):
    return model.zeta(F, Fdot)


def viscous_stress(model, F, Fdot):
    return model.viscous_stress(F, Fdot)
