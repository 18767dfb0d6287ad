import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from visco.errors import BarrierError
from visco.materials import (MaterialModel, cdot, cofactor2, det2, frame_indifference_suite,
                             random_gl_plus, rotation)

M = MaterialModel()
finite = st.floats(-3, 3, allow_nan=False)


def gl_plus(draw_arr):
    F = np.array(draw_arr, dtype=float).reshape(2, 2)
    if det2(F) < 0:
        F[0] *= -1
    return F


def test_stress_free_reference():
    e, S = M.phi(np.eye(2))
    assert e == pytest.approx(0.0, abs=1e-14)
    np.testing.assert_allclose(S, 0.0, atol=1e-13)
    # default constants: phi = |F|^4 + J^-4 - 4 J - 1
    assert (M.c_vol, M.c0) == (-4.0, -1.0)


def test_phi_formula(rng):
    F = random_gl_plus(rng, 20)
    J = det2(F)
    n2 = np.sum(F * F, axis=(1, 2))
    np.testing.assert_allclose(M.phi(F)[0], n2 ** 2 + J ** -4 - 4 * J - 1, rtol=1e-12)


def test_barrier():
    with pytest.raises(BarrierError):
        M.phi(np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(BarrierError):
        M.phi(np.zeros((2, 2)))


def test_hessians_by_differences(rng):
    F = random_gl_plus(rng, det_range=(0.5, 2.0))
    H = M.phi_hessian(F)
    h = 1e-6
    num = np.zeros((4, 4))
    for m in range(4):
        E = np.zeros(4)
        E[m] = h
        num[:, m] = ((M.phi(F + E.reshape(2, 2))[1] - M.phi(F - E.reshape(2, 2))[1]) / (2 * h)).ravel()
    np.testing.assert_allclose(H, num, rtol=1e-6, atol=1e-6 * np.abs(H).max())
    G = rng.normal(size=(2, 2, 2))
    Hh = M.hyper_hessian(G)
    num = np.zeros((8, 8))
    for m in range(8):
        E = np.zeros(8)
        E[m] = h
        num[:, m] = ((M.hyper(G + E.reshape(2, 2, 2))[1] - M.hyper(G - E.reshape(2, 2, 2))[1]) / (2 * h)).ravel()
    np.testing.assert_allclose(Hh, num, rtol=1e-6, atol=1e-9)
    Zh = M.zeta_hessian(F)
    Fd = rng.normal(size=(2, 2))
    num = np.zeros((4, 4))
    for m in range(4):
        E = np.zeros(4)
        E[m] = h
        num[:, m] = ((M.zeta(F, Fd + E.reshape(2, 2))[1] - M.zeta(F, Fd - E.reshape(2, 2))[1]) / (2 * h)).ravel()
    np.testing.assert_allclose(Zh, num, rtol=1e-6, atol=1e-8)


@given(arrays(float, 4, elements=finite), arrays(float, 4, elements=finite))
def test_dissipation_identity(f, fd):
    F = gl_plus(f)
    if det2(F) < 1e-3:
        return
    Fd = fd.reshape(2, 2)
    xi = M.dissipation_rate(F, Fd)
    assert xi == pytest.approx(2.0 * M.zeta(F, Fd)[0], rel=1e-12, abs=1e-300)
    assert xi >= 0.0


@given(arrays(float, 4, elements=finite), st.floats(-np.pi, np.pi))
def test_frame_indifference_property(f, theta):
    F = gl_plus(f)
    if det2(F) < 1e-2:
        return
    R = rotation(theta)
    assert M.phi(R @ F)[0] == pytest.approx(M.phi(F)[0], rel=1e-10, abs=1e-10)


@given(arrays(float, 4, elements=st.floats(-4, 4)))
def test_coercivity_bound(f):
    F = gl_plus(f)
    J = det2(F)
    if J < 1e-2:
        return
    eps, K = M.coercivity
    assert M.phi(F)[0] >= eps * (np.sum(F * F) ** 2 + J ** -4) - K - 1e-9


@given(arrays(float, 8, elements=finite), arrays(float, 8, elements=finite))
def test_hyperstress_monotone(g1, g2):
    G1, G2 = g1.reshape(2, 2, 2), g2.reshape(2, 2, 2)
    lhs = np.sum((M.hyper(G1)[1] - M.hyper(G2)[1]) * (G1 - G2))
    assert lhs >= M.monotonicity_constant * np.sum((G1 - G2) ** 2) ** 2 * (1 - 1e-9) - 1e-12


def test_frame_indifference_suite():
    r = frame_indifference_suite(M, 2000, seed=3)
    assert r["max"] <= 1e-10


def test_viscous_stress_frame_indifference(rng):
    F = random_gl_plus(rng, det_range=(0.5, 2.0))
    Fd = rng.normal(size=(2, 2))
    R = rotation(0.7)
    # a rigid spin adds nothing to Cdot
    W = np.array([[0.0, -1.3], [1.3, 0.0]])
    np.testing.assert_allclose(cdot(F, W @ F), 0.0, atol=1e-13)
    np.testing.assert_allclose(M.viscous_stress(R @ F, R @ Fd), R @ M.viscous_stress(F, Fd), atol=1e-12)


def test_cofactor(rng):
    F = rng.normal(size=(2, 2))
    np.testing.assert_allclose(cofactor2(F), det2(F) * np.linalg.inv(F).T)


def test_assumption_violations():
    with pytest.raises(ValueError, match=r"q >= p\*d/\(p-d\) = 4"):
        MaterialModel(q=3.0)
    bad = [m for m in (dict(p=2.0), dict(eta=0.0), dict(s=1.0))]
    for kw in bad:
        with pytest.raises(ValueError):
            MaterialModel(**kw)
