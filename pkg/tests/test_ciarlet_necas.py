import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import brute_pairs, fold_field, union_area
from visco.ciarlet_necas import (CUTOFF, OverlapPenalty, OverlapPenaltyParams, cn_report,
                                 det_integral, deformed_normal, image_measure, kernel,
                                 overlap_penalty, self_contact_set)
from visco.checks import injective_fields
from visco.errors import BarrierError, ResolutionError
from visco.grid import DeformationField, ReferenceGrid, affine_field, identity_field, interpolate_map
from visco.materials import rotation


@pytest.fixture(scope="module")
def square():
    return ReferenceGrid((0.0, 1.0), (0.0, 1.0), 8, 8)


def test_identity_measure(square):
    y = identity_field(square)
    assert det_integral(y) == pytest.approx(1.0, abs=1e-13)
    assert image_measure(y, square.hx / 8) == pytest.approx(1.0, abs=1e-12)


def test_first_order_convergence(square):
    sizes = [square.hx / 8 / 2 ** i for i in range(4)]
    for name, y in injective_fields(square).items():
        errs = [abs(image_measure(y, h) - det_integral(y)) for h in sizes]
        slope = np.polyfit(np.log(sizes), np.log(errs), 1)[0]
        assert all(b < a for a, b in zip(errs[:-1], errs[1:])), name
        assert 0.8 <= slope <= 1.3, (name, slope)


def test_rotation_scaling_area(square):
    y = affine_field(square, 1.3 * rotation(0.4))
    assert det_integral(y) == pytest.approx(1.69, rel=1e-12)
    assert cn_report(y, OverlapPenaltyParams.for_grid(square))["excess"] == 0.0


def test_fold_matches_polygon_oracle():
    y = fold_field()
    g = y.grid
    assert det_integral(y) == pytest.approx(3 * np.pi * 0.75 / 2, rel=1e-5)
    oracle = det_integral(y) - union_area(y)
    assert oracle == pytest.approx(3 * np.pi / 8, rel=1e-3)
    r = cn_report(y, OverlapPenaltyParams.for_grid(g, h_pix=g.hx / 16))
    assert abs(r["excess"] - oracle) <= 0.02 * oracle


def test_barrier_and_resolution(square):
    flip = affine_field(square, [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(BarrierError):
        cn_report(flip, OverlapPenaltyParams.for_grid(square))
    with pytest.raises(ResolutionError):
        image_measure(identity_field(square), 1e-4, max_samples=1000)


def test_kernel_is_c1():
    k, dk, d2k = kernel(np.array([0.0, CUTOFF ** 2 - 1e-12, CUTOFF ** 2, 20.0]))
    assert k[0] == pytest.approx(1.0 - np.exp(-16) * 17)
    assert abs(k[1]) < 1e-18 and abs(dk[1]) < 1e-12
    assert k[2] == dk[2] == k[3] == dk[3] == 0.0
    u = np.linspace(0.1, 15.9, 50)
    h = 1e-6
    np.testing.assert_allclose(kernel(u)[1], (kernel(u + h)[0] - kernel(u - h)[0]) / (2 * h), atol=1e-8)


def squeezed(grid, s=0.1):
    return interpolate_map(grid, lambda x: np.column_stack([s * x[:, 0], x[:, 1] + 0.05 * np.sin(3 * x[:, 0])]))


def test_pairs_match_brute_force(square):
    p = OverlapPenaltyParams.for_grid(square)
    y = squeezed(square)
    pen = OverlapPenalty(square, p, skin=0.0)
    got = set(map(tuple, pen.pairs(y.qp_values()).tolist()))
    want = brute_pairs(square.qp_points, y.qp_values(), p.r_min, CUTOFF * p.delta)
    assert want <= got
    assert len(want) > 100


def test_penalty_matches_direct_sum(square):
    p = OverlapPenaltyParams.for_grid(square)
    y = squeezed(square)
    x, yq, w = square.qp_points, y.qp_values(), square.qp_weights
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    r2 = np.sum((yq[:, None] - yq[None]) ** 2, axis=-1)
    K = kernel(r2 / p.delta ** 2)[0] * (dx >= p.r_min)
    direct = 0.5 * float(w @ K @ w)
    assert overlap_penalty(y, p)[0] == pytest.approx(direct, rel=1e-12)


@given(st.floats(0.05, 0.3), st.integers(0, 10_000))
def test_penalty_gradient(s, seed):
    g = ReferenceGrid((0.0, 1.0), (0.0, 1.0), 6, 6)
    p = OverlapPenaltyParams.for_grid(g)
    y = squeezed(g, s)
    v, grad = overlap_penalty(y, p)
    d = np.random.default_rng(seed).normal(size=grad.shape)
    h = 1e-7
    fd = (overlap_penalty(y.with_coeffs(y.coeffs + h * d), p)[0]
          - overlap_penalty(y.with_coeffs(y.coeffs - h * d), p)[0]) / (2 * h)
    assert abs(fd - np.sum(grad * d)) <= 1e-5 * np.linalg.norm(grad) * np.linalg.norm(d) + 1e-14


def test_verlet_list_does_not_change_values(square):
    p = OverlapPenaltyParams.for_grid(square)
    pen = OverlapPenalty(square, p)
    for s in np.linspace(0.1, 0.2, 7):
        y = squeezed(square, s).qp_values()
        assert pen.qp_value_and_grad(y)[0] == pytest.approx(
            OverlapPenalty(square, p).qp_value_and_grad(y)[0], rel=1e-13)
    assert pen.rebuilds < 7


def test_contact_set_matches_brute_force(square):
    p = OverlapPenaltyParams.for_grid(square)
    y = squeezed(square, 0.1)
    eps = 0.02
    cs = self_contact_set(y, eps, p.r_min)
    bN = square.boundary_samples("N")
    b = square.boundary_samples()
    xs = np.concatenate([square.qp_points, b.points])
    ys = np.concatenate([y.qp_values(), y.evaluate(b.points)])
    yb = y.evaluate(bN.points)
    want = [i for i in range(len(bN))
            if np.any((np.linalg.norm(xs - bN.points[i], axis=1) >= p.r_min)
                      & (np.linalg.norm(ys - yb[i], axis=1) <= eps))]
    assert cs.index.tolist() == want
    assert np.all(cs.gap <= eps)


def test_separated_map_has_empty_contact_set(square):
    # mild bending: minimum admissible deformed distance is far above 2 eps
    y = interpolate_map(square, lambda x: np.column_stack([x[:, 0], x[:, 1] + 0.1 * x[:, 0] ** 2]))
    p = OverlapPenaltyParams.for_grid(square)
    assert len(self_contact_set(y, p.eps_contact, p.r_min)) == 0
    assert overlap_penalty(y, p)[0] == 0.0


def test_deformed_normal(square):
    A = np.array([[2.0, 0.5], [0.0, 1.0]])
    y = affine_field(square, A)
    n = deformed_normal(y, np.array([[1.0, 0.5]]), np.array([[1.0, 0.0]]))
    want = np.linalg.inv(A).T @ [1.0, 0.0]
    np.testing.assert_allclose(n[0], want / np.linalg.norm(want))


def test_params(square):
    p = OverlapPenaltyParams.for_grid(square)
    assert p.delta == pytest.approx(square.cell_diagonal / 4)
    assert p.eps_contact == pytest.approx(p.delta / 2)
    assert p.h_pix == pytest.approx(square.hx / 8)
    with pytest.raises(ValueError):
        OverlapPenaltyParams.for_grid(square, r_min=1e-3).validate_for(square)
    with pytest.raises(ValueError):
        OverlapPenaltyParams(delta=-1.0, r_min=1.0, h_pix=0.1)


def test_pressed_flaps_contact_set_is_symmetric():
    # two flaps of a U-shaped body bent towards each other until the inner faces touch
    g = ReferenceGrid((0.0, 1.0), (0.0, 1.0), 16, 16, holes=((6, 10, 4, 16),))
    p = OverlapPenaltyParams.for_grid(g)

    def m(x):
        s = np.clip((x[:, 1] - 0.25) / 0.75, 0.0, None) ** 2
        u = 0.125 * s * np.sign(0.5 - x[:, 0])
        return np.column_stack([x[:, 0] + u, x[:, 1]])

    y = interpolate_map(g, m)
    cs = self_contact_set(y, p.eps_contact, p.r_min)
    bN = g.boundary_samples("N")
    pts = bN.points[cs.index]
    assert len(cs) > 0
    # both inner faces near the tips are in the set
    assert np.any(np.isclose(pts[:, 0], 6 / 16)) and np.any(np.isclose(pts[:, 0], 10 / 16))
    mirrored = np.column_stack([1.0 - pts[:, 0], pts[:, 1]])
    key = {tuple(np.round(q, 9)) for q in pts}
    assert all(tuple(np.round(q, 9)) in key for q in mirrored)
