import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.interpolate import BSpline

from visco.errors import DomainError
from visco.grid import (DeformationField, ReferenceGrid, affine_field, identity_field,
                        interpolate_map)


def scipy_field(grid, coeffs, pts):
    """Independent tensor-product evaluation with scipy's de Boor splines."""
    k = grid.k
    out = np.zeros((len(pts), 2))
    Bx = BSpline.design_matrix(pts[:, 0], grid.knots_x, k).toarray()
    By = BSpline.design_matrix(pts[:, 1], grid.knots_y, k).toarray()
    C = coeffs.reshape(grid.nbx, grid.nby, 2)
    for a in range(2):
        out[:, a] = np.einsum("pi,ij,pj->p", Bx, C[:, :, a], By)
    return out


def test_values_match_scipy(rng):
    g = ReferenceGrid((0.0, 2.0), (-1.0, 0.5), 7, 5)
    c = rng.normal(size=(g.n_basis, 2))
    pts = np.column_stack([rng.uniform(0, 2, 200), rng.uniform(-1, 0.5, 200)])
    np.testing.assert_allclose(DeformationField(g, c).evaluate(pts), scipy_field(g, c, pts),
                               atol=1e-12)


def test_derivatives_match_scipy(rng):
    g = ReferenceGrid((0.0, 1.0), (0.0, 1.0), 6, 4)
    c = rng.normal(size=(g.n_basis, 2))
    pts = np.column_stack([rng.uniform(0.01, 0.99, 50), rng.uniform(0.01, 0.99, 50)])
    _, F, G = DeformationField(g, c).derivatives_at(pts)
    C = c.reshape(g.nbx, g.nby, 2)
    for a in range(2):
        for (dx, dy), ref in (((1, 0), F[:, a, 0]), ((0, 1), F[:, a, 1]), ((2, 0), G[:, a, 0, 0]),
                              ((1, 1), G[:, a, 0, 1]), ((0, 2), G[:, a, 1, 1])):
            vals = np.empty(len(pts))
            for p, (x, y) in enumerate(pts):
                bx = np.array([BSpline(g.knots_x, np.eye(g.nbx)[i], g.k)(x, nu=dx) for i in range(g.nbx)])
                by = np.array([BSpline(g.knots_y, np.eye(g.nby)[j], g.k)(y, nu=dy) for j in range(g.nby)])
                vals[p] = bx @ C[:, :, a] @ by
            np.testing.assert_allclose(ref, vals, atol=1e-9)
    np.testing.assert_allclose(G[:, :, 0, 1], G[:, :, 1, 0])


def test_identity_is_exact():
    g = ReferenceGrid((0.0, 1.0), (0.0, 1.0), 5, 5)
    y = identity_field(g)
    np.testing.assert_allclose(y.qp_values(), g.qp_points, atol=1e-14)
    np.testing.assert_allclose(y.qp_gradients(), np.broadcast_to(np.eye(2), (g.n_qp, 2, 2)), atol=1e-13)
    np.testing.assert_allclose(y.qp_hessians(), 0.0, atol=1e-11)


@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6))
def test_affine_reproduction(vals):
    g = ReferenceGrid((0.0, 1.0), (0.0, 1.0), 4, 3)
    A = np.array(vals[:4]).reshape(2, 2)
    b = np.array(vals[4:])
    y = affine_field(g, A, b)
    np.testing.assert_allclose(y.qp_values(), g.qp_points @ A.T + b, atol=1e-11)
    np.testing.assert_allclose(y.qp_gradients(), np.broadcast_to(A, (g.n_qp, 2, 2)), atol=1e-10)


@given(st.floats(0, 1), st.floats(0, 1))
def test_partition_of_unity(x, y):
    g = ReferenceGrid((0.0, 1.0), (0.0, 1.0), 5, 4)
    B = g.basis_matrices(np.array([[x, y]]), nder=0)["0"]
    assert abs(B.sum() - 1.0) < 1e-12
    assert B.min() >= -1e-15


def test_interpolation_reproduces_cubics():
    g = ReferenceGrid((0.0, 1.0), (0.0, 1.0), 6, 6)

    def m(x):
        return np.column_stack([x[:, 0] ** 3 - x[:, 1], x[:, 0] * x[:, 1] ** 2])
    y = interpolate_map(g, m)
    np.testing.assert_allclose(y.qp_values(), m(g.qp_points), atol=1e-12)


def test_holes_and_boundary():
    g = ReferenceGrid((0.0, 1.0), (0.0, 1.0), 8, 8, dirichlet=("bottom",), holes=((2, 6, 3, 8),))
    assert g.active_cells.sum() == 64 - 20
    assert g.area == pytest.approx(44 / 64)
    b = g.boundary_samples()
    # perimeter of a U shape: outer box minus the hole mouth plus the hole walls
    perimeter = 4.0 - 4 / 8 + 2 * 5 / 8 + 4 / 8
    assert b.weights.sum() == pytest.approx(perimeter)
    d = g.boundary_samples("D")
    assert np.allclose(d.points[:, 1], 0.0) and d.weights.sum() == pytest.approx(1.0)
    with pytest.raises(DomainError):
        g.locate([[0.5, 0.9]])
    with pytest.raises(DomainError):
        g.locate([[1.5, 0.5]])
    # a point on the hole wall belongs to the closure
    g.locate([[2 / 8, 0.9]])


def test_pinned_identity_on_dirichlet(rng):
    g = ReferenceGrid((0.0, 1.0), (0.0, 1.0), 6, 6, dirichlet=("left",))
    c = identity_field(g).coeffs.copy()
    c[g.free] += rng.normal(size=(g.free.sum(), 2))
    y = DeformationField(g, c)
    pts = g.boundary_samples("D").points
    np.testing.assert_allclose(y.evaluate(pts), pts, atol=1e-13)


def test_description_round_trip():
    g = ReferenceGrid((0.0, 2.0), (0.0, 1.0), 8, 4, dirichlet=("left", (1.0, 0.0, 2.0, 0.0)),
                      holes=((0, 2, 1, 3),))
    g2 = ReferenceGrid.from_description(g.describe())
    assert g2.describe() == g.describe()
    y = identity_field(g)
    assert np.array_equal(DeformationField.from_dict(y.to_dict()).coeffs, y.coeffs)


def test_bad_grids():
    with pytest.raises(ValueError):
        ReferenceGrid(degree=2)
    with pytest.raises(ValueError):
        ReferenceGrid(nx=2, ny=2, holes=((0, 2, 0, 2),))
    g = ReferenceGrid()
    with pytest.raises(ValueError):
        DeformationField(g, np.zeros((3, 2)))
