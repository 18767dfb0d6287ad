import numpy as np
import pytest

from visco.ciarlet_necas import OverlapPenaltyParams
from visco.config import GridSettings, RunConfig, TimeSettings
from visco.diagnostics import penalty_pairing, residual_vector, weak_residual
from visco.errors import BarrierError, DomainError
from visco.grid import DeformationField, ReferenceGrid, affine_field, identity_field
from visco.loads import LoadSpec
from visco.materials import MaterialModel
from visco.stepper import (LEDGER_HEADER, SolverOptions, StepProblem, _strong_wolfe,
                           incremental_functional, interpolants, minimize_step, read_frame, run,
                           write_frame)

M = MaterialModel()


@pytest.fixture(scope="module")
def grid():
    return ReferenceGrid((0.0, 1.0), (0.0, 1.0), 8, 8, dirichlet=("bottom",))


def problem(grid, f=(0.5, 0.0), tau=0.1, kappa=None, y_prev=None):
    params = OverlapPenaltyParams.for_grid(grid)
    y_prev = identity_field(grid) if y_prev is None else y_prev
    f_qp = np.broadcast_to(np.asarray(f, dtype=float), (grid.n_qp, 2)).copy()
    return StepProblem(grid, M, params, tau, y_prev, f_qp, kappa=kappa)


def test_gradient_by_differences(grid, rng):
    pb = problem(grid)
    c = identity_field(grid).coeffs + 0.02 * rng.normal(size=(grid.n_basis, 2)) * grid.free[:, None]
    v, g = incremental_functional(DeformationField(grid, c), pb)
    assert np.all(g[grid.pinned] == 0.0)
    d = rng.normal(size=c.shape) * grid.free[:, None]
    h = 1e-7
    fd = (pb.value(c + h * d) - pb.value(c - h * d)) / (2 * h)
    assert fd == pytest.approx(np.sum(g * d), rel=1e-6)
    assert v == pytest.approx(pb.value(c), rel=1e-14)


def test_terms_add_up(grid):
    pb = problem(grid)
    c = affine_field(grid, [[1.0, 0.1], [0.0, 1.0]]).coeffs
    t = pb.terms(c)
    assert pb.value(c) == pytest.approx(t["phi"] + t["hyper"] + t["dissipation"] + t["load"]
                                        + t["kappa"] * t["penalty"])
    assert t["dissipation"] > 0


def test_barrier(grid):
    pb = problem(grid)
    with pytest.raises(BarrierError):
        pb.value_and_grad(affine_field(grid, [[1.0, 0.0], [0.0, -1.0]]).coeffs)


def test_minimize_step_and_optimality(grid, rng):
    pb = problem(grid)
    res = minimize_step(pb)
    y_prev = pb.y_prev
    assert res.value <= res.value_prev
    assert res.grad_norm <= pb.options.tol_grad * max(1.0, abs(res.value_prev))
    # Dirichlet data kept exactly
    assert np.array_equal(res.field.coeffs[grid.pinned], y_prev.coeffs[grid.pinned])
    # weak residual + penalty pairing vanish for admissible test fields
    for _ in range(5):
        z = rng.normal(size=(grid.n_basis, 2)) * grid.free[:, None]
        r = weak_residual(res.field, y_prev, pb.tau, pb.f_qp, z, M)
        p = penalty_pairing(res.field, pb.params, res.kappa, z)
        assert abs(r + p) <= 10 * pb.options.tol_grad * np.abs(z).sum()
    np.testing.assert_allclose(residual_vector(res.field, y_prev, pb.tau, pb.f_qp, M)[grid.pinned], 0.0)


def test_relaxation_from_stretched_state(grid):
    y0 = affine_field(grid, [[1.0, 0.0], [0.0, 1.0]])
    c = y0.coeffs.copy()
    c[grid.free] *= 1.02
    pb = problem(grid, f=(0.0, 0.0), y_prev=DeformationField(grid, c))
    res = minimize_step(pb)
    assert res.value < res.value_prev


def test_strong_wolfe_on_quadratic():
    def fun(a):
        return (a - 3.0) ** 2, 2 * (a - 3.0), None
    a, f, _ = _strong_wolfe(fun, 9.0, -6.0, 1e-4, 0.9, 10)
    assert f < 9.0 and abs(2 * (a - 3.0)) <= 0.9 * 6.0


def test_strong_wolfe_barrier_halving():
    def fun(a):
        if a > 0.3:
            raise BarrierError("wall")
        return -a, -1.0, None
    a, f, _ = _strong_wolfe(fun, 0.0, -1.0, 1e-4, 0.9, 20)
    assert 0 < a <= 0.3 and f < 0


def small_config(**kw):
    base = RunConfig(grid=GridSettings(nx=6, ny=6), time=TimeSettings(T=0.3, tau=0.1),
                     load=LoadSpec(kind="uniform", gamma=1.0))
    return base.replace(**kw)


def test_run_ledger_and_frames(tmp_path):
    cfg = small_config()
    traj = run(cfg, out_dir=str(tmp_path))
    assert len(traj) == 4
    lines = (tmp_path / "ledger.csv").read_text().splitlines()
    assert lines[0] == ",".join(LEDGER_HEADER)
    assert len(lines) == 5
    k, t, fld = read_frame(str(tmp_path / "frame_0003.json"))
    assert (k, t) == (3, pytest.approx(0.3))
    assert np.array_equal(fld.coeffs, traj.coeffs[3])
    # work is positive for a load pulling along the motion
    assert all(r["work_increment"] > 0 for r in traj.ledger[1:])
    for a, b in zip(traj.extra[1:], traj.ledger[1:]):
        assert a["value"] <= a["value_prev"]
        assert b["det_min"] > 0


def test_frame_round_trip(tmp_path, grid):
    y = affine_field(grid, [[1.1, 0.2], [0.0, 0.9]])
    write_frame(str(tmp_path / "f.json"), 7, 0.35, y)
    k, t, z = read_frame(str(tmp_path / "f.json"))
    assert (k, t) == (7, 0.35) and np.array_equal(z.coeffs, y.coeffs)


def test_interpolants():
    traj = run(small_config())
    yk, yp, aff = interpolants(traj, 0.15)
    assert np.array_equal(yk.coeffs, traj.coeffs[2]) and np.array_equal(yp.coeffs, traj.coeffs[1])
    np.testing.assert_allclose(aff.coeffs, 0.5 * (traj.coeffs[1] + traj.coeffs[2]))
    yk, yp, aff = interpolants(traj, 0.3)
    np.testing.assert_allclose(aff.coeffs, traj.coeffs[3])
    with pytest.raises(DomainError):
        interpolants(traj, 0.0)
    with pytest.raises(DomainError):
        interpolants(traj, 0.31)


def test_solver_options_violations():
    assert SolverOptions(tol_grad=-1).violations()
    assert not SolverOptions().violations()


def test_quasistatic_settling():
    # load ramped up to t = 0.3 and then frozen: the viscous creep dies out
    cfg = RunConfig(grid=GridSettings(nx=6, ny=6),
                    time=TimeSettings(T=3.0, tau=0.1),
                    load=LoadSpec(kind="uniform", gamma=2.0, t_ramp=0.3))
    traj = run(cfg)
    d = np.array([r["dissip_increment"] for r in traj.ledger[4:]])
    steps = np.array([np.abs(traj.coeffs[k] - traj.coeffs[k - 1]).max() for k in range(4, len(traj))])
    assert d[-1] < 1e-6 * d[0]
    assert steps[-1] < 1e-3 * steps[0]
    assert np.all(np.diff(steps[:10]) < 0)
