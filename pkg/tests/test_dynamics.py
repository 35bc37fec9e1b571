import numpy as np
import pytest

from exitlim.dynamics import (
    DriftFieldModel,
    eval_drift,
    eval_jacobian,
    flow_to_exit,
    fundamental_matrix_Y,
    variational_matrix,
)
from exitlim.errors import NoExitError
from exitlim.geometry import Box, HalfSpace


@pytest.fixture
def halfplane():
    return HalfSpace(2, 0, 0.0, 1)


def quad_field():
    return DriftFieldModel.poly3(2, [(0, 1.0, (0, 0)), (0, 0.2, (0, 2)), (1, 0.3, (1, 0))])


def test_constant_eval():
    b = DriftFieldModel.constant([1.0, 0.5])
    for x in ([0.0, 0.0], [3.0, -2.0]):
        assert np.allclose(eval_drift(b, x), [1.0, 0.5])


def test_affine_zero_matrix():
    b = DriftFieldModel.affine([0.0, 0.0], np.zeros((2, 2)))
    assert np.allclose(b([1.0, 2.0]), [0.0, 0.0])


def test_poly_eval_and_jacobian():
    b = quad_field()
    assert np.allclose(b([1.0, 1.0]), [1.2, 0.3])
    assert np.allclose(eval_jacobian(b, [1.0, 1.0]), [[0.0, 0.4], [0.3, 0.0]])


def test_constant_jacobian_zero():
    b = DriftFieldModel.constant([1.0, 0.5])
    assert np.allclose(b.jacobian([2.0, 3.0]), np.zeros((2, 2)))


def test_affine_jacobian_is_matrix():
    M = np.array([[0.1, -0.2], [0.4, 0.3]])
    b = DriftFieldModel.affine([1.0, 2.0], M)
    assert np.allclose(b.jacobian([5.0, -1.0]), M)


def test_jacobian_matches_finite_differences():
    b = quad_field()
    rng = np.random.default_rng(0)
    step = 1e-5
    for _ in range(100):
        x = rng.uniform(-2, 2, size=2)
        J = b.jacobian(x)
        fd = np.empty((2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = step
            fd[:, k] = (b(x + e) - b(x - e)) / (2 * step)
        assert np.max(np.abs(fd - J)) <= 1e-6


def test_nonfinite_coefficients_rejected():
    with pytest.raises(ValueError):
        DriftFieldModel.constant([np.inf, 0.0])


def test_with_constant_offset():
    b = quad_field()
    shifted = b.with_constant_offset([-2.0, 0.5])
    x = np.array([0.7, -0.3])
    assert np.allclose(shifted(x), b(x) + [-2.0, 0.5])


def test_flow_straight_line_exit(halfplane):
    field = DriftFieldModel.constant([-1.0, 0.5])
    traj = flow_to_exit(field, [1.0, 0.0], halfplane, 0.01, 5.0)
    assert traj.exit_time == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(traj.exit_point, [0.0, 0.5], atol=1e-10)
    assert traj.face == halfplane.gamma_face


def test_flow_no_exit_drift_away(halfplane):
    field = DriftFieldModel.constant([1.0, 0.0])
    with pytest.raises(NoExitError):
        flow_to_exit(field, [1.0, 0.0], halfplane, 0.01, 5.0)


def test_flow_no_exit_attractor():
    box = Box((-1.0, -1.0), (1.0, 1.0))
    field = DriftFieldModel.affine([0.0, 0.0], -np.eye(2))
    with pytest.raises(NoExitError):
        flow_to_exit(field, [0.5, 0.0], box, 0.01, 20.0)


def test_flow_order_four_convergence(halfplane):
    # Curved flow with a smooth exit; steps large enough that the O(dt^4)
    # integrator error dominates roundoff.
    field = DriftFieldModel.affine([-1.0, 0.2], np.array([[0.0, 0.3], [-0.3, 0.0]]))
    ref = flow_to_exit(field, [1.0, 0.3], halfplane, 1e-3, 5.0)
    errs = []
    for dt in (8e-2, 4e-2, 2e-2):
        tr = flow_to_exit(field, [1.0, 0.3], halfplane, dt, 5.0)
        errs.append(abs(tr.exit_time - ref.exit_time) + np.linalg.norm(tr.exit_point - ref.exit_point))
    # order 4: halving the step cuts the error by about 16; allow slack
    assert errs[0] / max(errs[1], 1e-15) >= 8.0
    assert errs[1] / max(errs[2], 1e-15) >= 8.0


def test_variational_constant_field_identity(halfplane):
    field = DriftFieldModel.constant([-1.0, 0.5])
    traj = flow_to_exit(field, [1.0, 0.0], halfplane, 0.01, 5.0)
    phi = variational_matrix(field.jacobian, traj)
    assert np.allclose(phi.matrices[0], np.eye(2))
    assert np.allclose(phi.at_end(), np.eye(2), atol=1e-14)


def test_variational_diagonal_closed_form(halfplane):
    # dx/dt = (-1, 0) + diag(a, d) x has Phi(t) = diag(e^{at}, e^{dt})
    a, d = 0.4, -0.7
    field = DriftFieldModel.affine([-1.0, 0.0], np.diag([a, d]))
    traj = flow_to_exit(field, [0.5, 0.2], halfplane, 1e-3, 5.0)
    phi = variational_matrix(field.jacobian, traj)
    T = traj.exit_time
    assert np.allclose(phi.at_end(), np.diag([np.exp(a * T), np.exp(d * T)]), atol=1e-10)


def test_variational_matches_endpoint_finite_differences():
    # Phi(T) vs central differences of the fixed-time endpoint map, with T
    # safely before the exit time (~1.05) of every perturbed start.
    field = DriftFieldModel.poly3(
        2, [(0, -1.0, (0, 0)), (0, 0.2, (0, 2)), (1, 0.3, (1, 0)), (1, 0.1, (0, 0))]
    )
    wall = HalfSpace(2, 0, 0.0, 1)
    x0 = np.array([1.0, 0.3])
    dt, T = 1e-3, 0.8
    i_T = int(round(T / dt))

    def endpoint(x):
        tr = flow_to_exit(field, x, wall, dt, 20.0)
        return tr.states[i_T]

    traj = flow_to_exit(field, x0, wall, dt, 20.0)
    cut = type(traj)(
        traj.times[: i_T + 1], traj.states[: i_T + 1], traj.velocities[: i_T + 1],
        float(traj.times[i_T]), traj.states[i_T], traj.velocities[i_T], traj.face,
    )
    phi = variational_matrix(field.jacobian, cut)
    step = 1e-6
    fd = np.empty((2, 2))
    for k in range(2):
        e = np.zeros(2)
        e[k] = step
        fd[:, k] = (endpoint(x0 + e) - endpoint(x0 - e)) / (2 * step)
    assert np.max(np.abs(fd - phi.at_end())) <= 1e-4


def test_fundamental_Y_zero_jacobian(halfplane):
    field = DriftFieldModel.constant([-1.0, 0.0])
    traj = flow_to_exit(field, [0.5, 0.0], halfplane, 0.01, 5.0)
    Y = fundamental_matrix_Y(field.jacobian, traj)
    assert np.allclose(Y.matrices[0], np.eye(2))
    assert np.allclose(Y.at_end(), np.eye(2), atol=1e-14)


def test_fundamental_Y_diagonal_closed_form(halfplane):
    a, d = 0.5, -0.3
    field = DriftFieldModel.affine([-1.0, 0.0], np.diag([a, d]))
    traj = flow_to_exit(field, [0.5, 0.2], halfplane, 1e-3, 5.0)
    Y = fundamental_matrix_Y(field.jacobian, traj)
    T = traj.exit_time
    assert np.allclose(Y.at_end(), np.diag([np.exp(-a * T), np.exp(-d * T)]), atol=1e-10)
    # literal dual form for commuting (constant diagonal) coefficients
    phi = variational_matrix(field.jacobian, traj)
    assert np.allclose(Y.at_end() @ phi.at_end().T, np.eye(2), atol=1e-8)


def test_fundamental_Y_duality():
    # Exact invariant for arbitrary coefficients: Y(t) U(t) = I where
    # U' = Db^T U (the transpose-system propagator).
    field = DriftFieldModel.poly3(
        2, [(0, -1.0, (0, 0)), (0, 0.3, (0, 1)), (1, 0.4, (1, 0)), (1, -0.2, (0, 0))]
    )
    traj = flow_to_exit(field, [1.0, 0.2], HalfSpace(2, 0, 0.0, 1), 1e-3, 10.0)
    Y = fundamental_matrix_Y(field.jacobian, traj)
    U = variational_matrix(lambda x: field.jacobian(x).T, traj)
    for i in range(0, len(Y.times), 100):
        assert np.allclose(Y.matrices[i] @ U.matrices[i], np.eye(2), atol=1e-8)


def test_trajectory_samples_interior(halfplane):
    field = DriftFieldModel.constant([-1.0, 0.5])
    traj = flow_to_exit(field, [1.0, 0.0], halfplane, 0.01, 5.0)
    assert np.all(traj.states[:, 0] > 0)
    assert abs(traj.exit_point[0]) <= 1e-12
