import numpy as np
import pytest

from exitlim.dynamics import DriftFieldModel, flow_to_exit
from exitlim.errors import NonFiniteError
from exitlim.geometry import HalfSpace, on_boundary
from exitlim.sde_sim import SimConfig, make_stream, simulate_batch, simulate_exit


@pytest.fixture
def halfplane():
    return HalfSpace(2, 0, 0.0, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(eps=-0.1, dt=1e-3, t_max=1.0)
    with pytest.raises(ValueError):
        SimConfig(eps=0.1, dt=0.0, t_max=1.0)
    with pytest.raises(ValueError):
        SimConfig(eps=0.1, dt=1e-2, t_max=1e-3)


def test_deterministic_limit_matches_flow(halfplane):
    b = DriftFieldModel.constant([-1.0, 0.5])
    cfg = SimConfig(eps=0.0, dt=1e-3, t_max=5.0)
    s = simulate_exit(b, cfg, [1.0, 0.0], halfplane, make_stream(0, 0))
    assert s.tau == pytest.approx(1.0, abs=1e-3)
    assert np.allclose(s.exit_point, [0.0, 0.5], atol=1e-3)
    assert s.face == halfplane.gamma_face
    flow = flow_to_exit(b, [1.0, 0.0], halfplane, 1e-3, 5.0)
    assert s.tau == pytest.approx(flow.exit_time, abs=2e-3)


def test_deterministic_truncation(halfplane):
    b = DriftFieldModel.constant([1.0, 0.0])
    cfg = SimConfig(eps=0.0, dt=1e-3, t_max=2.0)
    s = simulate_exit(b, cfg, [1.0, 0.0], halfplane, make_stream(0, 0))
    assert s.truncated and s.tau is None and s.exit_point is None


def test_stream_determinism():
    a = make_stream(42, 0).normals(1000)
    b = make_stream(42, 0).normals(1000)
    assert np.array_equal(a, b)


def test_stream_independence():
    n = 100_000
    a = make_stream(42, 0).normals(n)
    b = make_stream(42, 1).normals(n)
    corr = float(np.mean(a * b) - a.mean() * b.mean())
    assert abs(corr) <= 4.0 / np.sqrt(n)


def test_stream_moments():
    n = 1_000_000
    x = make_stream(42, 7).normals(n)
    # SE(mean) = 1/sqrt(n); SE(variance) = sqrt(2/n) under normality
    assert abs(x.mean()) <= 5.0 / np.sqrt(n)
    assert abs(x.var() - 1.0) <= 5.0 * np.sqrt(2.0 / n)


def test_hitting_time_statistics(halfplane):
    # 1-d hitting of a drifted path: tau ~ IG(mean 0.1, shape L^2/eps^2); the
    # mean is 0.1 and Var((tau - 0.1)/eps) = 0.1. Step chosen so the known
    # O(sqrt(dt)) crossing bias stays inside the statistical band.
    b = DriftFieldModel.constant([-1.0, 0.0])
    eps = 0.05
    cfg = SimConfig(eps=eps, dt=2.5e-5, t_max=2.0)
    batch = simulate_batch(b, cfg, [0.1, 0.0], halfplane, 123, 20_000)
    taus = np.array([s.tau for s in batch if not s.truncated])
    assert taus.size == len(batch)
    se_mean = taus.std(ddof=1) / np.sqrt(taus.size)
    assert abs(taus.mean() - 0.1) <= 4 * se_mean
    u = (taus - 0.1) / eps
    var_u = u.var(ddof=1)
    m4 = np.mean((u - u.mean()) ** 4)
    se_var = np.sqrt((m4 - var_u**2) / u.size)
    assert abs(var_u - 0.1) <= 4 * se_var


def test_exit_points_on_boundary(halfplane):
    b = DriftFieldModel.constant([-1.0, 0.5])
    cfg = SimConfig(eps=0.3, dt=1e-3, t_max=10.0)
    batch = simulate_batch(b, cfg, [0.5, 0.0], halfplane, 7, 200)
    for s in batch:
        if s.truncated:
            assert s.tau is None
        else:
            assert on_boundary(halfplane, s.exit_point, tol=1e-12)


def test_kernel_and_python_paths_agree(halfplane):
    b = DriftFieldModel.constant([-1.0, 0.5])

    class PyDrift:
        def __call__(self, x):
            return np.array([-1.0, 0.5])

    cfg = SimConfig(eps=0.1, dt=1e-4, t_max=3.0)
    for trial in range(5):
        sk = simulate_exit(b, cfg, [0.2, 0.0], halfplane, make_stream(9, trial))
        sp = simulate_exit(PyDrift(), cfg, [0.2, 0.0], halfplane, make_stream(9, trial))
        assert sk.tau == sp.tau
        assert np.array_equal(sk.exit_point, sp.exit_point)
        assert sk.steps == sp.steps


def test_batch_worker_invariance(halfplane):
    b = DriftFieldModel.constant([-1.0, 0.5])
    cfg = SimConfig(eps=0.2, dt=1e-3, t_max=5.0)
    one = simulate_batch(b, cfg, [0.3, 0.0], halfplane, 21, 64, workers=1)
    four = simulate_batch(b, cfg, [0.3, 0.0], halfplane, 21, 64, workers=4)
    assert [s.tau for s in one] == [s.tau for s in four]


def test_dt_refinement_trend(halfplane):
    # First-order scheme: the mean exit time moves less when the step halves.
    b = DriftFieldModel.constant([-1.0, 0.0])
    x0, n = [0.1, 0.0], 40_000
    means = {}
    for dt in (4e-4, 2e-4, 1e-4):
        cfg = SimConfig(eps=0.05, dt=dt, t_max=2.0)
        batch = simulate_batch(b, cfg, x0, halfplane, 5, n)
        taus = np.array([s.tau for s in batch])
        means[dt] = (taus.mean(), taus.std(ddof=1) / np.sqrt(n))
    d1 = abs(means[4e-4][0] - means[2e-4][0])
    d2 = abs(means[2e-4][0] - means[1e-4][0])
    noise = 2 * (means[4e-4][1] + means[1e-4][1])
    assert d2 <= d1 + noise


def test_nonfinite_guard(halfplane):
    # Strong repelling cubic drift blows up away from the origin.
    b = DriftFieldModel.poly3(2, [(0, 1e4, (3, 0))])
    cfg = SimConfig(eps=0.0, dt=1.0, t_max=200.0)
    with pytest.raises(NonFiniteError):
        simulate_exit(b, cfg, [2.0, 0.0], halfplane, make_stream(0, 0))


def test_snapshot_semantics(halfplane):
    b = DriftFieldModel.constant([-1.0, 0.0])
    cfg = SimConfig(eps=0.0, dt=1e-3, t_max=2.0)
    s = simulate_exit(b, cfg, [0.5, 0.2], halfplane, make_stream(0, 0), snap_time=0.1)
    assert np.allclose(s.snapshot, [0.4, 0.2], atol=1e-9)
    # snapshot after the exit time reports the stopped state
    s2 = simulate_exit(b, cfg, [0.5, 0.2], halfplane, make_stream(0, 0), snap_time=1.5)
    assert np.allclose(s2.snapshot, s2.exit_point)
