import numpy as np
import pytest

from exitlim.geometry import (
    Box,
    HalfSpace,
    boundary_crossing,
    contains,
    gamma_frame,
    on_boundary,
)


@pytest.fixture
def halfplane():
    return HalfSpace(2, axis=0, level=0.0, side=1)


@pytest.fixture
def unit_box():
    return Box((0.0, 0.0), (1.0, 1.0), gamma_axis=0, gamma_side="lo")


def test_contains_halfspace_interior(halfplane):
    assert contains(halfplane, [0.5, 2.0])


def test_contains_halfspace_boundary_excluded(halfplane):
    assert not contains(halfplane, [0.0, 2.0])


def test_contains_box(unit_box):
    assert contains(unit_box, [0.5, 0.5])
    assert not contains(unit_box, [1.0, 0.5])


def test_contains_dimension_mismatch(halfplane):
    with pytest.raises(ValueError):
        contains(halfplane, [0.1, 0.2, 0.3])


def test_box_corner_validation():
    with pytest.raises(ValueError):
        Box((0.0, 1.0), (1.0, 0.5))


def test_crossing_halfspace_interpolation(halfplane):
    c = boundary_crossing(halfplane, [0.2, 0.0], [-0.2, 1.0])
    assert c.theta == pytest.approx(0.5, abs=1e-15)
    assert np.allclose(c.point, [0.0, 0.5], atol=1e-15)
    assert c.face == halfplane.gamma_face


def test_crossing_stays_interior(unit_box):
    assert boundary_crossing(unit_box, [0.5, 0.5], [0.6, 0.4]) is None


def test_crossing_non_gamma_face(unit_box):
    c = boundary_crossing(unit_box, [0.1, 0.99], [0.05, 1.02])
    assert c.face == "1hi"
    assert c.point[1] == 1.0


def test_crossing_requires_interior_start(unit_box):
    with pytest.raises(ValueError):
        boundary_crossing(unit_box, [0.0, 0.5], [0.5, 0.5])


def test_crossing_endpoint_on_boundary_counts(halfplane):
    c = boundary_crossing(halfplane, [0.3, 0.0], [0.0, 0.0])
    assert c is not None and c.theta == pytest.approx(1.0)


def test_crossing_minimality(unit_box):
    rng = np.random.default_rng(5)
    for _ in range(200):
        x0 = rng.uniform(0.05, 0.95, size=2)
        x1 = x0 + rng.normal(scale=1.0, size=2)
        c = boundary_crossing(unit_box, x0, x1)
        if c is None:
            assert contains(unit_box, x1) or np.allclose(x0, x1)
            continue
        for delta in (1e-3, 1e-6, 1e-9):
            inside = x0 + (c.theta - delta) * (x1 - x0)
            if c.theta > delta:
                assert contains(unit_box, inside)


def test_hit_point_on_boundary(unit_box):
    rng = np.random.default_rng(6)
    for _ in range(100):
        x0 = rng.uniform(0.05, 0.95, size=2)
        x1 = x0 + rng.normal(scale=1.5, size=2)
        c = boundary_crossing(unit_box, x0, x1)
        if c is None:
            continue
        assert not contains(unit_box, c.point)
        assert on_boundary(unit_box, c.point, tol=1e-12)


def test_corner_hit_assigned_to_non_gamma(unit_box):
    # Segment aimed exactly at the (0, 0) corner.
    c = boundary_crossing(unit_box, [0.2, 0.2], [-0.2, -0.2])
    assert c.face != unit_box.gamma_face
    assert np.allclose(c.point, [0.0, 0.0], atol=1e-12)


def test_gamma_frame_halfspace(halfplane):
    nu, basis = gamma_frame(halfplane, [0.0, 0.3])
    assert np.allclose(nu, [-1.0, 0.0])
    assert len(basis) == 1 and np.allclose(basis[0], [0.0, 1.0])


def test_gamma_frame_box_3d():
    box = Box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), gamma_axis=0, gamma_side="lo")
    nu, basis = gamma_frame(box, [0.0, 0.2, 0.7])
    assert np.allclose(nu, [-1.0, 0.0, 0.0])
    assert np.allclose(basis[0], [0.0, 1.0, 0.0])
    assert np.allclose(basis[1], [0.0, 0.0, 1.0])


def test_gamma_frame_rejects_off_face(halfplane):
    with pytest.raises(ValueError):
        gamma_frame(halfplane, [0.1, 0.3])


def test_gamma_frame_orthonormal():
    box = Box((0.0, -1.0, 2.0), (2.0, 3.0, 4.0), gamma_axis=1, gamma_side="hi")
    nu, basis = gamma_frame(box, [1.0, 3.0, 2.5])
    vecs = [nu] + basis
    for i, v in enumerate(vecs):
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-14
        for w in vecs[i + 1:]:
            assert abs(float(v @ w)) <= 1e-14


def test_halfspace_lower_side():
    hs = HalfSpace(2, axis=1, level=2.0, side=-1)  # interior below x2 = 2
    assert contains(hs, [0.0, 1.5])
    assert not contains(hs, [0.0, 2.5])
    nu, _ = gamma_frame(hs, [5.0, 2.0])
    assert np.allclose(nu, [0.0, 1.0])
