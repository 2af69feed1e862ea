import math

import numpy as np
import pytest
import hypothesis.strategies as st
from hypothesis import given

from app.core.geometry import (
    Pose2D,
    Transform2D,
    apply,
    compose,
    interpolate_pose,
    normalize_angle,
    path_length,
    relative,
    rigid_fit,
    transform_points,
)

coords = st.floats(min_value=-100, max_value=100, allow_nan=False)
angles = st.floats(min_value=-10, max_value=10, allow_nan=False)


def assert_pose(pose, expected, tol=1e-12):
    assert pose.x == pytest.approx(expected[0], abs=tol)
    assert pose.y == pytest.approx(expected[1], abs=tol)
    assert abs(normalize_angle(pose.theta - expected[2])) <= tol


def test_normalize_angle_range():
    assert normalize_angle(math.pi) == pytest.approx(math.pi)
    assert normalize_angle(-math.pi) == pytest.approx(math.pi)
    assert normalize_angle(3 * math.pi) == pytest.approx(math.pi)
    assert normalize_angle(0.5) == 0.5


@pytest.mark.parametrize("pose, step, expected", [
    ((0, 0, 0), (1, 0, 0), (1, 0, 0)),
    ((0, 0, math.pi / 2), (1, 0, 0), (0, 1, math.pi / 2)),
    ((2, 1, math.pi / 4), (math.sqrt(2), 0, math.pi / 4), (3, 2, math.pi / 2)),
])
def test_compose(pose, step, expected):
    assert_pose(compose(Pose2D(*pose), Transform2D(*step)), expected)


@pytest.mark.parametrize("a, b, expected", [
    ((2, -1, 0.3), (2, -1, 0.3), (0, 0, 0)),
    ((0, 0, 0), (3, 4, 1), (3, 4, 1)),
    ((1, 1, math.pi / 2), (1, 2, math.pi / 2), (1, 0, 0)),
])
def test_relative(a, b, expected):
    t = relative(Pose2D(*a), Pose2D(*b))
    assert t.dx == pytest.approx(expected[0], abs=1e-12)
    assert t.dy == pytest.approx(expected[1], abs=1e-12)
    assert t.dtheta == pytest.approx(expected[2], abs=1e-12)


@pytest.mark.parametrize("t, point, expected", [
    ((0, 0, 0), (5, -2), (5, -2)),
    ((0, 0, math.pi), (1, 0), (-1, 0)),
    ((1, 1, math.pi / 2), (2, 0), (1, 3)),
])
def test_apply(t, point, expected):
    assert apply(Transform2D(*t), point) == pytest.approx(expected, abs=1e-12)


@given(coords, coords, angles, coords, coords, angles)
def test_compose_inverts_relative(ax, ay, at, bx, by, bt):
    a, b = Pose2D(ax, ay, at), Pose2D(bx, by, bt)
    assert_pose(compose(a, relative(a, b)), (b.x, b.y, b.theta), tol=1e-9)


@given(coords, coords, angles, coords, coords, angles, coords, coords, angles)
def test_compose_is_associative(ax, ay, at, bx, by, bt, cx, cy, ct):
    a, b, c = Pose2D(ax, ay, at), Transform2D(bx, by, bt), Transform2D(cx, cy, ct)
    stepwise = compose(compose(a, b), c)
    assert_pose(compose(a, b.then(c)), (stepwise.x, stepwise.y, stepwise.theta), tol=1e-9)


@given(coords, coords, angles)
def test_inverse_cancels(dx, dy, dtheta):
    t = Transform2D(dx, dy, dtheta)
    both = t.then(t.inverse())
    assert both.translation_norm() <= 1e-9
    assert abs(both.dtheta) <= 1e-12


@given(coords, coords, angles)
def test_transform_points_matches_apply(dx, dy, dtheta):
    t = Transform2D(dx, dy, dtheta)
    points = np.array([[1.0, 2.0], [-3.0, 0.5], [0.0, 0.0]])
    moved = transform_points(t, points)
    for p, q in zip(points, moved):
        assert q == pytest.approx(apply(t, p), abs=1e-9)


@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi + 1e-6, math.pi))
def test_rigid_fit_recovers_planted_transform(dx, dy, dtheta):
    rng = np.random.default_rng(7)
    source = rng.uniform(-10, 10, size=(30, 2))
    planted = Transform2D(dx, dy, dtheta)
    fitted = rigid_fit(source, transform_points(planted, source))
    assert fitted.dx == pytest.approx(dx, abs=1e-6)
    assert fitted.dy == pytest.approx(dy, abs=1e-6)
    assert abs(normalize_angle(fitted.dtheta - dtheta)) <= 1e-8


def test_rigid_fit_never_reflects():
    source = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    mirrored = source * np.array([1.0, -1.0])
    fitted = rigid_fit(source, mirrored)
    assert np.linalg.det(fitted.rotation()) == pytest.approx(1.0)


def test_rigid_fit_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        rigid_fit(np.zeros((3, 2)), np.zeros((4, 2)))


def test_interpolate_pose_takes_short_arc():
    times = np.array([0.0, 1.0])
    poses = [Pose2D(0, 0, 3.0), Pose2D(2, 0, -3.0)]
    mid = interpolate_pose(times, poses, 0.5)
    assert mid.x == pytest.approx(1.0)
    assert abs(mid.theta) == pytest.approx(math.pi, abs=1e-9)
    assert interpolate_pose(times, poses, -1.0) == poses[0]
    assert interpolate_pose(times, poses, 5.0) == poses[1]


def test_path_length():
    poses = [Pose2D(0, 0, 0), Pose2D(3, 4, 0), Pose2D(3, 4, 1.0), Pose2D(3, 5, 0)]
    assert path_length(poses).tolist() == [0.0, 5.0, 5.0, 6.0]
    assert len(path_length([])) == 0
