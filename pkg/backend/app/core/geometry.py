"""
SE(2) pose algebra shared by every other module.

World frame is x-east, y-north, theta counterclockwise from the x-axis.
Angles are radians, normalized to (-pi, pi] on construction.
"""
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

Point = Tuple[float, float]

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(float(theta), TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised `normalize_angle`."""
    wrapped = np.remainder(np.asarray(theta, dtype=float) + math.pi, TWO_PI) - math.pi
    return np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Transform2D:
    """Rigid planar motion: rotate by dtheta, then translate by (dx, dy)."""

    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dx", float(self.dx))
        object.__setattr__(self, "dy", float(self.dy))
        object.__setattr__(self, "dtheta", normalize_angle(self.dtheta))

    @classmethod
    def identity(cls) -> "Transform2D":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, translation: np.ndarray) -> "Transform2D":
        theta = math.atan2(rotation[1, 0], rotation[0, 0])
        return cls(float(translation[0]), float(translation[1]), theta)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])

    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.dtheta)

    def inverse(self) -> "Transform2D":
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        return Transform2D(-(c * self.dx + s * self.dy), s * self.dx - c * self.dy, -self.dtheta)

    def then(self, other: "Transform2D") -> "Transform2D":
        """Composition self * other (other expressed in self's frame)."""
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        return Transform2D(
            self.dx + c * other.dx - s * other.dy,
            self.dy + s * other.dx + c * other.dy,
            self.dtheta + other.dtheta,
        )

    def translation_norm(self) -> float:
        return math.hypot(self.dx, self.dy)


@dataclass(frozen=True)
class Pose2D:
    """Robot pose in the world frame."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Pose2D":
        return cls(float(values[0]), float(values[1]), float(values[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_transform(self) -> Transform2D:
        return Transform2D(self.x, self.y, self.theta)

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(other.x - self.x, other.y - self.y)


def compose(a: Pose2D, b: Transform2D) -> Pose2D:
    """Return a ⊕ b, with b expressed in a's frame."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2D(a.x + c * b.dx - s * b.dy, a.y + s * b.dx + c * b.dy, a.theta + b.dtheta)


def relative(a: Pose2D, b: Pose2D) -> Transform2D:
    """Pose of b expressed in a's frame, i.e. a^{-1} b."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    wx, wy = b.x - a.x, b.y - a.y
    return Transform2D(c * wx + s * wy, -s * wx + c * wy, b.theta - a.theta)


def apply(t: Transform2D, p: Point) -> Point:
    """Rotate a point by t.dtheta, then translate by (t.dx, t.dy)."""
    c, s = math.cos(t.dtheta), math.sin(t.dtheta)
    return (c * p[0] - s * p[1] + t.dx, s * p[0] + c * p[1] + t.dy)


def transform_points(t: Transform2D, points: np.ndarray) -> np.ndarray:
    """Vectorised `apply` over an (N, 2) array."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    return points @ t.rotation().T + np.array([t.dx, t.dy])


def rigid_fit(source: np.ndarray, target: np.ndarray) -> Transform2D:
    """
    Least-squares rigid transform mapping `source` onto `target`.

    Centroid subtraction plus SVD of the 2x2 cross-covariance, with the
    determinant correction so the rotation is always proper. No scale.

    Args:
        source: (N, 2) points
        target: (N, 2) corresponding points

    Returns:
        Transform2D T minimising sum ||T(source_i) - target_i||^2
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape or source.ndim != 2 or source.shape[1] != 2:
        raise ValueError(f"rigid_fit expects matching (N, 2) arrays, got {source.shape} and {target.shape}")

    centroid_s = source.mean(axis=0)
    centroid_t = target.mean(axis=0)
    h = (source - centroid_s).T @ (target - centroid_t)
    u, _, vt = np.linalg.svd(h)
    d = 1.0 if np.linalg.det(vt.T @ u.T) >= 0.0 else -1.0
    rotation = vt.T @ np.diag([1.0, d]) @ u.T
    translation = centroid_t - rotation @ centroid_s
    return Transform2D.from_matrix(rotation, translation)


def interpolate_pose(times: np.ndarray, poses: Sequence[Pose2D], t: float) -> Pose2D:
    """
    Pose at time t by linear interpolation of position and shortest-arc
    interpolation of heading. Times outside the range are clamped.
    """
    times = np.asarray(times, dtype=float)
    if len(times) == 0:
        raise ValueError("Cannot interpolate an empty pose sequence")
    if t <= times[0]:
        return poses[0]
    if t >= times[-1]:
        return poses[-1]
    k = int(np.searchsorted(times, t, side="right")) - 1
    t0, t1 = times[k], times[k + 1]
    alpha = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
    a, b = poses[k], poses[k + 1]
    dtheta = normalize_angle(b.theta - a.theta)
    return Pose2D(a.x + alpha * (b.x - a.x), a.y + alpha * (b.y - a.y), a.theta + alpha * dtheta)


def path_length(poses: Sequence[Pose2D]) -> np.ndarray:
    """Cumulative travelled distance along a pose sequence, starting at 0."""
    if len(poses) == 0:
        return np.zeros(0)
    xy = np.array([[p.x, p.y] for p in poses])
    steps = np.hypot(np.diff(xy[:, 0]), np.diff(xy[:, 1]))
    return np.concatenate([[0.0], np.cumsum(steps)])
