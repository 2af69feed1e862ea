"""
Odometry CSV and TUM trajectory readers and writers.
"""
import csv
import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from app.core.errors import InvalidInputError, LogParseError
from app.core.geometry import Pose2D

logger = logging.getLogger(__name__)

ODOMETRY_HEADER = "timestamp_s,x,y,theta"


def load_odometry(path: str) -> Tuple[np.ndarray, List[Pose2D]]:
    """
    Read `timestamp_s, x, y, theta` rows.

    A header row and `#` comment lines are skipped. Timestamps must be
    strictly increasing.
    """
    times: List[float] = []
    poses: List[Pose2D] = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            for line_no, row in enumerate(csv.reader(handle), start=1):
                if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                    continue
                if row[0].strip() == "timestamp_s":
                    continue
                if len(row) != 4:
                    raise LogParseError(path, line_no, f"expected 4 fields, got {len(row)}")
                try:
                    t, x, y, theta = (float(v) for v in row)
                except ValueError as exc:
                    raise LogParseError(path, line_no, str(exc)) from exc
                if not all(math.isfinite(v) for v in (t, x, y, theta)):
                    raise LogParseError(path, line_no, "non-finite value")
                if times and t <= times[-1]:
                    raise LogParseError(path, line_no, f"timestamp {t} does not increase")
                times.append(t)
                poses.append(Pose2D(x, y, theta))
    except OSError as exc:
        raise LogParseError(path, None, f"cannot read odometry: {exc}") from exc
    if not poses:
        raise LogParseError(path, None, "no odometry records")
    logger.info(f"Loaded {len(poses)} odometry poses from {path}")
    return np.array(times), poses


def write_odometry(path: str, times: Sequence[float], poses: Sequence[Pose2D]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(ODOMETRY_HEADER + "\n")
        for t, p in zip(times, poses):
            handle.write(f"{t:.3f},{p.x:.6f},{p.y:.6f},{p.theta:.9f}\n")


def write_tum(path: str, times: Sequence[float], poses: Sequence[Pose2D]) -> None:
    """`timestamp x y z qx qy qz qw` with a planar (yaw-only) quaternion."""
    if len(times) != len(poses):
        raise InvalidInputError(f"{len(times)} timestamps for {len(poses)} poses")
    with open(path, "w", encoding="utf-8") as handle:
        for t, p in zip(times, poses):
            half = 0.5 * p.theta
            handle.write(f"{t:.6f} {p.x:.6f} {p.y:.6f} 0 0 0 {math.sin(half):.9f} {math.cos(half):.9f}\n")


def read_tum(path: str) -> Tuple[np.ndarray, List[Pose2D]]:
    times: List[float] = []
    poses: List[Pose2D] = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                fields = line.split()
                if not fields or fields[0].startswith("#"):
                    continue
                if len(fields) != 8:
                    raise LogParseError(path, line_no, f"expected 8 fields, got {len(fields)}")
                try:
                    t, x, y, _, qx, qy, qz, qw = (float(v) for v in fields)
                except ValueError as exc:
                    raise LogParseError(path, line_no, str(exc)) from exc
                yaw = math.atan2(2.0 * (qw * qz + qx * qy), 1.0 - 2.0 * (qy * qy + qz * qz))
                times.append(t)
                poses.append(Pose2D(x, y, yaw))
    except OSError as exc:
        raise LogParseError(path, None, f"cannot read trajectory: {exc}") from exc
    return np.array(times), poses
