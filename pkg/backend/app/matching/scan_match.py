"""
Point-to-point ICP between 2D laser scans and the two ways the pipeline
turns matches into constraints: scans of nearby nodes along the odometry
(proximity) and scans of revisited places after the first optimization
(loop).
"""
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from app.core.errors import InvalidInputError, LogParseError, NoMatchError
from app.core.geometry import Pose2D, Transform2D, relative, rigid_fit, transform_points
from app.matching.sequence_loop import FingerprintTrack, LoopClosure, LoopSource
from app.models.slam_models import IcpParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LaserScan:
    """
    One scan in the sensor frame.

    `points` holds the returns inside max_range. When the scan came from a
    range array, the raw beams are kept so max-range beams can still clear
    free space in the map.
    """

    timestamp: float
    points: np.ndarray
    max_range: float
    angle_min: Optional[float] = None
    angle_increment: Optional[float] = None
    ranges: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "points", points)
        if self.max_range <= 0:
            raise InvalidInputError("scan max_range must be positive")
        if len(points) and np.any(np.hypot(points[:, 0], points[:, 1]) > self.max_range + 1e-9):
            raise InvalidInputError(f"scan at t={self.timestamp:.3f} has points beyond max_range")
        if self.ranges is not None:
            object.__setattr__(self, "ranges", np.asarray(self.ranges, dtype=float))

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_ranges(cls, timestamp: float, angle_min: float, angle_increment: float,
                    ranges: Sequence[float], max_range: float) -> "LaserScan":
        ranges = np.asarray([np.inf if r is None else r for r in ranges], dtype=float)
        angles = angle_min + angle_increment * np.arange(len(ranges))
        valid = np.isfinite(ranges) & (ranges > 0) & (ranges < max_range)
        points = np.column_stack([ranges[valid] * np.cos(angles[valid]), ranges[valid] * np.sin(angles[valid])])
        return cls(timestamp, points, max_range, angle_min, angle_increment, ranges)

    def beams(self):
        """(angles, ranges) with every non-return set to inf; synthesised from points when no raw beams."""
        if self.ranges is not None:
            angles = self.angle_min + self.angle_increment * np.arange(len(self.ranges))
            ranges = np.where(np.isfinite(self.ranges) & (self.ranges > 0) & (self.ranges < self.max_range),
                              self.ranges, np.inf)
            return angles, ranges
        return np.arctan2(self.points[:, 1], self.points[:, 0]), np.hypot(self.points[:, 0], self.points[:, 1])

    def downsampled(self, voxel: float) -> "LaserScan":
        """Replace the points in each voxel by their centroid."""
        if len(self.points) == 0:
            return self
        keys = np.floor(self.points / voxel).astype(np.int64)
        _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        sums = np.zeros((len(counts), 2))
        np.add.at(sums, inverse, self.points)
        return LaserScan(self.timestamp, sums / counts[:, None], self.max_range)


@dataclass
class IcpResult:
    transform: Transform2D
    fitness: float
    matched_points: int
    converged: bool
    iterations: int = 0
    fitness_history: List[float] = field(default_factory=list)


def _icp_from(source: LaserScan, target: LaserScan, tree: cKDTree, estimate: Transform2D,
              params: IcpParams) -> IcpResult:
    """One point-to-point ICP descent from `estimate`."""
    radius = params.correspondence_radius
    history: List[float] = []
    converged = False
    iterations = 0

    for iterations in range(1, params.max_iterations + 1):
        moved = transform_points(estimate, source.points)
        distances, indices = tree.query(moved, distance_upper_bound=radius)
        matched = np.isfinite(distances)
        if int(matched.sum()) < 3:
            raise NoMatchError(f"only {int(matched.sum())} correspondences within {radius} m")
        history.append(float(np.mean(np.minimum(distances, radius) ** 2)))

        step = rigid_fit(moved[matched], target.points[indices[matched]])
        estimate = step.then(estimate)
        if math.sqrt(step.dx ** 2 + step.dy ** 2 + step.dtheta ** 2) < params.convergence_epsilon:
            converged = True
            break

    moved = transform_points(estimate, source.points)
    distances, indices = tree.query(moved, distance_upper_bound=radius)
    matched = np.isfinite(distances)
    if int(matched.sum()) < 3:
        raise NoMatchError(f"only {int(matched.sum())} correspondences at the final pose")
    history.append(float(np.mean(np.minimum(distances, radius) ** 2)))

    return IcpResult(
        transform=estimate,
        fitness=float(np.mean(distances[matched] ** 2)),
        matched_points=int(len(np.unique(indices[matched]))),
        converged=converged,
        iterations=iterations,
        fitness_history=history,
    )


def icp(source: LaserScan, target: LaserScan, initial_guess: Transform2D = None,
        params: IcpParams = None) -> IcpResult:
    """
    Register `source` onto `target`.

    Point-to-point descent can settle one beam spacing away from the true
    heading, where neighbouring samples pair up consistently. When the
    residual stays above `restart_fitness`, the descent is restarted from
    headings offset by multiples of `restart_step` and the lowest truncated
    residual wins.

    Args:
        source: scan whose points are moved
        target: reference scan
        initial_guess: starting estimate of the source frame in the target frame
        params: iteration cap, correspondence radius, convergence and restart settings

    Returns:
        IcpResult whose transform maps source points into the target frame

    Raises:
        NoMatchError: fewer than 3 correspondences on the first descent
    """
    params = params or IcpParams()
    estimate = initial_guess or Transform2D.identity()
    if len(source) < 3 or len(target) < 3:
        raise NoMatchError(f"scans too small to match ({len(source)} and {len(target)} points)")

    tree = cKDTree(target.points)
    best = _icp_from(source, target, tree, estimate, params)
    pivot = best.transform
    for k in range(1, params.rotation_restarts + 1):
        if best.fitness_history[-1] <= params.restart_fitness:
            break
        for sign in (-1.0, 1.0):
            seed = Transform2D(pivot.dx, pivot.dy, pivot.dtheta + sign * k * params.restart_step)
            try:
                candidate = _icp_from(source, target, tree, seed, params)
            except NoMatchError:
                continue
            if candidate.fitness_history[-1] < best.fitness_history[-1]:
                best = candidate
    return best


def accept_match(result: IcpResult, source: LaserScan, target: LaserScan) -> bool:
    """Matched points must reach half of the average point count of the two scans."""
    return 4 * result.matched_points >= len(source) + len(target)


def load_scan_log(path: str) -> List[LaserScan]:
    """Read a JSON-lines scan log; null or non-finite ranges mean no return."""
    scans = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    scans.append(LaserScan.from_ranges(
                        float(record["timestamp_s"]),
                        float(record["angle_min_rad"]),
                        float(record["angle_increment_rad"]),
                        record["ranges_m"],
                        float(record["range_max_m"]),
                    ))
                except (ValueError, KeyError, TypeError) as exc:
                    raise LogParseError(path, line_no, f"bad scan record: {exc}") from exc
    except OSError as exc:
        raise LogParseError(path, None, f"cannot read scan log: {exc}") from exc
    logger.info(f"Loaded {len(scans)} scans from {path}")
    return scans


def write_scan_log(path: str, scans: Sequence[LaserScan]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for scan in scans:
            if scan.ranges is None:
                raise InvalidInputError("only scans built from ranges can be written to a scan log")
            ranges = [round(float(r), 4) if np.isfinite(r) else None for r in scan.ranges]
            handle.write(json.dumps({
                "timestamp_s": round(scan.timestamp, 6),
                "angle_min_rad": scan.angle_min,
                "angle_increment_rad": scan.angle_increment,
                "range_max_m": scan.max_range,
                "ranges_m": ranges,
            }) + "\n")


def align_scans_to_nodes(node_times: Sequence[float], scans: Sequence[LaserScan],
                         tolerance: float = 0.5) -> Dict[int, LaserScan]:
    """Nearest scan for every node whose closest scan lies within `tolerance` seconds."""
    if not scans:
        return {}
    ordered = sorted(scans, key=lambda s: s.timestamp)
    times = np.array([s.timestamp for s in ordered])
    aligned = {}
    for node, t in enumerate(node_times):
        k = int(np.searchsorted(times, t))
        best = min((c for c in (k - 1, k) if 0 <= c < len(times)), key=lambda c: abs(times[c] - t))
        if abs(times[best] - t) <= tolerance:
            aligned[node] = ordered[best]
    return aligned


@dataclass
class ScanMatchReport:
    attempted: int = 0
    converged: int = 0
    accepted: int = 0
    failed: int = 0
    rejected: int = 0
    skipped: int = 0

    def to_dict(self) -> Dict[str, int]:
        return dict(self.__dict__)


class ScanMatcher:
    """Prepares (downsamples) node scans once and runs the two constraint searches."""

    def __init__(self, scans_by_node: Dict[int, LaserScan], params: IcpParams = None):
        self.params = params or IcpParams()
        self.scans = {node: scan.downsampled(self.params.voxel_size) for node, scan in scans_by_node.items()}
        self.proximity_report = ScanMatchReport()
        self.loop_report = ScanMatchReport()

    def _match(self, i: int, j: int, guess: Transform2D, source: LoopSource,
               report: ScanMatchReport) -> Optional[LoopClosure]:
        scan_i, scan_j = self.scans.get(i), self.scans.get(j)
        if scan_i is None or scan_j is None or min(len(scan_i), len(scan_j)) < self.params.min_points:
            report.skipped += 1
            return None
        report.attempted += 1
        try:
            result = icp(scan_i, scan_j, guess, self.params)
        except NoMatchError:
            report.failed += 1
            return None
        report.converged += int(result.converged)
        if not accept_match(result, scan_i, scan_j):
            report.rejected += 1
            return None
        report.accepted += 1
        return LoopClosure(i, j, result.transform, math.sqrt(result.fitness), source)

    def proximity_constraints(self, track: FingerprintTrack) -> List[LoopClosure]:
        self.proximity_report = report = ScanMatchReport()
        distance = track.cumulative_distance
        closures = []
        for i in range(1, len(track)):
            first = int(np.searchsorted(distance, distance[i] - self.params.proximity_trigger, side="left"))
            for j in range(first, i):
                guess = relative(track.poses[j], track.poses[i])
                closure = self._match(i, j, guess, LoopSource.ICP_PROXIMITY, report)
                if closure is not None:
                    closures.append(closure)
        logger.info(f"Proximity scan matching: {report.accepted}/{report.attempted} matches accepted")
        return sorted(closures, key=lambda c: (c.node_i, c.node_j))

    def loop_candidates(self, track: FingerprintTrack, optimized: Sequence[Pose2D],
                        min_loop_distance: float) -> Dict[int, List[int]]:
        xy = np.array([[p.x, p.y] for p in optimized])
        tree = cKDTree(xy)
        distance = track.cumulative_distance
        candidates: Dict[int, List[int]] = {}
        for i in range(len(optimized)):
            near = tree.query_ball_point(xy[i], self.params.loop_radius)
            js = sorted(j for j in near if j < i - 1 and distance[i] - distance[j] >= min_loop_distance)
            if js:
                candidates[i] = js
        return candidates

    def loop_constraints(self, track: FingerprintTrack, optimized: Sequence[Pose2D],
                         min_loop_distance: float, fraction: float = None, seed: int = 0) -> List[LoopClosure]:
        """
        ICP loop closures between revisits found on the optimized trajectory.

        A seeded uniform subset of `fraction` of the candidate source nodes
        is evaluated; every candidate partner of a chosen node is matched.
        """
        fraction = self.params.extra_pose_fraction if fraction is None else fraction
        self.loop_report = report = ScanMatchReport()
        if len(optimized) != len(track):
            raise InvalidInputError("optimized poses must match the track length")
        candidates = self.loop_candidates(track, optimized, min_loop_distance)
        sources = sorted(candidates)
        count = int(round(fraction * len(sources)))
        if count == 0:
            return []
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(np.array(sources), size=count, replace=False))

        closures = []
        for i in chosen:
            i = int(i)
            for j in candidates[i]:
                guess = relative(optimized[j], optimized[i])
                closure = self._match(i, j, guess, LoopSource.ICP_LOOP, report)
                if closure is not None:
                    closures.append(closure)
        logger.info(f"Loop scan matching: {count} of {len(sources)} source nodes, "
                    f"{report.accepted}/{report.attempted} matches accepted")
        return sorted(closures, key=lambda c: (c.node_i, c.node_j))


def proximity_constraints(track: FingerprintTrack, scans_by_node: Dict[int, LaserScan],
                          params: IcpParams = None) -> List[LoopClosure]:
    return ScanMatcher(scans_by_node, params).proximity_constraints(track)


def loop_constraints(track: FingerprintTrack, optimized: Sequence[Pose2D], scans_by_node: Dict[int, LaserScan],
                     params: IcpParams = None, min_loop_distance: float = 50.0, seed: int = 0) -> List[LoopClosure]:
    return ScanMatcher(scans_by_node, params).loop_constraints(track, optimized, min_loop_distance, seed=seed)
