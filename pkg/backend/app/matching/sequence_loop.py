"""
WiFi loop closure detection by fingerprint sequence alignment.

For a candidate pair (i, j) every fingerprint in the window around i is
located inside the window around j as the similarity-weighted mean of its k
most similar fingerprints there. The rigid transform aligning the window of
i onto those estimates is the relative pose of the pair; the mean alignment
distance decides whether the pair is a loop closure.

Convention: `LoopClosure.transform` is the pose of node_i expressed in
node_j's frame. It maps points from node_i's frame into node_j's frame.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import (
    InsufficientCorrespondencesError,
    InvalidInputError,
    NoEstimateError,
    TimestampGapError,
)
from app.core.geometry import (
    Pose2D,
    Transform2D,
    interpolate_pose,
    normalize_angle,
    path_length,
    relative,
    rigid_fit,
    transform_points,
)
from app.matching.fingerprint import Fingerprint, similarity, similarity_matrix
from app.models.slam_models import SequenceMatchParams, SimilarityParams

logger = logging.getLogger(__name__)


class LoopSource(str, Enum):
    WIFI_SEQUENCE = "wifi_sequence"
    ICP_PROXIMITY = "icp_proximity"
    ICP_LOOP = "icp_loop"


@dataclass(frozen=True)
class LoopClosure:
    node_i: int
    node_j: int
    transform: Transform2D
    residual: float
    source: LoopSource

    def __post_init__(self):
        if self.node_i == self.node_j:
            raise InvalidInputError(f"loop closure must join two different nodes, got {self.node_i}")
        if self.residual < 0:
            raise InvalidInputError("loop closure residual must be non-negative")


@dataclass
class FingerprintTrack:
    """Odometry poses and fingerprints at the WiFi sample times."""

    timestamps: np.ndarray
    poses: List[Pose2D]
    fingerprints: List[Fingerprint]
    cumulative_distance: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        self.cumulative_distance = np.asarray(self.cumulative_distance, dtype=float)
        n = len(self.timestamps)
        if not (len(self.poses) == len(self.fingerprints) == len(self.cumulative_distance) == n):
            raise InvalidInputError("track timestamps, poses, fingerprints and distances must have equal length")
        if n and np.any(np.diff(self.timestamps) <= 0):
            raise InvalidInputError("track timestamps must be strictly increasing")
        if n and (self.cumulative_distance[0] != 0.0 or np.any(np.diff(self.cumulative_distance) < 0)):
            raise InvalidInputError("cumulative distance must start at 0 and never decrease")

    def __len__(self) -> int:
        return len(self.timestamps)

    @classmethod
    def from_streams(cls, odometry_times: Sequence[float], odometry: Sequence[Pose2D],
                     fingerprints: Sequence[Fingerprint], max_gap: float = 5.0) -> "FingerprintTrack":
        """
        Place one node at every fingerprint time.

        Node poses interpolate the odometry; cumulative distance is the
        odometric path length travelled up to each node.

        Raises:
            TimestampGapError: when the streams do not overlap or odometry has
                a hole longer than `max_gap` seconds.
        """
        odometry_times = np.asarray(odometry_times, dtype=float)
        if len(odometry_times) == 0 or len(fingerprints) == 0:
            raise InvalidInputError("odometry and WiFi streams must both be non-empty")
        gaps = np.diff(odometry_times)
        if len(gaps) and gaps.max() > max_gap:
            k = int(np.argmax(gaps))
            raise TimestampGapError(
                f"odometry has a {gaps[k]:.2f} s gap after t={odometry_times[k]:.3f} (limit {max_gap} s)")

        start, end = odometry_times[0], odometry_times[-1]
        kept = []
        for fp in fingerprints:
            if fp.timestamp < start - max_gap or fp.timestamp > end + max_gap:
                raise TimestampGapError(
                    f"fingerprint at t={fp.timestamp:.3f} is more than {max_gap} s outside odometry [{start:.3f}, {end:.3f}]")
            if len(fp) > 0:
                kept.append(fp)

        if not kept:
            raise InvalidInputError("every fingerprint in the WiFi stream is empty")
        odometry_distance = path_length(odometry)
        times = np.array([fp.timestamp for fp in kept])
        poses = [interpolate_pose(odometry_times, odometry, t) for t in times]
        distance = np.interp(times, odometry_times, odometry_distance)
        distance = np.maximum.accumulate(distance - distance[0])
        return cls(times, poses, kept, distance)

    def accumulated_distance(self, i: int, j: int) -> float:
        return abs(float(self.cumulative_distance[i] - self.cumulative_distance[j]))

    def relative_positions(self, center: int, indices: np.ndarray) -> np.ndarray:
        """Positions of the given nodes expressed in the frame of `center`."""
        c = self.poses[center]
        xy = np.array([[self.poses[k].x, self.poses[k].y] for k in indices]) - np.array([c.x, c.y])
        cos_t, sin_t = math.cos(c.theta), math.sin(c.theta)
        return np.column_stack([cos_t * xy[:, 0] + sin_t * xy[:, 1], -sin_t * xy[:, 0] + cos_t * xy[:, 1]])


def _window(track_len: int, center: int, half: int) -> np.ndarray:
    lo, hi = center - half, center + half
    if lo < 0 or hi >= track_len:
        raise InvalidInputError(f"window [{lo}, {hi}] around node {center} is outside the track (0..{track_len - 1})")
    return np.arange(lo, hi + 1)


def _candidate_order(half: int) -> np.ndarray:
    # nearest to the window center first, then lower index
    offsets = sorted(range(2 * half + 1), key=lambda c: (abs(c - half), c))
    return np.array(offsets)


def _weighted_positions(sims: np.ndarray, positions: np.ndarray, k: int, order: np.ndarray):
    """
    Similarity-weighted mean of the k best candidates for every query row.

    Returns:
        (positions (Q, 2), weights (Q,), valid mask (Q,))
    """
    sims = np.atleast_2d(sims)
    k = min(k, sims.shape[1])
    ranked = np.argsort(-sims[:, order], axis=1, kind="stable")[:, :k]
    columns = order[ranked]
    top = np.take_along_axis(sims, columns, axis=1)
    total = top.sum(axis=1)
    valid = total > 0
    estimates = np.zeros((sims.shape[0], 2))
    if np.any(valid):
        weighted = np.einsum("qk,qkd->qd", top[valid], positions[columns[valid]])
        estimates[valid] = weighted / total[valid, None]
    return estimates, top[:, 0], valid


def estimate_position_in_sequence(track: FingerprintTrack, query: Fingerprint, j: int,
                                  params: SequenceMatchParams = None,
                                  sim_params: SimilarityParams = None) -> Tuple[np.ndarray, float]:
    """
    Locate `query` inside the window around node j.

    Args:
        track: the fingerprint track
        query: fingerprint to locate
        j: window center
        params: window size and k
        sim_params: similarity parameters

    Returns:
        (position in x_j's frame, top similarity)

    Raises:
        NoEstimateError: all k best similarities are zero
    """
    params = params or SequenceMatchParams()
    sim_params = sim_params or SimilarityParams()
    half = params.search_half_width
    indices = _window(len(track), j, half)
    sims = np.array([similarity(query, track.fingerprints[k], sim_params) for k in indices])
    positions = track.relative_positions(j, indices)
    estimates, weights, valid = _weighted_positions(sims, positions, params.k_neighbors, _candidate_order(half))
    if not valid[0]:
        raise NoEstimateError(f"no fingerprint similar to the query around node {j}")
    return estimates[0], float(weights[0])


def align_sequences(track: FingerprintTrack, i: int, j: int, params: SequenceMatchParams = None,
                    sim_params: SimilarityParams = None,
                    similarities: Optional[np.ndarray] = None) -> Tuple[Transform2D, float]:
    """
    Relative pose between nodes i and j from their fingerprint sequences.

    Args:
        track: the fingerprint track
        i: node whose window is aligned
        j: node whose window hosts the position estimates
        params: window, k
        sim_params: similarity parameters (ignored when `similarities` is given)
        similarities: optional precomputed all-pairs similarity matrix

    Returns:
        (transform taking x_i's frame into x_j's frame, mean alignment distance)

    Raises:
        InsufficientCorrespondencesError: fewer than 3 usable correspondences
    """
    params = params or SequenceMatchParams()
    sim_params = sim_params or SimilarityParams()
    source_idx = _window(len(track), i, params.half_window)
    target_idx = _window(len(track), j, params.search_half_width)

    if similarities is not None:
        sims = similarities[np.ix_(source_idx, target_idx)]
    else:
        sims = np.array([[similarity(track.fingerprints[a], track.fingerprints[b], sim_params)
                          for b in target_idx] for a in source_idx])

    target_positions = track.relative_positions(j, target_idx)
    estimates, _, valid = _weighted_positions(sims, target_positions, params.k_neighbors,
                                              _candidate_order(params.search_half_width))
    if int(valid.sum()) < 3:
        raise InsufficientCorrespondencesError(
            f"only {int(valid.sum())} correspondences between windows of nodes {i} and {j}")

    source_points = track.relative_positions(i, source_idx)[valid]
    target_points = estimates[valid]
    transform = rigid_fit(source_points, target_points)
    distances = np.linalg.norm(transform_points(transform, source_points) - target_points, axis=1)
    return transform, float(distances.mean())


@dataclass
class LoopDetectionReport:
    pairs_considered: int = 0
    passed_distance_gate: int = 0
    passed_similarity_gate: int = 0
    pruned: int = 0
    aligned: int = 0
    rejected_residual: int = 0
    failures: Dict[str, int] = field(default_factory=lambda: {"no_estimate": 0, "insufficient_correspondences": 0})
    accepted: int = 0
    residuals: List[float] = field(default_factory=list)

    def to_dict(self, residual_threshold: float = 3.0) -> Dict:
        edges = np.linspace(0.0, 2.0 * residual_threshold, 13)
        counts, _ = np.histogram(np.clip(self.residuals, 0.0, edges[-1]), bins=edges)
        return {
            "pairs_considered": self.pairs_considered,
            "passed_distance_gate": self.passed_distance_gate,
            "passed_similarity_gate": self.passed_similarity_gate,
            "pruned": self.pruned,
            "aligned": self.aligned,
            "rejected_residual": self.rejected_residual,
            "failures": dict(self.failures),
            "closures_accepted": self.accepted,
            "residual_histogram": {
                "bin_edges_m": [round(float(e), 6) for e in edges],
                "counts": [int(c) for c in counts],
            },
        }


def _near_accepted(accepted: Sequence[LoopClosure], i: int, j: int, stride: int) -> bool:
    """Whether (i, j) lies within `stride` of an accepted closure on both axes.

    `accepted` is in non-decreasing node_i order, so the scan stops at the
    first closure more than `stride` rows back.
    """
    if stride <= 0:
        return False
    for c in reversed(accepted):
        if i - c.node_i >= stride:
            return False
        if abs(j - c.node_j) < stride:
            return True
    return False


class WifiLoopDetector:
    """Runs the candidate search over a whole track and keeps a report."""

    def __init__(self, params: SequenceMatchParams = None, sim_params: SimilarityParams = None):
        self.params = params or SequenceMatchParams()
        self.sim_params = sim_params or SimilarityParams()
        self.report = LoopDetectionReport()

    def detect(self, track: FingerprintTrack, similarities: Optional[np.ndarray] = None) -> List[LoopClosure]:
        params = self.params
        self.report = report = LoopDetectionReport()
        n = len(track)
        if n <= params.window_w:
            logger.warning(f"Track has {n} nodes, not more than the window size {params.window_w}; no WiFi loops")
            return []
        if similarities is None:
            similarities = similarity_matrix(track.fingerprints, self.sim_params)

        h_src = params.half_window
        h_tgt = params.search_half_width
        margin = max(h_src, h_tgt)
        stride = int(params.window_w * params.prune_stride_fraction)
        distance = track.cumulative_distance
        accepted: List[LoopClosure] = []

        for i in range(margin, n - margin):
            js = np.arange(margin, i)
            if len(js) == 0:
                continue
            report.pairs_considered += len(js)
            far = distance[i] - distance[js] >= params.min_loop_distance
            report.passed_distance_gate += int(far.sum())
            similar = far & (similarities[i, js] >= self.sim_params.min_similarity)
            report.passed_similarity_gate += int(similar.sum())

            for j in js[similar]:
                j = int(j)
                if _near_accepted(accepted, i, j, stride):
                    report.pruned += 1
                    continue
                try:
                    transform, residual = align_sequences(track, i, j, params, self.sim_params, similarities)
                except NoEstimateError:
                    report.failures["no_estimate"] += 1
                    continue
                except InsufficientCorrespondencesError:
                    report.failures["insufficient_correspondences"] += 1
                    continue
                report.aligned += 1
                report.residuals.append(residual)
                if residual < params.residual_threshold:
                    accepted.append(LoopClosure(i, j, transform, residual, LoopSource.WIFI_SEQUENCE))
                else:
                    report.rejected_residual += 1

        report.accepted = len(accepted)
        logger.info(f"WiFi loop detection: {report.passed_similarity_gate} candidate pairs, "
                    f"{report.aligned} aligned, {report.accepted} closures accepted")
        return sorted(accepted, key=lambda c: (c.node_i, c.node_j))


def detect_wifi_loop_closures(track: FingerprintTrack, params: SequenceMatchParams = None,
                              sim_params: SimilarityParams = None) -> List[LoopClosure]:
    """Loop closures for every pair passing the distance, similarity and residual gates."""
    return WifiLoopDetector(params, sim_params).detect(track)


def sequence_pose_errors(closures: Sequence[LoopClosure], truth: Sequence[Pose2D]) -> Dict[str, float]:
    """Mean position and orientation error of closure transforms against true relative poses."""
    if not closures:
        return {"count": 0, "position_error_m": float("nan"), "orientation_error_rad": float("nan")}
    position, orientation = [], []
    for c in closures:
        expected = relative(truth[c.node_j], truth[c.node_i])
        position.append(math.hypot(c.transform.dx - expected.dx, c.transform.dy - expected.dy))
        orientation.append(abs(normalize_angle(c.transform.dtheta - expected.dtheta)))
    return {
        "count": len(closures),
        "position_error_m": float(np.mean(position)),
        "orientation_error_rad": float(np.mean(orientation)),
    }
