import math

import numpy as np
import pytest
import hypothesis.strategies as st
from hypothesis import given, settings

from app.core.errors import (
    InsufficientCorrespondencesError,
    InvalidInputError,
    NoEstimateError,
    TimestampGapError,
)
from app.core.geometry import Pose2D, Transform2D, normalize_angle, relative, transform_points
from app.matching.fingerprint import Fingerprint
from app.matching.sequence_loop import (
    FingerprintTrack,
    LoopClosure,
    LoopSource,
    WifiLoopDetector,
    _near_accepted,
    _weighted_positions,
    align_sequences,
    estimate_position_in_sequence,
    sequence_pose_errors,
)
from app.models.slam_models import SequenceMatchParams, SimilarityParams

from conftest import circle_track, location_fingerprint

PARAMS = SequenceMatchParams(window_w=10, k_neighbors=1, residual_threshold=0.5, min_loop_distance=50.0)
GATE = SimilarityParams(min_similarity=0.4)


def planted_pair(walk_xy: np.ndarray, headings: np.ndarray, planted: Transform2D) -> FingerprintTrack:
    """
    Two traversals of the same walk: nodes 0..n-1 are the walk moved rigidly
    by `planted`, nodes n..2n-1 the walk itself. Location m hears only AP m.
    """
    n = len(walk_xy)
    first = [Pose2D(x, y, h) for (x, y), h in zip(walk_xy, headings)]
    moved = transform_points(planted, walk_xy)
    second = [Pose2D(x, y, h + planted.dtheta) for (x, y), h in zip(moved, headings)]
    fps = [Fingerprint(float(k), {f"ap{k % n}": -50.0}) for k in range(2 * n)]
    return FingerprintTrack(np.arange(2.0 * n), second + first, fps, np.arange(2.0 * n))


def random_walk(n: int = 31, seed: int = 0):
    rng = np.random.default_rng(seed)
    headings = np.cumsum(rng.uniform(-0.6, 0.6, n))
    steps = np.column_stack([np.cos(headings), np.sin(headings)]) * rng.uniform(0.5, 1.5, (n, 1))
    return np.cumsum(steps, axis=0), headings


def test_estimate_exact_match_at_center_is_origin():
    track = circle_track()
    point, weight = estimate_position_in_sequence(track, track.fingerprints[10], 10, PARAMS)
    assert point == pytest.approx([0.0, 0.0], abs=1e-12)
    assert weight == 0.5


def test_estimate_k1_returns_best_neighbour_position():
    track = circle_track()
    point, _ = estimate_position_in_sequence(track, track.fingerprints[12], 10, PARAMS)
    expected = relative(track.poses[10], track.poses[12])
    assert point == pytest.approx([expected.dx, expected.dy], abs=1e-12)


def test_weighted_mean_of_two_candidates():
    sims = np.array([[0.6, 0.3, 0.0]])
    positions = np.array([[0.0, 0.0], [2.0, 0.0], [9.0, 9.0]])
    estimates, weights, valid = _weighted_positions(sims, positions, 2, np.array([0, 1, 2]))
    assert valid[0]
    assert weights[0] == 0.6
    assert estimates[0] == pytest.approx([2.0 * 0.3 / 0.9, 0.0])


def test_estimate_without_similar_fingerprint():
    track = circle_track()
    stranger = Fingerprint(0.0, {"elsewhere": -40.0})
    with pytest.raises(NoEstimateError):
        estimate_position_in_sequence(track, stranger, 10, PARAMS)


def test_window_outside_track():
    track = circle_track()
    with pytest.raises(InvalidInputError):
        estimate_position_in_sequence(track, track.fingerprints[0], 2, PARAMS)


def test_align_planted_translation():
    # a diagonal walk with fixed heading: the counterpart of node i sits 5
    # steps ahead of node j, i.e. at (5, 2) in j's frame
    n = 31
    walk = np.column_stack([np.arange(n, dtype=float), 0.4 * np.arange(n)])
    track = planted_pair(walk, np.zeros(n), Transform2D(40.0, -30.0, 0.0))
    params = SequenceMatchParams(window_w=20, k_neighbors=1)
    transform, residual = align_sequences(track, 15, n + 10, params)
    assert transform.dx == pytest.approx(5.0, abs=1e-9)
    assert transform.dy == pytest.approx(2.0, abs=1e-9)
    assert abs(transform.dtheta) <= 1e-9
    assert residual <= 1e-9


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi + 1e-6, math.pi),
       st.integers(-5, 5), st.integers(0, 10_000))
def test_align_recovers_relative_pose_regardless_of_drift(dx, dy, dtheta, offset, seed):
    n = 31
    walk, headings = random_walk(n, seed)
    track = planted_pair(walk, headings, Transform2D(dx, dy, dtheta))
    params = SequenceMatchParams(window_w=20, k_neighbors=1)
    i, j = 15, n + 15 + offset
    transform, residual = align_sequences(track, i, j, params)
    # node i is the drifted copy of walk node 15, so T* is walk node 15 in the frame of node j
    expected = relative(track.poses[j], track.poses[n + 15])
    assert residual <= 1e-6
    assert transform.dx == pytest.approx(expected.dx, abs=1e-6)
    assert transform.dy == pytest.approx(expected.dy, abs=1e-6)
    assert abs(normalize_angle(transform.dtheta - expected.dtheta)) <= 1e-8


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(-math.pi + 1e-6, math.pi),
       st.integers(-5, 5), st.integers(0, 10_000))
def test_swapping_the_windows_inverts_the_alignment(dx, dy, dtheta, offset, seed):
    n = 31
    walk, headings = random_walk(n, seed)
    track = planted_pair(walk, headings, Transform2D(dx, dy, dtheta))
    params = SequenceMatchParams(window_w=20, k_neighbors=1)
    i, j = 15, n + 15 + offset
    forward, forward_residual = align_sequences(track, i, j, params)
    backward, backward_residual = align_sequences(track, j, i, params)
    round_trip = forward.then(backward)
    tolerance = 1e-6 + 2 * (forward_residual + backward_residual)
    assert round_trip.translation_norm() <= tolerance
    assert abs(round_trip.dtheta) <= 1e-6


def test_align_noisy_correspondences_stay_close():
    # k=2 blends each exact match with a neighbour at similarity 1/3, which
    # moves every estimate; the fit still lands near the true relative pose
    track = circle_track()
    params = SequenceMatchParams(window_w=10, k_neighbors=2)
    transform, residual = align_sequences(track, 50, 10, params)
    assert residual <= 1.0
    assert transform.translation_norm() <= 0.5


def test_align_with_too_few_correspondences():
    track = circle_track()
    with pytest.raises(InsufficientCorrespondencesError):
        align_sequences(track, 50, 25, PARAMS)


def test_detector_joins_the_two_laps():
    track = circle_track()
    detector = WifiLoopDetector(PARAMS, GATE)
    closures = detector.detect(track)
    assert closures
    assert [(c.node_i, c.node_j) for c in closures] == sorted((c.node_i, c.node_j) for c in closures)
    for c in closures:
        assert c.node_i - c.node_j == 40
        assert c.source is LoopSource.WIFI_SEQUENCE
        assert c.residual <= 1e-9
        assert c.transform.translation_norm() <= 1e-9
    report = detector.report.to_dict(PARAMS.residual_threshold)
    assert report["closures_accepted"] == len(closures)
    assert report["pruned"] > 0
    assert sum(report["residual_histogram"]["counts"]) == report["aligned"]


def test_detector_sees_through_odometry_drift():
    drift = Transform2D(3.0, -2.0, 0.2)
    drifted = circle_track(second_lap_offset=drift)
    truth = circle_track().poses
    closures = WifiLoopDetector(PARAMS, GATE).detect(drifted)
    assert closures
    errors = sequence_pose_errors(closures, truth)
    assert errors["count"] == len(closures)
    assert errors["position_error_m"] <= 1e-9
    assert errors["orientation_error_rad"] <= 1e-9


def test_detector_on_straight_line_finds_nothing():
    times = np.arange(100.0)
    poses = [Pose2D(k, 0.0, 0.0) for k in range(100)]
    fps = [location_fingerprint(k, 100, float(k)) for k in range(100)]
    track = FingerprintTrack(times, poses, fps, np.arange(100.0))
    assert WifiLoopDetector(PARAMS, GATE).detect(track) == []


def test_detector_on_short_track():
    track = circle_track(locations=8, laps=1)
    assert WifiLoopDetector(PARAMS, GATE).detect(track) == []


def test_sequence_pose_errors_without_closures():
    errors = sequence_pose_errors([], [])
    assert errors["count"] == 0
    assert math.isnan(errors["position_error_m"])


def test_loop_closure_rejects_self_loop():
    with pytest.raises(InvalidInputError):
        LoopClosure(3, 3, Transform2D(), 0.0, LoopSource.WIFI_SEQUENCE)


def test_pruning_sees_every_closure_in_the_row():
    # 100 closures on one row; the one near column 1 is the oldest
    accepted = [LoopClosure(300, j, Transform2D(), 0.0, LoopSource.WIFI_SEQUENCE) for j in range(0, 200, 2)]
    assert _near_accepted(accepted, 300, 1, 5)
    assert _near_accepted(accepted, 303, 0, 5)
    assert not _near_accepted(accepted, 300, 260, 5)
    assert not _near_accepted(accepted, 310, 0, 5)
    assert not _near_accepted(accepted, 300, 1, 0)
    assert not _near_accepted([], 300, 1, 5)


def test_track_from_streams_interpolates_and_drops_empty():
    odometry_times = np.arange(0.0, 10.1, 1.0)
    odometry = [Pose2D(t, 0.0, 0.0) for t in odometry_times]
    fps = [Fingerprint(0.5, {"A": -50.0}), Fingerprint(2.5, {}), Fingerprint(4.0, {"A": -55.0})]
    track = FingerprintTrack.from_streams(odometry_times, odometry, fps)
    assert len(track) == 2
    assert track.poses[0].x == pytest.approx(0.5)
    assert track.cumulative_distance.tolist() == pytest.approx([0.0, 3.5])


def test_track_from_streams_rejects_gaps():
    odometry_times = np.array([0.0, 1.0, 10.0])
    odometry = [Pose2D(t, 0.0, 0.0) for t in odometry_times]
    with pytest.raises(TimestampGapError):
        FingerprintTrack.from_streams(odometry_times, odometry, [Fingerprint(0.5, {"A": -50.0})])
    with pytest.raises(TimestampGapError):
        FingerprintTrack.from_streams(odometry_times[:2], odometry[:2], [Fingerprint(30.0, {"A": -50.0})])
