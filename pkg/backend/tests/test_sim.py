import math
import os

import numpy as np
import pytest
import hypothesis.strategies as st
from hypothesis import given, settings

from app.core.errors import InvalidInputError
from app.core.geometry import Pose2D, path_length
from app.models.slam_models import LidarSpec, ScenarioConfig, SensorNoiseSpec, WorldSpec
from app.sim.simulator import (
    ap_id,
    beam_angles,
    cast_rays,
    corridor_waypoints,
    corrupt_odometry,
    default_world,
    generate_trajectory,
    rss_readings,
    run_simulation,
    sample_lidar,
    simulate_scenario,
    wall_array,
)

from conftest import ROOM_WALLS

OPEN = WorldSpec(extent=(100.0, 100.0))
NOISELESS = SensorNoiseSpec.noiseless()


def test_two_waypoints_four_metres_apart():
    times, poses = generate_trajectory(OPEN, [(10.0, 10.0), (14.0, 10.0)], speed=0.4, dt=0.1)
    assert len(poses) == 101
    assert times[-1] == pytest.approx(10.0)
    assert poses[-1].x == pytest.approx(14.0)
    assert all(abs(p.theta) < 1e-12 for p in poses)


def test_single_waypoint_is_stationary():
    times, poses = generate_trajectory(OPEN, [(3.0, 4.0)])
    assert times.tolist() == [0.0]
    assert poses == [Pose2D(3.0, 4.0, 0.0)]


def test_waypoint_outside_extent():
    with pytest.raises(InvalidInputError):
        generate_trajectory(OPEN, [(10.0, 10.0), (150.0, 10.0)])


def test_closed_loop_returns_to_start():
    config = ScenarioConfig(extent=(30.0, 100.0), laps=1)
    world = default_world(config)
    times, poses = generate_trajectory(world, corridor_waypoints(config), config.speed, config.dt)
    assert poses[0].distance_to(poses[-1]) <= config.speed * config.dt + 1e-9


def test_zero_noise_odometry_is_ground_truth():
    _, truth = generate_trajectory(OPEN, [(10, 10), (20, 10), (20, 20)])
    assert corrupt_odometry(truth, NOISELESS, np.random.default_rng(1)) == truth


def test_odometry_is_deterministic_per_seed():
    _, truth = generate_trajectory(OPEN, [(10, 10), (20, 10), (20, 20)])
    noise = SensorNoiseSpec()
    first = corrupt_odometry(truth, noise, 5)
    second = corrupt_odometry(truth, noise, 5)
    other = corrupt_odometry(truth, noise, 6)
    assert first == second
    assert first != other


def test_odometry_seed_forms_agree():
    _, truth = generate_trajectory(OPEN, [(10, 10), (20, 10), (20, 20)])
    noise = SensorNoiseSpec()
    child = np.random.SeedSequence(9).spawn(2)[1]
    assert corrupt_odometry(truth, noise, 9) == corrupt_odometry(truth, noise, np.random.default_rng(9))
    assert corrupt_odometry(truth, noise, child) == corrupt_odometry(truth, noise, np.random.SeedSequence(9).spawn(2)[1])


@pytest.mark.slow
def test_default_noise_drifts_over_a_kilometre():
    config = ScenarioConfig(extent=(30.0, 200.0), laps=3)
    _, truth = generate_trajectory(default_world(config), corridor_waypoints(config), 0.4, 0.1)
    assert path_length(truth)[-1] >= 1000.0
    large = 0
    for seed in range(100):
        odometry = corrupt_odometry(truth, SensorNoiseSpec(), seed)
        large += odometry[-1].distance_to(truth[-1]) >= 10.0
    assert large >= 95


@pytest.mark.parametrize("distance, expected", [(1.0, -40.0), (0.2, -40.0), (10.0, -65.0)])
def test_rss_log_distance(distance, expected):
    world = WorldSpec(ap_positions=[(distance, 0.0)], extent=(100.0, 100.0))
    readings = rss_readings((0.0, 0.0), world, NOISELESS, np.random.default_rng(0))
    assert readings[ap_id(0)] == pytest.approx(expected)


def test_far_ap_is_below_the_floor():
    world = WorldSpec(ap_positions=[(10_000.0, 0.0)], extent=(20_000.0, 100.0))
    assert rss_readings((0.0, 0.0), world, NOISELESS, np.random.default_rng(0)) == {}


@given(st.floats(1.0, 500.0), st.floats(0.01, 100.0))
def test_rss_decreases_with_distance(near, extra):
    world = WorldSpec(ap_positions=[(near, 0.0), (near + extra, 0.0)], extent=(1000.0, 10.0))
    noise = NOISELESS.model_copy(update={"detection_floor": -1e9})
    readings = rss_readings((0.0, 0.0), world, noise, np.random.default_rng(0))
    assert readings[ap_id(0)] >= readings[ap_id(1)]


def test_empty_world_has_no_returns():
    scan = sample_lidar(Pose2D(0, 0, 0), OPEN, LidarSpec(), NOISELESS, np.random.default_rng(0))
    assert len(scan) == 0
    assert np.isinf(scan.ranges).all()
    assert len(scan.ranges) == 1081


def test_central_ray_hits_wall_two_metres_ahead():
    world = WorldSpec(walls=[((2.0, -50.0), (2.0, 50.0))], extent=(100.0, 100.0))
    lidar = LidarSpec()
    scan = sample_lidar(Pose2D(0, 0, 0), world, lidar, NOISELESS, np.random.default_rng(0))
    angle_min, increment, count = beam_angles(lidar)
    center = int(round(-angle_min / increment))
    assert scan.ranges[center] == pytest.approx(2.0)


def test_square_room_scan_lies_on_the_outline():
    world = WorldSpec(walls=ROOM_WALLS, extent=(10.0, 8.0))
    noise = NOISELESS.model_copy(update={"lidar_range_noise": 0.01})
    pose = Pose2D(4.0, 3.0, 0.7)
    scan = sample_lidar(pose, world, LidarSpec(fov_deg=360.0), noise, np.random.default_rng(3))
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    xs = pose.x + c * scan.points[:, 0] - s * scan.points[:, 1]
    ys = pose.y + s * scan.points[:, 0] + c * scan.points[:, 1]
    outline = np.minimum.reduce([np.abs(xs), np.abs(xs - 10.0), np.abs(ys), np.abs(ys - 8.0)])
    assert outline.max() <= 6 * 0.01


segment = st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10))


@settings(max_examples=50, deadline=None)
@given(st.lists(segment, min_size=1, max_size=8), st.floats(-math.pi, math.pi))
def test_cast_rays_returns_nearest_segment(segments, angle):
    walls = wall_array([((a, b), (c, d)) for a, b, c, d in segments])
    expected = min(cast_rays((0.0, 0.0), np.array([angle]), walls[k:k + 1], 100.0)[0] for k in range(len(walls)))
    assert cast_rays((0.0, 0.0), np.array([angle]), walls, 100.0)[0] == expected


def test_default_world_layout():
    config = ScenarioConfig()
    world = default_world(config)
    assert len(world.ap_positions) == config.n_aps
    assert world == default_world(config)
    m = config.corridor_margin
    for x, y in world.ap_positions:
        assert not (m < x < 30.0 - m and m < y < 200.0 - m)


def test_simulation_is_reproducible(tmp_path, small_scenario):
    first = simulate_scenario(small_scenario, str(tmp_path / "a"))
    second = simulate_scenario(small_scenario, str(tmp_path / "b"))
    assert set(first) == {"odometry", "wifi", "scans", "ground_truth", "scenario"}
    for name in first:
        with open(first[name], "rb") as a, open(second[name], "rb") as b:
            assert a.read() == b.read(), name


def test_simulation_samples_at_half_hertz(small_scenario):
    sim = run_simulation(small_scenario)
    assert len(sim.fingerprints) == len(sim.scans) == len(sim.sample_indices)
    gaps = np.diff([fp.timestamp for fp in sim.fingerprints])
    assert gaps == pytest.approx(np.full(len(gaps), 2.0))
    assert all(len(fp) > 0 for fp in sim.fingerprints)
    assert len(sim.sample_truth()) == len(sim.fingerprints)
