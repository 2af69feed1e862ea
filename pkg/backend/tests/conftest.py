import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from app.core.geometry import Pose2D  # noqa: E402
from app.matching.fingerprint import Fingerprint  # noqa: E402
from app.matching.sequence_loop import FingerprintTrack  # noqa: E402
from app.models.slam_models import ScenarioConfig, SensorNoiseSpec, LidarSpec  # noqa: E402

ROOM_WALLS = [((0.0, 0.0), (10.0, 0.0)), ((10.0, 0.0), (10.0, 8.0)),
              ((10.0, 8.0), (0.0, 8.0)), ((0.0, 8.0), (0.0, 0.0))]


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-seed end-to-end runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def location_fingerprint(location: int, locations: int, timestamp: float) -> Fingerprint:
    """Location m hears exactly APs m and m+1, so only the same location scores 0.5."""
    return Fingerprint(timestamp, {f"ap{location}": -50.0, f"ap{(location + 1) % locations}": -60.0})


def circle_track(locations: int = 40, laps: int = 2, radius: float = 10.0, second_lap_offset=None) -> FingerprintTrack:
    """
    A circle traversed `laps` times with one identical fingerprint per location.

    `second_lap_offset` (a Transform2D) moves every later lap rigidly, which
    is how odometry drift looks to the sequence matcher.
    """
    times, poses, fps = [], [], []
    for k in range(locations * laps):
        m = k % locations
        phi = 2.0 * math.pi * m / locations
        pose = Pose2D(radius * math.cos(phi), radius * math.sin(phi), phi + math.pi / 2.0)
        if second_lap_offset is not None and k >= locations:
            t = second_lap_offset
            c, s = math.cos(t.dtheta), math.sin(t.dtheta)
            pose = Pose2D(t.dx + c * pose.x - s * pose.y, t.dy + s * pose.x + c * pose.y, pose.theta + t.dtheta)
        times.append(float(k))
        poses.append(pose)
        fps.append(location_fingerprint(m, locations, float(k)))
    xy = np.array([[p.x, p.y] for p in poses])
    distance = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
    return FingerprintTrack(np.array(times), poses, fps, distance)


@pytest.fixture
def room_walls():
    return list(ROOM_WALLS)


@pytest.fixture
def small_scenario():
    """30x100 m ring, 2 laps, coarse lidar; lap length divides the 0.8 m sample spacing."""
    return ScenarioConfig(name="small", seed=3, extent=(30.0, 100.0), n_aps=60, laps=2,
                          lidar=LidarSpec(increment_deg=1.0))


@pytest.fixture
def noiseless_scenario(small_scenario):
    return small_scenario.model_copy(update={"noise": SensorNoiseSpec.noiseless()})
