"""
Synthetic worlds and sensor logs with known ground truth.

The default world is a rectangular corridor ring: an outer wall rectangle,
an inner block inset by the corridor width, square pillars along the
corridor and randomly placed access points. RSS follows a log-distance
path loss model; LiDAR ranges come from ray/segment intersection.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from app.core.errors import InvalidInputError
from app.core.geometry import Pose2D, Transform2D, compose, relative
from app.mapping.grid_map import FREE, OCCUPIED, UNKNOWN, OccupancyGrid
from app.matching.fingerprint import Fingerprint, write_wifi_log
from app.matching.scan_match import LaserScan, write_scan_log
from app.models.slam_models import LidarSpec, ScenarioConfig, SensorNoiseSpec, WorldSpec
from app.utils.log_io import write_odometry, write_tum

logger = logging.getLogger(__name__)

PILLAR_SIZE = 0.6


def ap_id(index: int) -> str:
    return f"02:00:00:00:{index // 256:02x}:{index % 256:02x}"


def _rectangle(x0: float, y0: float, x1: float, y1: float) -> List[Tuple[Tuple[float, float], Tuple[float, float]]]:
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    return [(corners[k], corners[(k + 1) % 4]) for k in range(4)]


def default_world(config: ScenarioConfig) -> WorldSpec:
    """Corridor ring with pillars and `n_aps` access points in the corridor."""
    width, height = config.extent
    margin = config.corridor_margin
    if 2 * margin >= min(width, height):
        raise InvalidInputError(f"corridor margin {margin} leaves no inner block in a {width}x{height} world")

    walls = _rectangle(0.0, 0.0, width, height) + _rectangle(margin, margin, width - margin, height - margin)

    # pillars between the centerline and the outer wall
    offset = 0.25 * margin
    half = PILLAR_SIZE / 2.0
    perimeter = [((offset, offset), (width - offset, offset)),
                 ((width - offset, offset), (width - offset, height - offset)),
                 ((width - offset, height - offset), (offset, height - offset)),
                 ((offset, height - offset), (offset, offset))]
    for (ax, ay), (bx, by) in perimeter:
        length = math.hypot(bx - ax, by - ay)
        for s in np.arange(config.pillar_spacing, length - config.pillar_spacing / 2, config.pillar_spacing):
            cx, cy = ax + (bx - ax) * s / length, ay + (by - ay) * s / length
            walls += _rectangle(cx - half, cy - half, cx + half, cy + half)

    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    aps: List[Tuple[float, float]] = []
    while len(aps) < config.n_aps:
        x, y = rng.uniform(0.0, width), rng.uniform(0.0, height)
        inside_block = margin < x < width - margin and margin < y < height - margin
        if not inside_block:
            aps.append((float(x), float(y)))
    return WorldSpec(walls=walls, ap_positions=aps, extent=(width, height), seed=config.seed)


def corridor_waypoints(config: ScenarioConfig) -> List[Tuple[float, float]]:
    """Corridor centerline traversed `laps` times, closing back on the start."""
    width, height = config.extent
    c = config.corridor_margin / 2.0
    loop = [(c, c), (width - c, c), (width - c, height - c), (c, height - c)]
    return loop * config.laps + [loop[0]]


def generate_trajectory(world: WorldSpec, waypoints: Sequence[Tuple[float, float]], speed: float = 0.4,
                        dt: float = 0.1) -> Tuple[np.ndarray, List[Pose2D]]:
    """
    Constant-speed traversal of a waypoint polyline.

    Headings follow the chord between points 0.5 m behind and ahead, which
    rounds the corners.

    Returns:
        (timestamps, ground-truth poses)
    """
    points = np.asarray(waypoints, dtype=float).reshape(-1, 2)
    if len(points) == 0:
        raise InvalidInputError("at least one waypoint is required")
    width, height = world.extent
    outside = (points[:, 0] < 0) | (points[:, 0] > width) | (points[:, 1] < 0) | (points[:, 1] > height)
    if np.any(outside):
        raise InvalidInputError(f"waypoint {tuple(points[np.argmax(outside)])} lies outside the world extent")
    if len(points) == 1:
        return np.array([0.0]), [Pose2D(points[0, 0], points[0, 1], 0.0)]

    cumulative = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(points, axis=0).T))])
    total = cumulative[-1]
    n = int(math.floor(total / speed / dt + 1e-9)) + 1
    times = np.arange(n) * dt
    s = np.minimum(times * speed, total)

    def position(arc: np.ndarray) -> np.ndarray:
        return np.column_stack([np.interp(arc, cumulative, points[:, 0]), np.interp(arc, cumulative, points[:, 1])])

    ahead = position(np.minimum(s + 0.5, total))
    behind = position(np.maximum(s - 0.5, 0.0))
    headings = np.arctan2(ahead[:, 1] - behind[:, 1], ahead[:, 0] - behind[:, 0])
    xy = position(s)
    return times, [Pose2D(x, y, th) for (x, y), th in zip(xy, headings)]


def corrupt_odometry(truth: Sequence[Pose2D], noise: SensorNoiseSpec,
                     seed: Union[int, np.random.SeedSequence, np.random.Generator] = 0) -> List[Pose2D]:
    """
    Integrate per-step relative motions perturbed by Gaussian noise and a heading bias.

    `seed` is an integer, a SeedSequence child (how run_simulation keeps
    the odometry stream independent of WiFi and lidar) or a Generator that
    is drawn from directly. Equal seeds give identical odometry.
    """
    rng = np.random.default_rng(seed)
    if not truth:
        return []
    steps = [relative(a, b) for a, b in zip(truth[:-1], truth[1:])]
    draws = rng.standard_normal((len(steps), 3))
    if noise.odom_trans_noise == 0 and noise.odom_rot_noise == 0 and noise.odom_drift_bias == 0:
        return list(truth)

    odometry = [truth[0]]
    for step, (nx, ny, nt) in zip(steps, draws):
        distance = step.translation_norm()
        noisy = Transform2D(
            step.dx + nx * noise.odom_trans_noise * distance,
            step.dy + ny * noise.odom_trans_noise * distance,
            step.dtheta + nt * noise.odom_rot_noise * abs(step.dtheta) + noise.odom_drift_bias * distance,
        )
        odometry.append(compose(odometry[-1], noisy))
    return odometry


def rss_readings(position: Sequence[float], world: WorldSpec, noise: SensorNoiseSpec,
                 rng: np.random.Generator) -> Dict[str, float]:
    """Log-distance RSS of every AP above the detection floor."""
    aps = np.asarray(world.ap_positions, dtype=float).reshape(-1, 2)
    if len(aps) == 0:
        return {}
    distance = np.maximum(np.hypot(aps[:, 0] - position[0], aps[:, 1] - position[1]), 1.0)
    rss = noise.tx_power_at_1m - 10.0 * noise.path_loss_exponent * np.log10(distance)
    rss = rss + rng.standard_normal(len(aps)) * noise.rss_noise_sigma
    return {ap_id(k): round(float(v), 2) for k, v in enumerate(rss) if v >= noise.detection_floor}


def sample_wifi(pose: Pose2D, world: WorldSpec, noise: SensorNoiseSpec, rng: np.random.Generator,
                timestamp: float = 0.0) -> Fingerprint:
    return Fingerprint(timestamp, rss_readings((pose.x, pose.y), world, noise, rng))


def wall_array(walls) -> np.ndarray:
    return np.asarray(walls, dtype=float).reshape(-1, 2, 2)


def cast_rays(origin: Sequence[float], angles: np.ndarray, walls: np.ndarray, max_range: float) -> np.ndarray:
    """
    Range to the nearest wall along each ray, inf when nothing is hit within max_range.

    Args:
        origin: ray origin (x, y)
        angles: (B,) world-frame ray directions
        walls: (S, 2, 2) segments
        max_range: sensing limit

    Returns:
        (B,) ranges
    """
    angles = np.asarray(angles, dtype=float)
    if len(walls) == 0:
        return np.full(len(angles), np.inf)
    d = np.column_stack([np.cos(angles), np.sin(angles)])[:, None, :]
    p = walls[None, :, 0, :]
    e = walls[None, :, 1, :] - p
    w = p - np.asarray(origin, dtype=float)
    denom = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[..., 0] * e[..., 1] - w[..., 1] * e[..., 0]) / denom
        u = (w[..., 0] * d[..., 1] - w[..., 1] * d[..., 0]) / denom
    hit = (denom != 0) & (t > 1e-12) & (u >= 0.0) & (u <= 1.0)
    ranges = np.where(hit, t, np.inf).min(axis=1)
    return np.where(ranges <= max_range, ranges, np.inf)


def beam_angles(lidar: LidarSpec) -> Tuple[float, float, int]:
    increment = math.radians(lidar.increment_deg)
    count = int(round(lidar.fov_deg / lidar.increment_deg)) + 1
    if lidar.fov_deg >= 360.0:
        count -= 1
    return -math.radians(lidar.fov_deg) / 2.0, increment, count


def sample_lidar(pose: Pose2D, world: WorldSpec, lidar: LidarSpec, noise: SensorNoiseSpec,
                 rng: np.random.Generator, timestamp: float = 0.0, walls: Optional[np.ndarray] = None) -> LaserScan:
    angle_min, increment, count = beam_angles(lidar)
    angles = angle_min + increment * np.arange(count)
    walls = wall_array(world.walls) if walls is None else walls
    ranges = cast_rays((pose.x, pose.y), pose.theta + angles, walls, lidar.max_range)
    ranges = ranges + rng.standard_normal(count) * noise.lidar_range_noise
    ranges = np.where(np.isfinite(ranges), np.round(ranges, 4), np.inf)
    return LaserScan.from_ranges(timestamp, angle_min, increment, ranges, lidar.max_range)


def _even_odd_inside(xs: np.ndarray, ys: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """Even-odd rule over all wall segments, row by row."""
    inside = np.zeros((len(ys), len(xs)), dtype=bool)
    (x0, y0), (x1, y1) = walls[:, 0].T, walls[:, 1].T
    for r, y in enumerate(ys):
        spans = ((y0 <= y) & (y < y1)) | ((y1 <= y) & (y < y0))
        if not np.any(spans):
            continue
        cross = x0[spans] + (y - y0[spans]) * (x1[spans] - x0[spans]) / (y1[spans] - y0[spans])
        cross.sort()
        counts = len(cross) - np.searchsorted(cross, xs, side="right")
        inside[r] = counts % 2 == 1
    return inside


def ground_truth_raster(world: WorldSpec, grid: OccupancyGrid) -> np.ndarray:
    """
    Occupied/free/unknown classes for the cells of `grid`.

    Occupied: a wall passes within half a cell of the cell center. Free: the
    center lies inside the walled free space. Unknown: everything else.
    """
    walls = wall_array(world.walls)
    res = grid.resolution
    xs = grid.origin.x + (np.arange(grid.width) + 0.5) * res
    ys = grid.origin.y + (np.arange(grid.height) + 0.5) * res
    classes = np.full((grid.height, grid.width), UNKNOWN, dtype=np.int8)
    if len(walls) == 0:
        return classes

    classes[_even_odd_inside(xs, ys, walls)] = FREE
    for (ax, ay), (bx, by) in walls:
        c0 = max(int(math.floor((min(ax, bx) - grid.origin.x) / res)) - 1, 0)
        c1 = min(int(math.floor((max(ax, bx) - grid.origin.x) / res)) + 2, grid.width)
        r0 = max(int(math.floor((min(ay, by) - grid.origin.y) / res)) - 1, 0)
        r1 = min(int(math.floor((max(ay, by) - grid.origin.y) / res)) + 2, grid.height)
        if c0 >= c1 or r0 >= r1:
            continue
        cx, cy = np.meshgrid(xs[c0:c1], ys[r0:r1])
        ex, ey = bx - ax, by - ay
        length_sq = ex * ex + ey * ey
        u = np.clip(((cx - ax) * ex + (cy - ay) * ey) / length_sq, 0.0, 1.0) if length_sq > 0 else 0.0
        distance = np.hypot(cx - (ax + u * ex), cy - (ay + u * ey))
        block = classes[r0:r1, c0:c1]
        block[distance <= 0.5 * res] = OCCUPIED
    return classes


@dataclass
class Simulation:
    config: ScenarioConfig
    world: WorldSpec
    times: np.ndarray
    truth: List[Pose2D]
    odometry: List[Pose2D]
    fingerprints: List[Fingerprint] = field(default_factory=list)
    scans: List[LaserScan] = field(default_factory=list)
    sample_indices: List[int] = field(default_factory=list)

    def sample_truth(self) -> List[Pose2D]:
        return [self.truth[k] for k in self.sample_indices]


def run_simulation(config: ScenarioConfig) -> Simulation:
    """
    Generate every stream of a scenario in memory.

    Each stream draws from its own child of SeedSequence(config.seed).
    """
    world = config.world or default_world(config)
    waypoints = config.waypoints or corridor_waypoints(config)
    times, truth = generate_trajectory(world, waypoints, config.speed, config.dt)

    _, odometry_seed, wifi_seed, lidar_seed = np.random.SeedSequence(config.seed).spawn(4)
    odometry = corrupt_odometry(truth, config.noise, odometry_seed)

    stride = max(int(round(config.wifi_period / config.dt)), 1)
    indices = list(range(0, len(truth), stride))
    wifi_rng = np.random.default_rng(wifi_seed)
    lidar_rng = np.random.default_rng(lidar_seed)
    walls = wall_array(world.walls)
    fingerprints, scans = [], []
    for k in indices:
        t = round(float(times[k]), 6)
        fingerprints.append(sample_wifi(truth[k], world, config.noise, wifi_rng, t))
        scans.append(sample_lidar(truth[k], world, config.lidar, config.noise, lidar_rng, t, walls))

    logger.info(f"Simulated '{config.name}': {len(truth)} poses over {times[-1]:.1f} s, "
                f"{len(fingerprints)} WiFi/scan samples, {len(world.ap_positions)} APs")
    return Simulation(config, world, times, truth, odometry, fingerprints, scans, indices)


def write_simulation(sim: Simulation, out_dir: str) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "odometry": os.path.join(out_dir, "odometry.csv"),
        "wifi": os.path.join(out_dir, "wifi.csv"),
        "scans": os.path.join(out_dir, "scans.jsonl"),
        "ground_truth": os.path.join(out_dir, "ground_truth.tum"),
        "scenario": os.path.join(out_dir, "scenario.yaml"),
    }
    write_odometry(paths["odometry"], sim.times, sim.odometry)
    write_wifi_log(paths["wifi"], sim.fingerprints)
    write_scan_log(paths["scans"], sim.scans)
    write_tum(paths["ground_truth"], sim.times, sim.truth)
    scenario = sim.config.model_dump(mode="json")
    scenario["world"] = sim.world.model_dump(mode="json")
    with open(paths["scenario"], "w", encoding="utf-8") as handle:
        yaml.safe_dump(scenario, handle, sort_keys=True)
    return paths


def simulate_scenario(config: ScenarioConfig, out_dir: str) -> Dict[str, str]:
    """Simulate a scenario and write its logs; returns the written paths."""
    return write_simulation(run_simulation(config), out_dir)
