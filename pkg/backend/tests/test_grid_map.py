import numpy as np
import pytest
import yaml

from app.core.errors import InvalidInputError
from app.core.geometry import Pose2D
from app.mapping.grid_map import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    OccupancyGrid,
    cell_agreement,
    export_pgm,
    import_pgm,
    render,
)
from app.matching.scan_match import LaserScan
from app.models.slam_models import GridParams, LidarSpec, SensorNoiseSpec, WorldSpec
from app.sim.simulator import ground_truth_raster, sample_lidar


def test_single_ray_updates_nineteen_misses_and_one_hit():
    params = GridParams(resolution=0.05)
    grid = OccupancyGrid.empty((-1.025, -1.025), 60, 60, params)
    scan = LaserScan.from_ranges(0.0, 0.0, 0.1, [1.0], 20.0)
    grid.integrate_scan(Pose2D(0.0, 0.0, 0.0), scan)
    row = grid.cells[20]
    assert np.count_nonzero(grid.cells) == 20
    assert np.all(row[21:40] == params.miss_increment)
    assert row[40] == params.hit_increment
    assert row[20] == 0.0


def test_max_range_beam_only_clears():
    params = GridParams(resolution=0.5)
    grid = OccupancyGrid.empty((-0.25, -0.25), 10, 3, params)
    scan = LaserScan.from_ranges(0.0, 0.0, 0.1, [None], 2.0)
    grid.integrate_scan(Pose2D(0.0, 0.0, 0.0), scan)
    assert np.all(grid.cells[0, 1:5] == params.miss_increment)
    assert np.count_nonzero(grid.cells) == 4


def test_log_odds_are_clamped():
    params = GridParams(resolution=0.5, clamp=1.0)
    grid = OccupancyGrid.empty((-0.25, -0.25), 6, 3, params)
    scan = LaserScan.from_ranges(0.0, 0.0, 0.1, [2.0], 20.0)
    for _ in range(10):
        grid.integrate_scan(Pose2D(0.0, 0.0, 0.0), scan)
    assert grid.cells.max() == 1.0
    assert grid.cells.min() == -1.0


def test_zero_scans_leave_everything_unknown():
    grid = render([Pose2D(0, 0, 0), Pose2D(3, 1, 0)], [], GridParams(resolution=0.25))
    assert np.all(grid.cells == 0.0)
    assert np.all(grid.classify() == UNKNOWN)


def test_empty_trajectory_is_rejected():
    with pytest.raises(InvalidInputError):
        render([], [])


def test_room_map_matches_ground_truth_raster():
    # walls sit 0.03 m inside a cell so hits and the raster agree on the wall column
    x0, y0, x1, y1 = 0.03, 0.03, 10.03, 8.03
    walls = [((x0, y0), (x1, y0)), ((x1, y0), (x1, y1)), ((x1, y1), (x0, y1)), ((x0, y1), (x0, y0))]
    room = WorldSpec(walls=walls, extent=(11.0, 9.0))
    lidar = LidarSpec(fov_deg=360.0, increment_deg=0.25, max_range=20.0)
    rng = np.random.default_rng(0)
    poses = [Pose2D(x, y, 0.4 * k) for k, (x, y) in enumerate([(2.5, 2.0), (5.0, 4.0), (7.5, 6.0), (2.5, 6.0), (7.5, 2.0)])]
    scans = [sample_lidar(p, room, lidar, SensorNoiseSpec.noiseless(), rng) for p in poses]
    grid = render(poses, scans, GridParams(resolution=0.1))
    classes = grid.classify()
    truth = ground_truth_raster(room, grid)
    assert cell_agreement(classes, truth) >= 0.98
    p = grid.probabilities()
    interior = truth == FREE
    assert np.mean(p[interior] < 0.2) >= 0.98


def test_all_unknown_pgm_payload(tmp_path):
    grid = OccupancyGrid.empty((0.0, 0.0), 2, 2, GridParams(resolution=0.5))
    path = tmp_path / "map.pgm"
    sidecar = export_pgm(grid, str(path))
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([205] * 4)
    with open(sidecar) as handle:
        meta = yaml.safe_load(handle)
    assert meta["resolution"] == 0.5
    assert meta["origin"] == [0.0, 0.0, 0.0]


def test_pgm_rows_run_top_down(tmp_path):
    params = GridParams(resolution=1.0)
    cells = np.array([[5.0, -5.0], [0.0, 0.0]])
    grid = OccupancyGrid(1.0, Pose2D(0, 0, 0), 2, 2, cells, params)
    path = tmp_path / "map.pgm"
    export_pgm(grid, str(path))
    payload = path.read_bytes()[len(b"P5\n2 2\n255\n"):]
    # row 0 (lowest y) is written last
    assert list(payload) == [205, 205, 0, 254]
    assert np.array_equal(import_pgm(str(path)), grid.classify())


def test_export_is_byte_deterministic(tmp_path):
    rng = np.random.default_rng(2)
    grid = OccupancyGrid(0.1, Pose2D(-1, -1, 0), 7, 5, rng.uniform(-3, 3, (5, 7)), GridParams(resolution=0.1))
    first, second = tmp_path / "a.pgm", tmp_path / "b.pgm"
    export_pgm(grid, str(first))
    export_pgm(grid, str(second))
    assert first.read_bytes() == second.read_bytes()


def test_cell_agreement_ignores_unknown():
    classes = np.array([[FREE, OCCUPIED, UNKNOWN]])
    truth = np.array([[FREE, FREE, OCCUPIED]])
    assert cell_agreement(classes, truth) == 0.5


def room_scans(seed=0):
    walls = [((0.03, 0.03), (10.03, 0.03)), ((10.03, 0.03), (10.03, 8.03)),
             ((10.03, 8.03), (0.03, 8.03)), ((0.03, 8.03), (0.03, 0.03))]
    room = WorldSpec(walls=walls, extent=(11.0, 9.0))
    lidar = LidarSpec(fov_deg=360.0, increment_deg=1.0, max_range=6.0)
    rng = np.random.default_rng(seed)
    poses = [Pose2D(x, y, 0.3 * k) for k, (x, y) in enumerate([(2.5, 2.0), (5.0, 4.0), (7.5, 6.0), (2.5, 6.0)])]
    return poses, [sample_lidar(p, room, lidar, SensorNoiseSpec(), rng) for p in poses]


def test_scan_order_does_not_change_the_map():
    poses, scans = room_scans()
    params = GridParams(resolution=0.1, clamp=1e6)
    forward = render(poses, scans, params)
    backward = render(poses[::-1], scans[::-1], params)
    assert (forward.width, forward.height) == (backward.width, backward.height)
    assert np.allclose(forward.cells, backward.cells, atol=1e-9)


def test_whole_cell_shift_moves_the_map_by_whole_cells():
    params = GridParams(resolution=0.25)
    rng = np.random.default_rng(3)
    ranges = [None if k % 7 == 0 else r for k, r in enumerate(rng.uniform(0.5, 3.0, 90))]
    scan = LaserScan.from_ranges(0.0, -np.pi, 2 * np.pi / 90, ranges, 3.5)
    here = OccupancyGrid.empty((0.0, 0.0), 40, 40, params)
    there = OccupancyGrid.empty((0.0, 0.0), 40, 40, params)
    here.integrate_scan(Pose2D(4.1, 4.3, 0.4), scan)
    there.integrate_scan(Pose2D(4.1 + 3 * 0.25, 4.3 + 2 * 0.25, 0.4), scan)
    # rows follow y, columns follow x
    assert np.array_equal(there.cells, np.roll(here.cells, (2, 3), axis=(0, 1)))


def test_each_beam_marks_one_hit_and_only_misses_before_it():
    params = GridParams(resolution=0.1)
    pose = Pose2D(0.3, -0.2, 0.7)
    rng = np.random.default_rng(5)
    for angle in np.linspace(-np.pi, np.pi, 72, endpoint=False):
        r = float(rng.uniform(0.3, 4.0))
        grid = OccupancyGrid.empty((-5.0, -5.0), 100, 100, params)
        grid.integrate_scan(pose, LaserScan.from_ranges(0.0, angle, 0.1, [r], 20.0))
        end = pose.theta + angle
        end_cell = grid.world_to_cell(np.array([[pose.x + r * np.cos(end), pose.y + r * np.sin(end)]]))[0]
        start_cell = grid.world_to_cell(np.array([[pose.x, pose.y]]))[0]
        steps = int(np.max(np.abs(end_cell - start_cell)))

        assert set(np.unique(grid.cells)) <= {0.0, params.miss_increment, params.hit_increment}
        hits = np.argwhere(grid.cells == params.hit_increment)
        assert hits.tolist() == [[end_cell[1], end_cell[0]]]
        assert np.count_nonzero(grid.cells == params.miss_increment) == steps - 1
        assert grid.cells[start_cell[1], start_cell[0]] == 0.0
