"""
Log-odds occupancy grid rendered from scans at (optimized) poses.

Cell (row, col) covers [origin + col*res, origin + (col+1)*res) in x and the
same in y for the row; row 0 is the lowest y.
"""
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import yaml

from app.core.errors import InvalidInputError, LogParseError
from app.core.geometry import Pose2D
from app.models.slam_models import GridParams

logger = logging.getLogger(__name__)

FREE = 0
OCCUPIED = 1
UNKNOWN = -1

PGM_VALUES = {OCCUPIED: 0, FREE: 254, UNKNOWN: 205}


@dataclass
class OccupancyGrid:
    resolution: float
    origin: Pose2D
    width: int
    height: int
    cells: np.ndarray
    params: GridParams = None

    def __post_init__(self):
        self.params = self.params or GridParams(resolution=self.resolution)
        self.cells = np.asarray(self.cells, dtype=float)
        if self.cells.shape != (self.height, self.width):
            raise InvalidInputError(f"cells shape {self.cells.shape} does not match {self.height}x{self.width}")

    @classmethod
    def empty(cls, origin_xy: Tuple[float, float], width: int, height: int,
              params: GridParams = None) -> "OccupancyGrid":
        params = params or GridParams()
        return cls(params.resolution, Pose2D(origin_xy[0], origin_xy[1], 0.0), width, height,
                   np.zeros((height, width)), params)

    def world_to_cell(self, points: np.ndarray) -> np.ndarray:
        """(N, 2) world points -> (N, 2) integer (col, row) indices, unbounded."""
        points = np.asarray(points, dtype=float).reshape(-1, 2)
        offset = points - np.array([self.origin.x, self.origin.y])
        return np.floor(offset / self.resolution).astype(np.int64)

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        xs = self.origin.x + (np.arange(self.width) + 0.5) * self.resolution
        ys = self.origin.y + (np.arange(self.height) + 0.5) * self.resolution
        return np.meshgrid(xs, ys)

    def probabilities(self) -> np.ndarray:
        return 1.0 - 1.0 / (1.0 + np.exp(self.cells))

    def classify(self) -> np.ndarray:
        p = self.probabilities()
        classes = np.full(self.cells.shape, UNKNOWN, dtype=np.int8)
        classes[p > self.params.occupied_threshold] = OCCUPIED
        classes[p < self.params.free_threshold] = FREE
        return classes

    def _accumulate(self, cols: np.ndarray, rows: np.ndarray, value: float, update: np.ndarray) -> None:
        inside = (cols >= 0) & (cols < self.width) & (rows >= 0) & (rows < self.height)
        np.add.at(update, (rows[inside], cols[inside]), value)

    def integrate_scan(self, pose: Pose2D, scan) -> None:
        """Trace every beam of `scan` from `pose` and apply one clamped update."""
        angles, ranges = scan.beams()
        if len(angles) == 0:
            return
        hit = np.isfinite(ranges)
        reach = np.where(hit, ranges, scan.max_range)
        world_angles = pose.theta + angles
        ends = np.column_stack([pose.x + reach * np.cos(world_angles), pose.y + reach * np.sin(world_angles)])
        start = self.world_to_cell(np.array([[pose.x, pose.y]]))[0]
        end = self.world_to_cell(ends)

        delta = end - start
        steps = np.max(np.abs(delta), axis=1)
        # cells strictly between start and end are misses; the end cell is a
        # hit for returns and a miss for max-range beams
        miss_counts = np.where(hit, np.maximum(steps - 1, 0), steps)
        total = int(miss_counts.sum())
        update = np.zeros_like(self.cells)
        if total:
            ray = np.repeat(np.arange(len(steps)), miss_counts)
            first = np.repeat(np.cumsum(miss_counts) - miss_counts, miss_counts)
            k = np.arange(total) - first + 1
            fraction = k / steps[ray]
            cells = start + np.rint(fraction[:, None] * delta[ray]).astype(np.int64)
            self._accumulate(cells[:, 0], cells[:, 1], self.params.miss_increment, update)
        endpoint = hit & (steps > 0)
        self._accumulate(end[endpoint, 0], end[endpoint, 1], self.params.hit_increment, update)
        np.clip(self.cells + update, -self.params.clamp, self.params.clamp, out=self.cells)


def render(trajectory: Sequence[Pose2D], scans: Sequence, params: GridParams = None) -> OccupancyGrid:
    """
    Occupancy grid of the scans placed at the trajectory poses.

    Args:
        trajectory: one pose per scan (poses with a None scan are skipped)
        scans: LaserScan objects paired with the trajectory, or an empty list
        params: resolution, log-odds increments and thresholds

    Returns:
        grid covering the trajectory bounding box plus the largest scan range
    """
    params = params or GridParams()
    if len(trajectory) == 0:
        raise InvalidInputError("cannot render a map from an empty trajectory")
    if scans and len(scans) != len(trajectory):
        raise InvalidInputError(f"{len(scans)} scans for {len(trajectory)} poses")

    present = [s for s in scans if s is not None]
    margin = max((s.max_range for s in present), default=0.0)
    xy = np.array([[p.x, p.y] for p in trajectory])
    res = params.resolution
    low = np.floor((xy.min(axis=0) - margin) / res) * res
    high = xy.max(axis=0) + margin
    width, height = (np.floor((high - low) / res).astype(int) + 1)
    grid = OccupancyGrid.empty((float(low[0]), float(low[1])), int(width), int(height), params)

    for pose, scan in zip(trajectory, scans):
        if scan is not None:
            grid.integrate_scan(pose, scan)
    logger.info(f"Rendered {len(present)} scans into a {grid.width}x{grid.height} grid at {res} m")
    return grid


def export_pgm(grid: OccupancyGrid, path: str) -> str:
    """
    Write the thresholded grid as binary PGM plus a YAML sidecar.

    Returns:
        path of the YAML sidecar
    """
    pixels = np.vectorize(PGM_VALUES.get, otypes=[np.uint8])(grid.classify())
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    sidecar = os.path.splitext(path)[0] + ".yaml"
    meta = {
        "image": os.path.basename(path),
        "resolution": float(grid.resolution),
        "origin": [float(grid.origin.x), float(grid.origin.y), float(grid.origin.theta)],
        "occupied_thresh": float(grid.params.occupied_threshold),
        "free_thresh": float(grid.params.free_threshold),
        "negate": 0,
    }
    try:
        with open(path, "wb") as handle:
            # top image row is the highest y
            handle.write(header + np.flipud(pixels).tobytes())
        with open(sidecar, "w", encoding="utf-8") as handle:
            yaml.safe_dump(meta, handle, sort_keys=True)
    except OSError as exc:
        raise OSError(f"cannot write map to {path}: {exc}") from exc
    return sidecar


def import_pgm(path: str) -> np.ndarray:
    """Cell classes (row 0 = lowest y) read back from an exported PGM."""
    with open(path, "rb") as handle:
        data = handle.read()
    fields = []
    position = 0
    while len(fields) < 4:
        while position < len(data) and data[position:position + 1].isspace():
            position += 1
        if data[position:position + 1] == b"#":
            position = data.index(b"\n", position) + 1
            continue
        start = position
        while position < len(data) and not data[position:position + 1].isspace():
            position += 1
        fields.append(data[start:position].decode("ascii"))
    position += 1
    if fields[0] != "P5" or fields[3] != "255":
        raise LogParseError(path, None, f"not an 8-bit binary PGM (header {fields})")
    width, height = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data[position:position + width * height], dtype=np.uint8)
    if pixels.size != width * height:
        raise LogParseError(path, None, "truncated PGM payload")
    pixels = np.flipud(pixels.reshape(height, width))
    classes = np.full(pixels.shape, UNKNOWN, dtype=np.int8)
    classes[pixels == PGM_VALUES[OCCUPIED]] = OCCUPIED
    classes[pixels == PGM_VALUES[FREE]] = FREE
    return classes


def cell_agreement(classes: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Fraction of cells known in both rasters whose classes match."""
    if classes.shape != truth.shape:
        raise InvalidInputError(f"raster shapes differ: {classes.shape} vs {truth.shape}")
    known = (classes != UNKNOWN) & (truth != UNKNOWN)
    if mask is not None:
        known &= mask
    if not np.any(known):
        return float("nan")
    return float(np.mean(classes[known] == truth[known]))
