"""
Trajectory evaluation against ground truth.
"""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from app.core.errors import InvalidInputError
from app.core.geometry import Pose2D, Transform2D, normalize_angles, rigid_fit, transform_points

logger = logging.getLogger(__name__)


def associate(times: Sequence[float], reference_times: Sequence[float],
              tolerance: float = 0.5) -> List[Tuple[int, int]]:
    """Pair each estimate with the nearest reference timestamp within `tolerance` seconds."""
    reference = np.asarray(reference_times, dtype=float)
    if len(reference) == 0:
        return []
    order = np.argsort(reference, kind="stable")
    ordered = reference[order]
    pairs = []
    for k, t in enumerate(times):
        idx = int(np.searchsorted(ordered, t))
        best = min((c for c in (idx - 1, idx) if 0 <= c < len(ordered)), key=lambda c: abs(ordered[c] - t))
        if abs(ordered[best] - t) <= tolerance:
            pairs.append((k, int(order[best])))
    return pairs


@dataclass
class TrajectoryMetrics:
    pairs: int
    position_rmse: float
    orientation_rmse: float
    raw_position_rmse: float
    raw_orientation_rmse: float
    alignment: Transform2D
    timestamps: List[float] = field(default_factory=list)
    position_errors: List[float] = field(default_factory=list)
    orientation_errors: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "pairs": self.pairs,
            "position_rmse_m": round(self.position_rmse, 9),
            "orientation_rmse_rad": round(self.orientation_rmse, 9),
            "raw_position_rmse_m": round(self.raw_position_rmse, 9),
            "raw_orientation_rmse_rad": round(self.raw_orientation_rmse, 9),
            "alignment": {
                "dx": round(self.alignment.dx, 9),
                "dy": round(self.alignment.dy, 9),
                "dtheta": round(self.alignment.dtheta, 9),
            },
        }


def _rmse(values: np.ndarray) -> float:
    return float(math.sqrt(np.mean(np.square(values))))


def evaluate(times: Sequence[float], poses: Sequence[Pose2D], reference_times: Sequence[float],
             reference: Sequence[Pose2D], tolerance: float = 0.5) -> TrajectoryMetrics:
    """
    Position and orientation RMSE of an estimate against ground truth.

    The estimate is rigidly aligned to the ground truth (rotation and
    translation, no scale) before the aligned errors are taken; the raw
    errors use the estimate as is.

    Raises:
        InvalidInputError: fewer than 2 pose pairs within `tolerance` seconds
    """
    pairs = associate(times, reference_times, tolerance)
    if len(pairs) < 2:
        raise InvalidInputError(f"only {len(pairs)} poses could be associated with the ground truth")

    est = np.array([poses[i].as_array() for i, _ in pairs])
    ref = np.array([reference[j].as_array() for _, j in pairs])

    raw_position = np.hypot(*(est[:, :2] - ref[:, :2]).T)
    raw_orientation = normalize_angles(est[:, 2] - ref[:, 2])

    alignment = rigid_fit(est[:, :2], ref[:, :2])
    aligned_xy = transform_points(alignment, est[:, :2])
    position = np.hypot(*(aligned_xy - ref[:, :2]).T)
    orientation = normalize_angles(est[:, 2] + alignment.dtheta - ref[:, 2])

    return TrajectoryMetrics(
        pairs=len(pairs),
        position_rmse=_rmse(position),
        orientation_rmse=_rmse(orientation),
        raw_position_rmse=_rmse(raw_position),
        raw_orientation_rmse=_rmse(raw_orientation),
        alignment=alignment,
        timestamps=[float(times[i]) for i, _ in pairs],
        position_errors=[float(v) for v in position],
        orientation_errors=[float(v) for v in orientation],
    )


def write_errors_csv(path: str, series: Dict[str, TrajectoryMetrics]) -> None:
    """Per-pose aligned errors of every evaluated trajectory, one row per pose."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["trajectory", "timestamp_s", "position_error_m", "orientation_error_rad"])
        for name, metrics in series.items():
            for t, p, o in zip(metrics.timestamps, metrics.position_errors, metrics.orientation_errors):
                writer.writerow([name, f"{t:.6f}", f"{p:.6f}", f"{o:.6f}"])
