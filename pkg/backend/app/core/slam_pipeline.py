"""
Two-pass WiFi + LiDAR SLAM over recorded logs, plus the profiling and
parameter sweep helpers built on it.
"""
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from app.core.errors import InsufficientConstraintsError, InvalidInputError
from app.core.evaluation import TrajectoryMetrics, evaluate, write_errors_csv
from app.core.geometry import Pose2D, Transform2D, interpolate_pose
from app.core.pose_graph import OptimizationResult, build_graph, optimize, save_g2o
from app.mapping.grid_map import OccupancyGrid, export_pgm, render
from app.matching.fingerprint import Fingerprint, load_wifi_log, similarity
from app.matching.scan_match import ScanMatcher, align_scans_to_nodes, icp, load_scan_log
from app.matching.sequence_loop import FingerprintTrack, LoopClosure, WifiLoopDetector, sequence_pose_errors
from app.models.slam_models import GridParams, IcpParams, LidarSpec, PipelineConfig, SensorNoiseSpec, WorldSpec
from app.sim.simulator import sample_lidar
from app.utils.log_io import load_odometry, read_tum, write_tum

logger = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1

ProgressCallback = Callable[[int, int, str, float], None]


@contextmanager
def output_lock(output_dir: str):
    """Hold an exclusive `.lock` file in the output directory."""
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise InvalidInputError(f"output directory {output_dir} is locked by another run ({path})") from exc
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield path
    finally:
        if os.path.exists(path):
            os.remove(path)


def _write_json(path: str, payload: Dict[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


@dataclass
class SlamResult:
    output_dir: str
    track: FingerprintTrack
    first_pass: OptimizationResult
    final: OptimizationResult
    closures: Dict[str, List[LoopClosure]]
    metrics: Dict[str, Any]
    diagnostics: Dict[str, Any]
    timing: Dict[str, float]
    artifacts: Dict[str, str] = field(default_factory=dict)
    grid: Optional[OccupancyGrid] = None

    @property
    def trajectory(self) -> List[Pose2D]:
        return self.final.graph.poses()


class WifiLidarSlam:
    """Batch WiFi + LiDAR SLAM over recorded logs."""

    TOTAL_STEPS = 7

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.logger = self._setup_logger()
        self.timing: Dict[str, float] = {}

    def _setup_logger(self):
        """Set up logging for the pipeline."""
        logger = logging.getLogger("WifiLidarSlam")
        logger.setLevel(logging.INFO)

        # Add console handler for terminal output
        if not logger.handlers:
            ch = logging.StreamHandler()
            ch.setLevel(logging.INFO)
            logger.addHandler(ch)
        logger.propagate = False

        return logger

    def _log_progress(self, message: str, step: int, total_steps: int,
                      callback: Optional[ProgressCallback] = None) -> None:
        """Log progress and call the callback if provided."""
        self.logger.info(f"[{step}/{total_steps}] {message}")

        if callback:
            progress = step / total_steps
            callback(step, total_steps, message, progress)

    @contextmanager
    def _timed(self, stage: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timing[stage] = self.timing.get(stage, 0.0) + (time.perf_counter() - start)

    def run(self, callback: Optional[ProgressCallback] = None) -> SlamResult:
        """
        Run every stage and write the artifacts into the output directory.

        Args:
            callback: Optional function called with (step, total, message, progress)

        Returns:
            SlamResult with the two optimization passes, metrics and artifact paths
        """
        with output_lock(self.config.output_dir):
            return self._run(callback)

    def _run(self, callback: Optional[ProgressCallback]) -> SlamResult:
        config = self.config
        total = self.TOTAL_STEPS
        self.timing = {}

        self.logger.info("\nWiFi + LiDAR SLAM")
        self.logger.info("=" * 46 + "\n")

        # Step 1: Ingest
        self._log_progress("Reading sensor logs", 1, total, callback)
        with self._timed("ingest"):
            odometry_times, odometry = load_odometry(config.odometry_path)
            fingerprints = load_wifi_log(config.wifi_path, config.burst_window)
            scans = load_scan_log(config.scans_path) if config.scans_path else []
            ground_truth = read_tum(config.ground_truth_path) if config.ground_truth_path else None
        self.logger.info(f"    ✓ {len(odometry)} odometry poses, {len(fingerprints)} fingerprints, {len(scans)} scans")

        # Step 2: Nodes at WiFi sample times
        self._log_progress("Building the fingerprint track", 2, total, callback)
        with self._timed("track"):
            track = FingerprintTrack.from_streams(odometry_times, odometry, fingerprints, config.max_stream_gap)
            scans_by_node = align_scans_to_nodes(track.timestamps, scans, config.icp.scan_time_tolerance)
        self.logger.info(f"    ✓ {len(track)} nodes, {len(scans_by_node)} with a scan")

        # Step 3: WiFi loop closures
        self._log_progress("Detecting WiFi fingerprint sequence loop closures", 3, total, callback)
        detector = WifiLoopDetector(config.sequence, config.similarity)
        wifi_closures: List[LoopClosure] = []
        with self._timed("wifi_loop_closure"):
            if config.enable_wifi:
                wifi_closures = detector.detect(track)
        self.logger.info(f"    ✓ {len(wifi_closures)} WiFi loop closures")

        # Step 4: First optimization
        self._log_progress("First pose graph optimization", 4, total, callback)
        with self._timed("first_optimization"):
            first_graph = build_graph(track, wifi_closures, config.information)
            first_pass = optimize(first_graph, config.optimizer)
        first_poses = first_pass.graph.poses()
        self.logger.info(f"    ✓ chi2 {first_pass.initial_chi2:.4g} -> {first_pass.final_chi2:.4g}")

        # Step 5: Scan matching on the optimized trajectory
        self._log_progress("Matching laser scans", 5, total, callback)
        matcher = ScanMatcher(scans_by_node, config.icp)
        proximity: List[LoopClosure] = []
        loops: List[LoopClosure] = []
        with self._timed("scan_matching"):
            if config.enable_close_scans and scans_by_node:
                proximity = matcher.proximity_constraints(track)
            if config.loop_fraction > 0 and scans_by_node:
                loops = matcher.loop_constraints(track, first_poses, config.sequence.min_loop_distance,
                                                 config.loop_fraction, config.seed)
        self.logger.info(f"    ✓ {len(proximity)} close-scan and {len(loops)} loop scan constraints")

        closures = {"wifi": wifi_closures, "close_scans": proximity, "loop_scans": loops}
        if config.require_constraints and not any(closures.values()):
            raise InsufficientConstraintsError(
                "no loop closure of any kind was found; the result would be raw odometry")

        # Step 6: Second optimization from the first-pass estimate
        self._log_progress("Second pose graph optimization", 6, total, callback)
        with self._timed("second_optimization"):
            final_graph = build_graph(track, wifi_closures + proximity + loops, config.information,
                                      initial_poses=first_poses)
            final = optimize(final_graph, config.optimizer)
        self.logger.info(f"    ✓ chi2 {final.initial_chi2:.4g} -> {final.final_chi2:.4g}")

        # Step 7: Map, evaluation and artifacts
        self._log_progress("Rendering the map and writing results", 7, total, callback)
        grid = None
        with self._timed("map"):
            if config.render_map and scans_by_node:
                nodes = sorted(scans_by_node)
                final_poses = final.graph.poses()
                grid = render([final_poses[k] for k in nodes], [scans_by_node[k] for k in nodes], config.grid)

        with self._timed("output"):
            metrics, errors = self._metrics(track, first_pass, final, closures, ground_truth)
            diagnostics = {
                "nodes": len(track),
                "nodes_with_scan": len(scans_by_node),
                "wifi_loop_detection": detector.report.to_dict(config.sequence.residual_threshold),
                "close_scan_matching": matcher.proximity_report.to_dict(),
                "loop_scan_matching": matcher.loop_report.to_dict(),
                "first_optimization": first_pass.to_dict(),
                "second_optimization": final.to_dict(),
            }
            artifacts = self._write_outputs(track, final, grid, metrics, diagnostics, errors)

        timing = {stage: round(seconds * 1000.0, 3) for stage, seconds in self.timing.items()}
        timing["total"] = round(sum(timing.values()), 3)
        timing_path = os.path.join(config.output_dir, "timing.json")
        _write_json(timing_path, {"stages_ms": timing})
        artifacts["timing"] = timing_path

        self.logger.info(f"    ✓ Results written to {config.output_dir}")
        return SlamResult(config.output_dir, track, first_pass, final, closures, metrics,
                          diagnostics, timing, artifacts, grid)

    def _metrics(self, track: FingerprintTrack, first_pass: OptimizationResult, final: OptimizationResult,
                 closures: Dict[str, List[LoopClosure]], ground_truth):
        metrics: Dict[str, Any] = {
            "schema_version": METRICS_SCHEMA_VERSION,
            "nodes": len(track),
            "constraint_counts": final.graph.edge_counts(),
            "closures": {name: len(items) for name, items in closures.items()},
            "chi2": {"first_pass": round(first_pass.final_chi2, 9), "final": round(final.final_chi2, 9)},
            "trajectories": {},
        }
        errors: Dict[str, TrajectoryMetrics] = {}
        if ground_truth is None:
            return metrics, errors

        truth_times, truth_poses = ground_truth
        for name, poses in (("odometry", track.poses), ("wifi_slam", first_pass.graph.poses()),
                            ("final", final.graph.poses())):
            errors[name] = evaluate(track.timestamps, poses, truth_times, truth_poses)
            metrics["trajectories"][name] = errors[name].to_dict()
            self.logger.info(f"    ✓ {name}: aligned RMSE {errors[name].position_rmse:.3f} m, "
                             f"raw RMSE {errors[name].raw_position_rmse:.3f} m")

        truth_at_nodes = [interpolate_pose(truth_times, truth_poses, t) for t in track.timestamps]
        closure_error = sequence_pose_errors(closures["wifi"], truth_at_nodes)
        if closure_error["count"]:
            metrics["wifi_closure_error"] = {k: round(v, 9) for k, v in closure_error.items()}
        else:
            metrics["wifi_closure_error"] = {"count": 0}
        return metrics, errors

    def _write_outputs(self, track, final: OptimizationResult, grid, metrics, diagnostics, errors) -> Dict[str, str]:
        out = self.config.output_dir
        artifacts = {
            "trajectory": os.path.join(out, "trajectory.tum"),
            "graph": os.path.join(out, "graph.g2o"),
            "metrics": os.path.join(out, "metrics.json"),
            "diagnostics": os.path.join(out, "diagnostics.json"),
        }
        write_tum(artifacts["trajectory"], track.timestamps, final.graph.poses())
        save_g2o(final.graph, artifacts["graph"])
        _write_json(artifacts["metrics"], metrics)
        _write_json(artifacts["diagnostics"], diagnostics)
        if grid is not None:
            artifacts["map"] = os.path.join(out, "map.pgm")
            artifacts["map_yaml"] = export_pgm(grid, artifacts["map"])
        if errors:
            artifacts["errors"] = os.path.join(out, "errors.csv")
            write_errors_csv(artifacts["errors"], errors)
        return artifacts


def run_slam(config: PipelineConfig, callback: Optional[ProgressCallback] = None) -> SlamResult:
    return WifiLidarSlam(config).run(callback)


def evaluate_files(trajectory_path: str, ground_truth_path: str, tolerance: float = 0.5) -> TrajectoryMetrics:
    times, poses = read_tum(trajectory_path)
    truth_times, truth = read_tum(ground_truth_path)
    return evaluate(times, poses, truth_times, truth, tolerance)


def render_map_files(trajectory_path: str, scans_path: str, out_path: str, params: GridParams = None,
                     tolerance: float = 0.5) -> str:
    """Render a map from a TUM trajectory and a scan log; returns the YAML sidecar path."""
    times, poses = read_tum(trajectory_path)
    aligned = align_scans_to_nodes(times, load_scan_log(scans_path), tolerance)
    if not aligned:
        raise InvalidInputError(f"no scan in {scans_path} lies within {tolerance} s of a trajectory pose")
    nodes = sorted(aligned)
    grid = render([poses[k] for k in nodes], [aligned[k] for k in nodes], params)
    return export_pgm(grid, out_path)


def _benchmark(call: Callable[[], Any], repeats: int) -> float:
    call()
    start = time.perf_counter()
    for _ in range(repeats):
        call()
    return (time.perf_counter() - start) * 1000.0 / repeats


def microbenchmarks(seed: int = 0) -> Dict[str, float]:
    """Milliseconds per similarity comparison of 44-AP fingerprints and per ICP of ~600-point scans."""
    rng = np.random.default_rng(seed)
    aps = [f"02:00:00:00:00:{k:02x}" for k in range(44)]
    fa = Fingerprint(0.0, {ap: float(v) for ap, v in zip(aps, rng.uniform(-90, -40, 44))})
    fb = Fingerprint(2.0, {ap: float(v) for ap, v in zip(aps, rng.uniform(-90, -40, 44))})

    room = WorldSpec(walls=[((0, 0), (10, 0)), ((10, 0), (10, 8)), ((10, 8), (0, 8)), ((0, 8), (0, 0))],
                     extent=(10.0, 8.0))
    lidar = LidarSpec(fov_deg=270.0, increment_deg=0.45, max_range=20.0)
    noise = SensorNoiseSpec.noiseless()
    source = sample_lidar(Pose2D(5.0, 4.0, 0.0), room, lidar, noise, rng)
    target = sample_lidar(Pose2D(5.3, 3.8, 0.1), room, lidar, noise, rng)

    return {
        "similarity_44_aps_ms": round(_benchmark(lambda: similarity(fa, fb), 2000), 6),
        "icp_points": int(len(source)),
        "icp_ms": round(_benchmark(lambda: icp(source, target, Transform2D.identity(), IcpParams()), 20), 6),
    }


def profile(config: PipelineConfig) -> Dict[str, Any]:
    """Stage wall-clock times of one pipeline run plus the per-call microbenchmarks."""
    slam = WifiLidarSlam(config)
    result = slam.run()
    report = {
        "stages_ms": result.timing,
        "microbenchmarks_ms": microbenchmarks(config.seed),
    }
    _write_json(os.path.join(config.output_dir, "profile.json"), report)
    return report


SEQUENCE_SWEEP_FIELDS = ("window_w", "k_neighbors")
SWEEP_FIELDS = SEQUENCE_SWEEP_FIELDS + ("extra_pose_fraction",)


def _sweep_config(config: PipelineConfig, field_name: str, value: float) -> PipelineConfig:
    output_dir = os.path.join(config.output_dir, f"{field_name}_{value:g}")
    if field_name == "extra_pose_fraction":
        if not 0.0 <= value <= 1.0:
            raise InvalidInputError(f"extra_pose_fraction must lie in [0, 1], got {value}")
        return config.model_copy(update={"extra_pose_fraction": float(value), "require_constraints": False,
                                         "render_map": False, "output_dir": output_dir})
    if float(value) != int(value):
        raise InvalidInputError(f"{field_name} takes integer values, got {value}")
    try:
        sequence = type(config.sequence).model_validate(
            {**config.sequence.model_dump(), field_name: int(value)})
    except ValidationError as exc:
        raise InvalidInputError(f"invalid {field_name}={value}: {exc}") from exc
    return config.model_copy(update={
        "sequence": sequence,
        "enable_wifi": True,
        "enable_close_scans": False,
        "extra_pose_fraction": 0.0,
        "require_constraints": False,
        "render_map": False,
        "output_dir": output_dir,
    })


def run_sweep(config: PipelineConfig, field_name: str, values: Sequence[float]) -> List[Dict[str, Any]]:
    """
    Re-run the pipeline for each value of one parameter.

    `window_w` and `k_neighbors` rows isolate the WiFi stage (scan matching
    off) and report closures, closure error and the first-pass RMSE.
    `extra_pose_fraction` rows run the full pipeline and report the final
    RMSE and the scan matching time. Each run writes into
    `<output_dir>/<field>_<value>`.
    """
    if field_name not in SWEEP_FIELDS:
        raise InvalidInputError(f"sweep field must be one of {SWEEP_FIELDS}, got {field_name}")
    rows = []
    for value in values:
        result = run_slam(_sweep_config(config, field_name, value))
        trajectories = result.metrics["trajectories"]
        if field_name in SEQUENCE_SWEEP_FIELDS:
            row = {
                field_name: int(value),
                "closures": len(result.closures["wifi"]),
                "closure_error": result.metrics.get("wifi_closure_error", {}),
            }
            if "wifi_slam" in trajectories:
                row["position_rmse_m"] = trajectories["wifi_slam"]["position_rmse_m"]
        else:
            row = {
                field_name: float(value),
                "loop_scan_closures": len(result.closures["loop_scans"]),
                "scan_matching_ms": result.timing.get("scan_matching", 0.0),
            }
            if "final" in trajectories:
                row["position_rmse_m"] = trajectories["final"]["position_rmse_m"]
        logger.info(f"Sweep {field_name}={value:g}: {row}")
        rows.append(row)
    return rows
