"""
Command line entry point: simulate | slam | eval | map | profile | sweep.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 insufficient
constraints.
"""
import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import yaml

from app.config import configure_logging, load_pipeline_config, load_scenario, load_yaml, resolve_scenario_path
from app.core.errors import SlamError
from app.core.slam_pipeline import SWEEP_FIELDS, evaluate_files, profile, render_map_files, run_slam, run_sweep
from app.models.slam_models import GridParams, SensorNoiseSpec
from app.sim.simulator import simulate_scenario

logger = logging.getLogger(__name__)

PIPELINE_FILE = "pipeline.yaml"


def _add_pipeline_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="pipeline YAML (a scenario file's `pipeline` section is used)")
    parser.add_argument("--input", help="directory holding odometry.csv, wifi.csv, scans.jsonl, ground_truth.tum")
    parser.add_argument("--odometry", help="odometry.csv path")
    parser.add_argument("--wifi", help="wifi.csv path")
    parser.add_argument("--scans", help="scans.jsonl path")
    parser.add_argument("--ground-truth", help="ground_truth.tum path")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="seed for the loop scan subsampling")
    parser.add_argument("--no-wifi", action="store_true", help="skip WiFi loop closures")
    parser.add_argument("--no-close-scans", action="store_true", help="skip close-scan matching")
    parser.add_argument("--extra-pose-fraction", type=float, help="fraction of loop scan source nodes evaluated")
    parser.add_argument("--window", type=int, help="fingerprint sequence window size w")
    parser.add_argument("--k", type=int, help="neighbours averaged per position estimate")
    parser.add_argument("--geometric-mean", action="store_true", help="geometric-mean similarity variant")
    parser.add_argument("--no-map", action="store_true", help="skip the occupancy grid")


def _pipeline_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.input:
        for key, name in (("odometry_path", "odometry.csv"), ("wifi_path", "wifi.csv"),
                          ("scans_path", "scans.jsonl"), ("ground_truth_path", "ground_truth.tum")):
            path = os.path.join(args.input, name)
            if key in ("odometry_path", "wifi_path") or os.path.exists(path):
                overrides[key] = path
    for key, value in (("odometry_path", args.odometry), ("wifi_path", args.wifi),
                       ("scans_path", args.scans), ("ground_truth_path", args.ground_truth),
                       ("output_dir", args.out), ("seed", args.seed),
                       ("extra_pose_fraction", args.extra_pose_fraction)):
        if value is not None:
            overrides[key] = value
    if args.no_wifi:
        overrides["enable_wifi"] = False
    if args.no_close_scans:
        overrides["enable_close_scans"] = False
    if args.no_map:
        overrides["render_map"] = False
    sequence = {"window_w": args.window, "k_neighbors": args.k}
    overrides["sequence"] = {k: v for k, v in sequence.items() if v is not None}
    if args.geometric_mean:
        overrides["similarity"] = {"geometric_mean": True}
    return overrides


def _print_json(payload: Dict[str, Any]) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _pipeline_config(args: argparse.Namespace):
    """--config, else the pipeline.yaml that `simulate` left in --input."""
    path = args.config
    if path is None and args.input:
        candidate = os.path.join(args.input, PIPELINE_FILE)
        if os.path.exists(candidate):
            path = candidate
    return load_pipeline_config(path, _pipeline_overrides(args))


def cmd_simulate(args: argparse.Namespace) -> int:
    overrides: Dict[str, Any] = {"seed": args.seed}
    if args.laps is not None:
        overrides["laps"] = args.laps
    scenario_path = resolve_scenario_path(args.scenario)
    scenario = load_scenario(scenario_path, overrides)
    if args.noiseless:
        scenario = scenario.model_copy(update={"noise": SensorNoiseSpec.noiseless()})
    paths = simulate_scenario(scenario, args.out)
    pipeline = load_yaml(scenario_path).get("pipeline")
    if pipeline:
        paths["pipeline"] = os.path.join(args.out, PIPELINE_FILE)
        with open(paths["pipeline"], "w", encoding="utf-8") as handle:
            yaml.safe_dump({"pipeline": pipeline}, handle, sort_keys=True)
    _print_json(paths)
    return 0


def cmd_slam(args: argparse.Namespace) -> int:
    config = _pipeline_config(args)
    result = run_slam(config)
    _print_json({"artifacts": result.artifacts, "metrics": result.metrics})
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    metrics = evaluate_files(args.trajectory, args.ground_truth, args.tolerance).to_dict()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            json.dump(metrics, handle, indent=2, sort_keys=True)
    _print_json(metrics)
    return 0


def cmd_map(args: argparse.Namespace) -> int:
    params = GridParams(resolution=args.resolution) if args.resolution else GridParams()
    sidecar = render_map_files(args.trajectory, args.scans, args.out, params, args.tolerance)
    _print_json({"map": args.out, "map_yaml": sidecar})
    return 0


def cmd_profile(args: argparse.Namespace) -> int:
    config = _pipeline_config(args)
    _print_json(profile(config))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _pipeline_config(args)
    _print_json({"field": args.field, "rows": run_sweep(config, args.field, args.values)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wifi-lidar-slam",
                                     description="Batch WiFi fingerprint + LiDAR pose graph SLAM")
    parser.add_argument("--log-level", help="logging level (default from SLAM_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="generate synthetic sensor logs")
    simulate.add_argument("--scenario", default="default", help="scenario name or YAML path")
    simulate.add_argument("--seed", type=int, required=True, help="master seed")
    simulate.add_argument("--out", required=True, help="output directory for the logs")
    simulate.add_argument("--laps", type=int, help="override the number of laps")
    simulate.add_argument("--noiseless", action="store_true", help="disable every sensor noise source")
    simulate.set_defaults(func=cmd_simulate)

    slam = sub.add_parser("slam", help="run the full pipeline")
    _add_pipeline_arguments(slam)
    slam.set_defaults(func=cmd_slam)

    evaluate = sub.add_parser("eval", help="RMSE of a TUM trajectory against ground truth")
    evaluate.add_argument("--trajectory", required=True)
    evaluate.add_argument("--ground-truth", required=True)
    evaluate.add_argument("--tolerance", type=float, default=0.5, help="association window in seconds")
    evaluate.add_argument("--out", help="write the metrics JSON here")
    evaluate.set_defaults(func=cmd_eval)

    map_parser = sub.add_parser("map", help="render an occupancy grid from a trajectory and scans")
    map_parser.add_argument("--trajectory", required=True)
    map_parser.add_argument("--scans", required=True)
    map_parser.add_argument("--out", required=True, help="PGM path; the YAML sidecar goes next to it")
    map_parser.add_argument("--resolution", type=float)
    map_parser.add_argument("--tolerance", type=float, default=0.5)
    map_parser.set_defaults(func=cmd_map)

    profile_parser = sub.add_parser("profile", help="stage timings and microbenchmarks")
    _add_pipeline_arguments(profile_parser)
    profile_parser.set_defaults(func=cmd_profile)

    sweep = sub.add_parser("sweep", help="window size, k or loop scan fraction sweep")
    _add_pipeline_arguments(sweep)
    sweep.add_argument("--field", choices=SWEEP_FIELDS, required=True)
    sweep.add_argument("--values", type=float, nargs="+", required=True,
                       help="integers for window_w and k_neighbors, fractions in [0, 1] for extra_pose_fraction")
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        configure_logging(args.log_level)
        return args.func(args)
    except SlamError as exc:
        logger.error(str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
