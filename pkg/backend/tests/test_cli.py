import json
import os

import pytest
import yaml

from app.cli import main


@pytest.fixture(scope="module")
def cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    logs, run = str(root / "logs"), str(root / "run")
    assert main(["simulate", "--scenario", "small", "--seed", "3", "--out", logs]) == 0
    assert main(["slam", "--input", logs, "--out", run, "--seed", "3"]) == 0
    return logs, run


def test_simulate_hands_pipeline_settings_to_slam(cli_run):
    logs, _ = cli_run
    for name in ("odometry.csv", "wifi.csv", "scans.jsonl", "ground_truth.tum", "scenario.yaml", "pipeline.yaml"):
        assert os.path.exists(os.path.join(logs, name)), name
    with open(os.path.join(logs, "pipeline.yaml")) as handle:
        pipeline = yaml.safe_load(handle)["pipeline"]
    assert pipeline["sequence"]["window_w"] == 40
    with open(os.path.join(logs, "scenario.yaml")) as handle:
        assert yaml.safe_load(handle)["seed"] == 3


def test_slam_writes_artifacts(cli_run):
    _, run = cli_run
    for name in ("trajectory.tum", "graph.g2o", "metrics.json", "diagnostics.json", "map.pgm", "map.yaml",
                 "errors.csv", "timing.json"):
        assert os.path.exists(os.path.join(run, name)), name
    with open(os.path.join(run, "diagnostics.json")) as handle:
        assert handle.read().count('"pairs_considered"') == 1


def test_eval_and_map_reuse_slam_output(cli_run, tmp_path, capsys):
    logs, run = cli_run
    capsys.readouterr()
    out = str(tmp_path / "eval.json")
    assert main(["eval", "--trajectory", os.path.join(run, "trajectory.tum"),
                 "--ground-truth", os.path.join(logs, "ground_truth.tum"), "--out", out]) == 0
    printed = json.loads(capsys.readouterr().out)
    with open(out) as handle:
        assert json.load(handle) == printed
    with open(os.path.join(run, "metrics.json")) as handle:
        final = json.load(handle)["trajectories"]["final"]
    assert printed["position_rmse_m"] == pytest.approx(final["position_rmse_m"], abs=1e-4)

    pgm = str(tmp_path / "map.pgm")
    assert main(["map", "--trajectory", os.path.join(run, "trajectory.tum"),
                 "--scans", os.path.join(logs, "scans.jsonl"), "--out", pgm, "--resolution", "0.2"]) == 0
    assert os.path.exists(pgm)
    with open(str(tmp_path / "map.yaml")) as handle:
        assert yaml.safe_load(handle)["resolution"] == 0.2


def test_missing_input_exits_with_input_error(tmp_path, capsys):
    code = main(["slam", "--input", str(tmp_path / "absent"), "--out", str(tmp_path / "run")])
    assert code == 2
    assert "error:" in capsys.readouterr().err


def test_odd_window_exits_with_input_error(cli_run, tmp_path):
    logs, _ = cli_run
    assert main(["slam", "--input", logs, "--out", str(tmp_path / "run"), "--window", "41"]) == 2


def test_unknown_scenario_exits_with_input_error(tmp_path):
    assert main(["simulate", "--scenario", "nowhere", "--seed", "1", "--out", str(tmp_path)]) == 2


def test_seed_is_required():
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--out", "x"])
    assert info.value.code == 2


def test_sweep_accepts_fractions_and_rejects_fractional_windows(cli_run, tmp_path):
    logs, _ = cli_run
    out = str(tmp_path / "sweep")
    assert main(["sweep", "--input", logs, "--out", out, "--field", "window_w", "--values", "20.5"]) == 2
    assert main(["sweep", "--input", logs, "--out", out, "--field", "extra_pose_fraction", "--values", "0.2"]) == 0
    assert os.path.exists(os.path.join(out, "extra_pose_fraction_0.2", "metrics.json"))
