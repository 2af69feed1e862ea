import glob
import os

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.config import SLAM_CORS_ORIGINS, SLAM_OUTPUT_DIR, SLAM_SCENARIO_DIR


def create_app():
    """FastAPI app for the simulator and the SLAM pipeline."""
    app = FastAPI(
        title="WiFi-LiDAR-SLAM API",
        description="Simulate sensor logs and run batch WiFi + LiDAR SLAM over them",
        version="1.0.0"
    )

    app.add_middleware(
        CORSMiddleware,
        allow_origins=SLAM_CORS_ORIGINS,
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )

    return app


def available_scenarios(scenario_dir: str = SLAM_SCENARIO_DIR):
    """Names of the scenario files bundled in `scenario_dir`."""
    paths = glob.glob(os.path.join(scenario_dir, "*.yaml"))
    return sorted(os.path.splitext(os.path.basename(p))[0] for p in paths)


def init_app(output_dir: str = SLAM_OUTPUT_DIR, scenario_dir: str = SLAM_SCENARIO_DIR):
    """Create the default output directory and list the bundled scenarios."""
    os.makedirs(output_dir, exist_ok=True)
    return {
        "status": "initialized",
        "output_dir": os.path.abspath(output_dir),
        "scenarios": available_scenarios(scenario_dir),
    }
