import logging
import os
import time
from datetime import datetime

from fastapi import APIRouter, BackgroundTasks, HTTPException
from fastapi.responses import FileResponse

from app import slam_tasks
from app.core.app_init import available_scenarios
from app.core.errors import SlamError
from app.core.task_manager import new_task_record, run_slam_task
from app.models.slam_models import SimulateRequest, SlamRequest, TaskResponse
from app.sim.simulator import simulate_scenario

logger = logging.getLogger(__name__)

# Create router
router = APIRouter()

ARTIFACT_MEDIA_TYPES = {
    ".json": "application/json",
    ".tum": "text/plain",
    ".csv": "text/csv",
    ".yaml": "application/x-yaml",
    ".g2o": "text/plain",
    ".pgm": "image/x-portable-graymap",
}


@router.post("/simulate")
async def simulate(request: SimulateRequest):
    """Generate a synthetic scenario and write its sensor logs."""
    try:
        paths = simulate_scenario(request.scenario, request.output_dir)
    except SlamError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except OSError as e:
        raise HTTPException(status_code=500, detail=f"Error writing logs: {e}")
    return {"status": "completed", "scenario": request.scenario.name, "paths": paths}


@router.post("/slam", response_model=TaskResponse)
async def start_slam(request: SlamRequest, background_tasks: BackgroundTasks):
    """Start a SLAM run over recorded logs in the background."""
    config = request.config
    for path in (config.odometry_path, config.wifi_path, config.scans_path, config.ground_truth_path):
        if path and not os.path.exists(path):
            raise HTTPException(status_code=400, detail=f"Input log not found: {path}")

    task_id = f"slam_{datetime.now().strftime('%Y%m%d%H%M%S%f')}_{abs(hash(config.output_dir + str(time.time()))) % 10000}"
    slam_tasks[task_id] = new_task_record(task_id, config)
    logger.info(f"Starting new SLAM task with ID: {task_id}")

    background_tasks.add_task(run_slam_task, task_id=task_id, config=config)

    return {
        "task_id": task_id,
        "status": "pending",
        "message": f"SLAM started, results go to {config.output_dir}",
    }


@router.get("/slam/{task_id}")
async def get_slam_status(task_id: str):
    """Check the status of a SLAM task."""
    if task_id not in slam_tasks:
        raise HTTPException(status_code=404, detail=f"SLAM task {task_id} not found")

    return slam_tasks[task_id]


@router.get("/slam/{task_id}/artifacts/{name}")
async def download_artifact(task_id: str, name: str):
    """Download one artifact (trajectory, map, metrics, ...) of a completed task."""
    if task_id not in slam_tasks:
        raise HTTPException(status_code=404, detail=f"SLAM task {task_id} not found")

    task = slam_tasks[task_id]

    if task["status"] != "completed":
        raise HTTPException(status_code=400, detail="SLAM task not yet completed")

    artifacts = task["result"]["artifacts"]
    if name not in artifacts:
        raise HTTPException(status_code=404, detail=f"Unknown artifact '{name}'; available: {sorted(artifacts)}")

    file_path = artifacts[name]
    if not os.path.exists(file_path):
        raise HTTPException(status_code=404, detail="Artifact file not found")

    media_type = ARTIFACT_MEDIA_TYPES.get(os.path.splitext(file_path)[1], "application/octet-stream")
    return FileResponse(path=file_path, filename=os.path.basename(file_path), media_type=media_type)


@router.get("/scenarios")
async def list_scenarios():
    """Names accepted by `simulate --scenario`."""
    return {"scenarios": available_scenarios()}
