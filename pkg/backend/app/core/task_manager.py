import logging
import traceback
from datetime import datetime

from app import slam_tasks
from app.core.errors import SlamError
from app.core.slam_pipeline import WifiLidarSlam
from app.models.slam_models import PipelineConfig

logger = logging.getLogger(__name__)


def new_task_record(task_id: str, config: PipelineConfig) -> dict:
    return {
        "task_id": task_id,
        "status": "pending",
        "progress": 0.0,
        "current_step": 0,
        "message": "Queued",
        "status_details": "Waiting to start",
        "output_dir": config.output_dir,
        "start_time": datetime.now().isoformat(),
    }


def run_slam_task(task_id: str, config: PipelineConfig):
    """Run a SLAM pipeline task in the background."""
    task = slam_tasks[task_id]
    try:
        task["status"] = "running"
        task["status_details"] = "Starting SLAM pipeline..."
        logger.info(f"Starting SLAM task {task_id} writing to {config.output_dir}")

        def progress_callback(step, total_steps, message, progress):
            task["progress"] = progress
            task["current_step"] = step
            task["message"] = message
            task["status_details"] = f"Step {step}/{total_steps}: {message}"

        result = WifiLidarSlam(config).run(callback=progress_callback)

        task["status"] = "completed"
        task["result"] = {
            "output_dir": result.output_dir,
            "artifacts": result.artifacts,
            "metrics": result.metrics,
            "constraint_counts": result.final.graph.edge_counts(),
        }
        task["completion_time"] = datetime.now().isoformat()
        task["status_details"] = "SLAM completed successfully"
        logger.info(f"Task {task_id} completed successfully")

    except SlamError as e:
        logger.error(f"Task {task_id} failed: {e}")
        task["status"] = "error"
        task["error"] = str(e)
        task["exit_code"] = e.exit_code
        task["traceback"] = traceback.format_exc()
        task["status_details"] = f"Error during SLAM: {e}"

    except Exception as e:
        traceback_str = traceback.format_exc()
        logger.error(f"Task {task_id} crashed: {e}\n{traceback_str}")
        task["status"] = "error"
        task["error"] = str(e)
        task["traceback"] = traceback_str
        task["status_details"] = f"Error in SLAM task: {e}"
