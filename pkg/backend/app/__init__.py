from typing import Any, Dict

# Background SLAM task records keyed by task id
slam_tasks: Dict[str, Dict[str, Any]] = {}
