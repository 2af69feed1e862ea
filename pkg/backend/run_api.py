"""
Simple script to start the FastAPI application with uvicorn
and perform a basic self-check to ensure the API is responding.
"""
import os
import sys
import tempfile
import time
import requests
import uvicorn
import threading
import webbrowser

def check_api(base_url="http://127.0.0.1:8000", retries=5, delay=1):
    """Check if the API is running by hitting the health endpoint."""
    for attempt in range(retries):
        try:
            print(f"Checking API health (attempt {attempt+1}/{retries})...")
            response = requests.get(f"{base_url}/health")
            if response.status_code == 200:
                print("✅ API is running and healthy!")
                print(f"Response: {response.json()}")
                return True
            else:
                print(f"API returned status code: {response.status_code}")
        except requests.RequestException as e:
            print(f"Error connecting to API: {str(e)}")

        if attempt < retries - 1:
            print(f"Retrying in {delay} seconds...")
            time.sleep(delay)

    print("❌ Could not connect to API after multiple attempts")
    return False

def test_slam_endpoint(base_url="http://127.0.0.1:8000", timeout=300):
    """Simulate a short scenario through the API, then run SLAM on it."""
    work_dir = tempfile.mkdtemp(prefix="slam_api_check_")
    data_dir = os.path.join(work_dir, "data")
    try:
        print(f"\nSimulating a one-lap scenario into {data_dir}...")
        response = requests.post(
            f"{base_url}/api/simulate",
            json={"scenario": {"name": "api_check", "extent": [30.0, 100.0], "n_aps": 60, "laps": 1,
                               "lidar": {"increment_deg": 1.0}},
                  "output_dir": data_dir},
        )
        if response.status_code != 200:
            print(f"❌ Simulation failed: {response.text}")
            return False
        paths = response.json()["paths"]
        print("✅ Logs written")

        config = {
            "odometry_path": paths["odometry"],
            "wifi_path": paths["wifi"],
            "scans_path": paths["scans"],
            "ground_truth_path": paths["ground_truth"],
            "output_dir": os.path.join(work_dir, "run"),
            "enable_wifi": False,
            "require_constraints": False,
            "grid": {"resolution": 0.1},
        }
        response = requests.post(f"{base_url}/api/slam", json={"config": config})
        if response.status_code != 200:
            print(f"❌ SLAM request failed: {response.text}")
            return False
        task_id = response.json()["task_id"]
        print(f"✅ Started task {task_id}")

        deadline = time.time() + timeout
        while time.time() < deadline:
            task = requests.get(f"{base_url}/api/slam/{task_id}").json()
            print(f"  {task['status']}: {task.get('current_step')} ({task.get('progress', 0)}%)")
            if task["status"] == "completed":
                metrics = requests.get(f"{base_url}/api/slam/{task_id}/artifacts/metrics")
                print(f"✅ Completed, metrics.json is {len(metrics.content)} bytes")
                return True
            if task["status"] == "error":
                print(f"❌ Task failed: {task.get('error')}")
                return False
            time.sleep(2)

        print("❌ Timed out waiting for the SLAM task")
        return False

    except Exception as e:
        print(f"❌ Error testing SLAM endpoint: {str(e)}")
        return False

def run_server():
    """Start the uvicorn server with the FastAPI app."""
    # Set PYTHONPATH to ensure imports work correctly
    current_dir = os.path.dirname(os.path.abspath(__file__))

    if current_dir not in sys.path:
        sys.path.append(current_dir)

    # Load environment variables
    try:
        from dotenv import load_dotenv
        load_dotenv()
        print("Loaded environment variables from .env file")
    except ImportError:
        print("python-dotenv not installed, skipping .env loading")

    # Start the server
    print("Starting FastAPI server...")
    uvicorn.run("app.main:app", host="0.0.0.0", port=8000, reload=True)

def open_browser():
    """Open the browser to the API documentation after a delay."""
    time.sleep(2)  # Wait for server to start
    webbrowser.open("http://127.0.0.1:8000/docs")
    print("\nOpened browser to API documentation")

    # Also run API tests
    time.sleep(1)
    if check_api():
        test_slam_endpoint()

if __name__ == "__main__":
    # Start browser in a separate thread
    browser_thread = threading.Thread(target=open_browser)
    browser_thread.daemon = True
    browser_thread.start()

    # Run the server (this will block until server stops)
    run_server()
