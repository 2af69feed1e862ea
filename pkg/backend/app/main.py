import logging
import time
from datetime import datetime

from fastapi import Request
from fastapi.responses import JSONResponse

from app.api.slam_routes import router as slam_router
from app.config import configure_logging
from app.core.app_init import create_app, init_app
from app.core.errors import SlamError

configure_logging()
logger = logging.getLogger(__name__)

app = create_app()
app.include_router(slam_router, prefix="/api")


@app.on_event("startup")
async def startup():
    status = init_app()
    logger.info(f"Application initialized: {status}")


@app.get("/health")
async def health():
    """Health check used by run_api.py."""
    return {"status": "ok", "time": datetime.now().isoformat()}


@app.exception_handler(SlamError)
async def slam_error_handler(request: Request, exc: SlamError):
    status_code = 400 if exc.exit_code == 2 else 422 if exc.exit_code == 4 else 500
    return JSONResponse(status_code=status_code, content={"detail": str(exc), "exit_code": exc.exit_code})


# Add request logging middleware
@app.middleware("http")
async def log_requests(request: Request, call_next):
    """Log all incoming HTTP requests."""
    start_time = time.time()
    path = request.url.path
    method = request.method

    try:
        response = await call_next(request)
        process_time = time.time() - start_time
        logger.info(f"{method} {path} -> {response.status_code} ({process_time:.2f}s)")
        return response
    except Exception as e:
        logger.exception(f"ERROR processing {method} {path}: {e}")
        return JSONResponse(
            status_code=500,
            content={"detail": f"Internal server error: {str(e)}"}
        )
