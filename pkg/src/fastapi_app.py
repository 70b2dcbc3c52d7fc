import logging
from typing import Optional

from fastapi import FastAPI

from config.config import DEFAULT_CONFIG_FILE, Config
from routes import grounding, health
from routes.grounding import GroundingService
from src.exceptions import WeakGroundError

logger = logging.getLogger(__name__)

app = FastAPI(
    title="WeakGround API",
    description="Read-only API for parsing queries and grounding them in synthetic 3D scenes",
    version="1.0.0"
)


def load_serving_config() -> Config:
    """Serving configuration: environment variables first, then the config file"""
    return Config(DEFAULT_CONFIG_FILE if DEFAULT_CONFIG_FILE.exists() else None)


def configure_service(service: Optional[GroundingService]):
    """Share one grounding service between the routers"""
    grounding.set_grounding_service(service)
    health.set_grounding_service(service)


def setup_routes():
    """Setup and configure all routes"""
    config = load_serving_config()
    grounding.set_default_categories(config.get("gen.category_names"))
    checkpoint = config.get_serve_checkpoint()

    if checkpoint:
        try:
            configure_service(GroundingService(checkpoint, config.get_serve_data(), config.get("serve.chunk_size")))
            logger.info(f"Checkpoint loaded for serving: {checkpoint}")
        except (WeakGroundError, OSError) as e:
            logger.warning(f"Failed to load checkpoint {checkpoint}: {e}")
    else:
        logger.warning("No checkpoint configured (WEAKGROUND_CHECKPOINT). /grounding/infer will return 503.")

    app.include_router(health.router)
    app.include_router(grounding.router)


# Setup routes on startup
setup_routes()


@app.get("/")
def root():
    """Root endpoint with API information"""
    return {
        "message": "Welcome to WeakGround API",
        "version": "1.0.0",
        "endpoints": {
            "health": "/health",
            "parse": "/grounding/parse",
            "infer": "/grounding/infer"
        }
    }
