"""
Health check routes for the WeakGround FastAPI application
==========================================================

Reports whether a checkpoint and a dataset are loaded.
"""

from fastapi import APIRouter
from typing import Dict, Any, Optional

from routes.grounding import GroundingService

router = APIRouter(prefix="/health", tags=["health"])

# Global grounding service
grounding_service: Optional[GroundingService] = None


def set_grounding_service(service: Optional[GroundingService]):
    """Set the service whose status is reported"""
    global grounding_service
    grounding_service = service


@router.get("/")
def health_check() -> Dict[str, Any]:
    """Health check endpoint reporting the loaded checkpoint and dataset"""
    if not grounding_service:
        return {
            "status": "healthy",
            "checkpoint": "not_configured",
            "dataset": "not_configured",
            "message": "No checkpoint loaded; /grounding/infer is unavailable",
        }

    status = grounding_service.status()
    return {
        "status": "healthy",
        "checkpoint": "loaded",
        "checkpoint_path": status["checkpoint"],
        "checksum": status["checksum"],
        "dataset": "loaded" if status["scenes"] else "not_configured",
        "scenes": status["scenes"],
    }


@router.get("/ping")
def ping() -> Dict[str, str]:
    """Simple ping endpoint"""
    return {"message": "pong"}
