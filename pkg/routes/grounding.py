"""
Grounding routes for the WeakGround FastAPI application
=======================================================

Read-only endpoints over a trained checkpoint: query parsing and grounding of
a query in a stored scene. Both go through the same parser and Grounder as
the command line.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field

from src.exceptions import ParseError
from src.file_manager import DatasetFileManager
from src.grounder import Grounder
from src.queryparse import parse
from src.synthworld import DEFAULT_CATEGORIES, Scene

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/grounding", tags=["grounding"])


class GroundingService:
    """A loaded checkpoint plus the scenes it can be queried against"""

    def __init__(self, checkpoint_path: Union[str, Path], data_path: Optional[Union[str, Path]] = None,
                 chunk_size: int = 64):
        self.checkpoint_path = str(checkpoint_path)
        self.grounder = Grounder.from_checkpoint(checkpoint_path)
        self.grounder.chunk_size = chunk_size
        self.data_path = str(data_path) if data_path else None
        self.scenes: Dict[str, Scene] = {}
        if data_path:
            scenes, _ = DatasetFileManager().read_scenes(data_path, mode="weak")
            self.scenes = {scene.scene_id: scene for scene in scenes}
        logger.info(f"Serving {self.checkpoint_path} with {len(self.scenes)} scenes")

    @property
    def category_names(self) -> Sequence[str]:
        return self.grounder.model.category_names

    def status(self) -> Dict:
        return {
            "checkpoint": self.checkpoint_path,
            "checksum": self.grounder.model.checksum(),
            "dataset": self.data_path,
            "scenes": len(self.scenes),
        }


# Global grounding service
grounding_service: Optional[GroundingService] = None
default_category_names: List[str] = list(DEFAULT_CATEGORIES)


def set_grounding_service(service: Optional[GroundingService]):
    """Set the service used by the grounding endpoints"""
    global grounding_service
    grounding_service = service


def set_default_categories(names: Sequence[str]):
    """Category names used for parsing when no checkpoint is loaded"""
    global default_category_names
    default_category_names = list(names)


class ParseRequest(BaseModel):
    query: str


class InferRequest(BaseModel):
    scene_id: str
    query: str


class InferResponse(BaseModel):
    scene_id: str
    proposal_index: int
    branch: str
    box: Dict[str, List[float]]
    max_p_c: float
    max_p_f: Optional[float] = None
    proposals: int = Field(..., ge=1)


@router.post("/parse")
def parse_query(request: ParseRequest) -> Dict:
    """Parse a query into its target phrase, noun phrases and relation triples"""
    names = grounding_service.category_names if grounding_service else default_category_names
    try:
        return parse(request.query, names).to_dict()
    except ParseError as e:
        raise HTTPException(status_code=422, detail=str(e))


@router.post("/infer", response_model=InferResponse)
def infer_query(request: InferRequest) -> InferResponse:
    """Ground a query in one stored scene"""
    if not grounding_service:
        raise HTTPException(status_code=503, detail="No checkpoint configured. Set WEAKGROUND_CHECKPOINT.")
    if not grounding_service.scenes:
        raise HTTPException(status_code=503, detail="No dataset configured. Set WEAKGROUND_DATA.")

    scene = grounding_service.scenes.get(request.scene_id)
    if scene is None:
        raise HTTPException(status_code=404, detail=f"Unknown scene: {request.scene_id}")

    try:
        result = grounding_service.grounder.infer(scene.proposals, request.query)
    except ParseError as e:
        raise HTTPException(status_code=422, detail=str(e))

    return InferResponse(
        scene_id=scene.scene_id,
        proposal_index=result.proposal_index,
        branch=result.branch,
        box=result.box.to_dict(),
        max_p_c=result.max_category,
        max_p_f=result.max_instance,
        proposals=len(scene.proposals),
    )
