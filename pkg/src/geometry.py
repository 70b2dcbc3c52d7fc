"""
3D geometry for WeakGround
==========================

Axis-aligned boxes, IoU, and the spatial predicates behind the relation
library. Directional relations use one global frame:
x grows to the right, y grows away from the viewer, z grows upwards.
"""

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Sequence, Tuple

import numpy as np

from src.exceptions import ContractError

DEFAULT_MARGIN = 0.05
DEFAULT_RADIUS = 1.0

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box given by its center and full extents (meters)"""

    center: Vec3
    size: Vec3

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise ContractError(f"Box3 needs 3-d center and size, got {self.center} / {self.size}")
        if not all(s > 0.0 for s in self.size):
            raise ContractError(f"Box3 sizes must be strictly positive, got {self.size}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))

    @property
    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    @property
    def min_corner(self) -> Vec3:
        return tuple(c - s / 2.0 for c, s in zip(self.center, self.size))

    @property
    def max_corner(self) -> Vec3:
        return tuple(c + s / 2.0 for c, s in zip(self.center, self.size))

    def distance_to(self, other: "Box3") -> float:
        return math.dist(self.center, other.center)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"center": list(self.center), "size": list(self.size)}

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> "Box3":
        return cls(tuple(data["center"]), tuple(data["size"]))


class RelationId(IntEnum):
    """Relation library, in its fixed order"""

    LEFT = 0
    RIGHT = 1
    FRONT = 2
    BEHIND = 3
    ABOVE = 4
    BELOW = 5
    CLOSEST = 6
    FARTHEST = 7
    NEXT_TO = 8

    @property
    def label(self) -> str:
        return self.name.lower()


# Surface phrases per relation; the first one is the canonical rendering.
RELATION_PHRASES: Dict[RelationId, Tuple[str, ...]] = {
    RelationId.LEFT: ("to the left of", "left of", "on the left side of"),
    RelationId.RIGHT: ("to the right of", "right of", "on the right side of"),
    RelationId.FRONT: ("in front of", "at the front of", "ahead of"),
    RelationId.BEHIND: ("behind", "in back of", "at the back of"),
    RelationId.ABOVE: ("above", "over", "on top of"),
    RelationId.BELOW: ("below", "under", "beneath"),
    RelationId.CLOSEST: ("closest to", "nearest to", "nearest"),
    RelationId.FARTHEST: ("farthest from", "furthest from", "most distant from"),
    RelationId.NEXT_TO: ("next to", "beside", "adjacent to"),
}

# (axis, sign): the relation holds when sign * (subject - anchor) > margin
_DIRECTIONAL: Dict[RelationId, Tuple[int, float]] = {
    RelationId.LEFT: (0, -1.0),
    RelationId.RIGHT: (0, 1.0),
    RelationId.FRONT: (1, -1.0),
    RelationId.BEHIND: (1, 1.0),
    RelationId.ABOVE: (2, 1.0),
    RelationId.BELOW: (2, -1.0),
}


def iou_3d(a: Box3, b: Box3) -> float:
    """
    Intersection over union of two axis-aligned boxes

    Symmetric bit for bit: the intersection uses min/max per axis and the
    union adds the two volumes before subtracting. Volumes are taken from the
    corners so that iou_3d(a, a) is exactly 1.
    """
    a_low, a_high = np.array(a.min_corner), np.array(a.max_corner)
    b_low, b_high = np.array(b.min_corner), np.array(b.max_corner)
    extent = np.minimum(a_high, b_high) - np.maximum(a_low, b_low)
    if not (extent > 0.0).all():
        return 0.0
    intersection = float(extent.prod())
    union = (float((a_high - a_low).prod()) + float((b_high - b_low).prod())) - intersection
    return min(1.0, max(0.0, intersection / union))


def intersection_volume(a: Box3, b: Box3) -> float:
    extent = np.minimum(a.max_corner, b.max_corner) - np.maximum(a.min_corner, b.min_corner)
    return float(np.clip(extent, 0.0, None).prod())


def relation_holds(rel: RelationId, subject: Box3, anchor: Box3, context: Sequence[Box3],
                   margin: float = DEFAULT_MARGIN, radius: float = DEFAULT_RADIUS) -> bool:
    """
    Whether `subject` stands in relation `rel` to `anchor`

    Args:
        rel: Relation to test
        subject: Box the relation is said of
        anchor: Reference box
        context: Comparison set for closest / farthest (contains the subject;
            the anchor itself never competes)
        margin: Directional margin delta
        radius: Proximity radius rho for next_to

    Returns:
        True when the relation holds

    Raises:
        ContractError: If closest / farthest is asked with an empty context
    """
    rel = RelationId(rel)
    if rel in _DIRECTIONAL:
        axis, sign = _DIRECTIONAL[rel]
        return sign * (subject.center[axis] - anchor.center[axis]) > margin
    if rel is RelationId.NEXT_TO:
        return subject.distance_to(anchor) < radius

    if not context:
        raise ContractError(f"relation '{rel.label}' needs a non-empty context")
    own = subject.distance_to(anchor)
    for other in context:
        if other == subject or other == anchor:
            continue
        distance = other.distance_to(anchor)
        if rel is RelationId.CLOSEST and distance <= own:
            return False
        if rel is RelationId.FARTHEST and distance >= own:
            return False
    return True


def classify_relation(subject: Box3, anchor: Box3, context: Sequence[Box3],
                      margin: float = DEFAULT_MARGIN, radius: float = DEFAULT_RADIUS) -> List[RelationId]:
    """All library relations that hold, in library order"""
    return [rel for rel in RelationId if relation_holds(rel, subject, anchor, context, margin, radius)]
