"""
Synthetic world for WeakGround
==============================

Generates rooms of non-overlapping objects, simulates a pre-trained detector
over them, and writes template queries whose stated relation is true and
singles the target out among same-category distractors.

Two difficulty sources are built in:
- confusable categories whose appearance prototypes nearly coincide, so the
  detector's category likelihoods blur between them;
- several instances of one category per scene, so category evidence alone
  cannot pick the target.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator, model_validator

from src.exceptions import DatasetError, GenerationError, QueryGenerationError
from src.geometry import (
    DEFAULT_MARGIN,
    DEFAULT_RADIUS,
    RELATION_PHRASES,
    Box3,
    RelationId,
    classify_relation,
    intersection_volume,
    relation_holds,
)
from src.queryparse import CATEGORY_TEMPLATE, RELATIONAL_TEMPLATES, TemplateMeta, render_template

logger = logging.getLogger(__name__)

DEFAULT_CATEGORIES = [
    "chair", "armchair", "table", "end table", "sofa",
    "bed", "nightstand", "desk", "lamp", "toilet paper",
]
DEFAULT_CONFUSABLE = [("table", "end table"), ("chair", "armchair")]

# Typical extents (dx, dy, dz) in meters
TYPICAL_SIZES: Dict[str, Tuple[float, float, float]] = {
    "chair": (0.5, 0.5, 0.9),
    "armchair": (0.8, 0.8, 0.9),
    "table": (1.4, 0.8, 0.75),
    "end table": (0.5, 0.5, 0.55),
    "sofa": (2.0, 0.9, 0.85),
    "bed": (2.0, 1.6, 0.6),
    "nightstand": (0.45, 0.4, 0.55),
    "desk": (1.2, 0.6, 0.75),
    "lamp": (0.3, 0.3, 0.6),
    "toilet paper": (0.12, 0.12, 0.12),
}

SPLITS = ("train", "test")


class NoiseConfig(BaseModel):
    """Simulated detector behaviour"""

    box_jitter_std: float = Field(0.05, ge=0.0)
    class_temperature: float = Field(0.1, ge=0.0)
    false_positive_rate: float = Field(1.0, ge=0.0)
    drop_rate: float = Field(0.0, ge=0.0, le=1.0)
    appearance_std: float = Field(0.1, ge=0.0)
    confidence_std: float = Field(0.05, ge=0.0)
    confidence_threshold: float = Field(0.05, ge=0.0, le=1.0)
    max_proposals: int = Field(24, ge=1)

    @classmethod
    def noiseless(cls) -> "NoiseConfig":
        return cls(box_jitter_std=0.0, class_temperature=0.0, false_positive_rate=0.0, drop_rate=0.0,
                   appearance_std=0.0, confidence_std=0.0, confidence_threshold=0.0)


class GenConfig(BaseModel):
    """Scene, query and split settings"""

    category_names: List[str] = Field(default_factory=lambda: list(DEFAULT_CATEGORIES))
    confusable_pairs: List[Tuple[str, str]] = Field(default_factory=lambda: list(DEFAULT_CONFUSABLE))
    confusable_similarity: float = Field(0.93, ge=0.9, le=1.0)
    appearance_dim: int = Field(16, ge=2)
    vocab_seed: int = 7
    objects_min: int = Field(5, ge=1)
    objects_max: int = Field(8, ge=1)
    room_extent: Tuple[float, float, float] = (6.0, 6.0, 3.0)
    distractors_min: int = Field(2, ge=1, le=4)
    distractors_max: int = Field(4, ge=1, le=4)
    distractor_category: Optional[str] = None
    elevated_fraction: float = Field(0.25, ge=0.0, le=1.0)
    size_jitter: float = Field(0.15, ge=0.0, lt=1.0)
    queries_per_scene: int = Field(2, ge=1)
    train_scenes: int = Field(500, ge=0)
    test_scenes: int = Field(100, ge=0)
    max_placement_retries: int = Field(200, ge=1)
    max_scene_attempts: int = Field(5, ge=1)
    relation_margin: float = Field(DEFAULT_MARGIN, ge=0.0)
    proximity_radius: float = Field(DEFAULT_RADIUS, gt=0.0)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)

    @field_validator("category_names")
    @classmethod
    def _unique_names(cls, names: List[str]) -> List[str]:
        if len(set(names)) != len(names) or not names:
            raise ValueError("category names must be non-empty and unique")
        return names

    @model_validator(mode="after")
    def _check_ranges(self) -> "GenConfig":
        if self.objects_max < self.objects_min:
            raise ValueError("objects_max must be >= objects_min")
        if self.distractors_max < self.distractors_min:
            raise ValueError("distractors_max must be >= distractors_min")
        for a, b in self.confusable_pairs:
            if a not in self.category_names or b not in self.category_names:
                raise ValueError(f"confusable pair ({a}, {b}) names unknown categories")
        if self.distractor_category is not None and self.distractor_category not in self.category_names:
            raise ValueError(f"unknown distractor category '{self.distractor_category}'")
        return self


@dataclass(frozen=True, eq=False)
class CategoryVocab:
    """Category names with appearance prototypes and typical sizes"""

    names: Tuple[str, ...]
    prototypes: np.ndarray
    confusable_pairs: Tuple[Tuple[int, int], ...]
    base_sizes: np.ndarray
    min_pair_similarity: float = 0.9

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise GenerationError("category names must be unique")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise GenerationError("category prototypes must be unit-norm")
        for i, j in self.confusable_pairs:
            similarity = float(self.prototypes[i] @ self.prototypes[j])
            if similarity < self.min_pair_similarity:
                raise GenerationError(
                    f"confusable pair ({self.names[i]}, {self.names[j]}) has similarity {similarity:.3f}"
                )

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @property
    def appearance_dim(self) -> int:
        return int(self.prototypes.shape[1])

    @classmethod
    def from_config(cls, cfg: GenConfig) -> "CategoryVocab":
        """Deterministic vocabulary for a generation config"""
        rng = np.random.default_rng(cfg.vocab_seed)
        count, dim = len(cfg.category_names), cfg.appearance_dim
        prototypes = rng.standard_normal((count, dim))
        prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

        pairs = []
        for a, b in cfg.confusable_pairs:
            i, j = cfg.category_names.index(a), cfg.category_names.index(b)
            base = prototypes[i]
            direction = rng.standard_normal(dim)
            direction -= (direction @ base) * base
            direction /= np.linalg.norm(direction)
            s = cfg.confusable_similarity
            prototypes[j] = s * base + np.sqrt(1.0 - s * s) * direction
            pairs.append((i, j))

        sizes = np.array([
            TYPICAL_SIZES.get(name, tuple(rng.uniform(0.3, 1.2, size=3)))
            for name in cfg.category_names
        ], dtype=np.float64)
        return cls(tuple(cfg.category_names), prototypes, tuple(pairs), sizes)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "prototypes": self.prototypes.tolist(),
            "confusable_pairs": [list(p) for p in self.confusable_pairs],
            "base_sizes": self.base_sizes.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CategoryVocab":
        return cls(
            tuple(data["names"]),
            np.asarray(data["prototypes"], dtype=np.float64),
            tuple(tuple(p) for p in data["confusable_pairs"]),
            np.asarray(data["base_sizes"], dtype=np.float64),
        )


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    category: int
    box: Box3


@dataclass(frozen=True, eq=False)
class Proposal:
    """Detector output; matched_object is generator bookkeeping only"""

    box: Box3
    confidence: float
    det_likelihood: np.ndarray
    appearance: np.ndarray
    matched_object: Optional[int] = None


@dataclass(frozen=True)
class QueryRecord:
    """Query text; eval_target is None whenever the eval section was not read"""

    text: str
    eval_target: Optional[int] = None
    template_meta: Optional[TemplateMeta] = None


@dataclass(frozen=True)
class Scene:
    scene_id: str
    split: str
    objects: Tuple[SceneObject, ...]
    proposals: Tuple[Proposal, ...]
    queries: Tuple[QueryRecord, ...]
    gt_proposals: Tuple[Proposal, ...] = ()

    def object_by_id(self, object_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.object_id == object_id:
                return obj
        raise KeyError(f"scene {self.scene_id} has no object {object_id}")


@dataclass
class DatasetSummary:
    path: str
    scenes: Dict[str, int] = field(default_factory=dict)
    queries: Dict[str, int] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"path": self.path, "scenes": self.scenes, "queries": self.queries, "skipped": self.skipped}


# ---------------------------------------------------------------------------
# Scene layout
# ---------------------------------------------------------------------------


def _sample_categories(cfg: GenConfig, vocab: CategoryVocab, rng: np.random.Generator) -> List[int]:
    n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    n_instances = min(int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1)), n_objects)
    if cfg.distractor_category is not None:
        repeated = vocab.index(cfg.distractor_category)
    else:
        repeated = int(rng.integers(len(vocab)))
    others = [c for c in range(len(vocab)) if c != repeated]
    n_others = min(n_objects - n_instances, len(others))
    chosen = rng.choice(others, size=n_others, replace=False) if n_others else []
    return [repeated] * n_instances + [int(c) for c in chosen]


def _place_object(category: int, placed: List[Box3], cfg: GenConfig, vocab: CategoryVocab,
                  rng: np.random.Generator) -> Box3:
    width, depth, height = cfg.room_extent
    base = vocab.base_sizes[category]
    size = base * rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter, size=3)
    size = np.minimum(size, np.array(cfg.room_extent) * 0.9)

    for _ in range(cfg.max_placement_retries):
        x = rng.uniform(size[0] / 2.0, width - size[0] / 2.0)
        y = rng.uniform(size[1] / 2.0, depth - size[1] / 2.0)
        elevation = 0.0
        if rng.random() < cfg.elevated_fraction and height - size[2] > 0.3:
            elevation = rng.uniform(0.3, height - size[2])
        box = Box3((x, y, size[2] / 2.0 + elevation), tuple(size))
        if all(intersection_volume(box, other) == 0.0 for other in placed):
            return box
    raise GenerationError(
        f"could not place a '{vocab.names[category]}' after {cfg.max_placement_retries} retries"
    )


def place_objects(cfg: GenConfig, vocab: CategoryVocab, rng: np.random.Generator) -> Tuple[SceneObject, ...]:
    """Non-overlapping objects inside the room"""
    boxes: List[Box3] = []
    objects = []
    for object_id, category in enumerate(_sample_categories(cfg, vocab, rng)):
        box = _place_object(category, boxes, cfg, vocab, rng)
        boxes.append(box)
        objects.append(SceneObject(object_id, category, box))
    return tuple(objects)


# ---------------------------------------------------------------------------
# Detector simulation
# ---------------------------------------------------------------------------


def classify_appearance(appearance: np.ndarray, vocab: CategoryVocab, temperature: float) -> np.ndarray:
    """Category likelihoods from prototype affinity; one-hot when temperature is 0"""
    norm = max(float(np.linalg.norm(appearance)), 1e-12)
    affinity = vocab.prototypes @ (appearance / norm)
    if temperature <= 0.0:
        likelihood = np.zeros(len(vocab))
        likelihood[int(np.argmax(affinity))] = 1.0
        return likelihood
    z = affinity / temperature
    z -= z.max()
    likelihood = np.exp(z)
    return likelihood / likelihood.sum()


def _observe(obj: SceneObject, vocab: CategoryVocab, noise: NoiseConfig, jitter: float,
             rng: np.random.Generator) -> Proposal:
    appearance = vocab.prototypes[obj.category] + rng.normal(0.0, noise.appearance_std, vocab.appearance_dim)
    center = np.array(obj.box.center) + rng.normal(0.0, jitter, 3)
    size = np.maximum(np.array(obj.box.size) + rng.normal(0.0, jitter, 3), 1e-2)
    likelihood = classify_appearance(appearance, vocab, noise.class_temperature)
    affinity = float(vocab.prototypes[obj.category] @ appearance / max(np.linalg.norm(appearance), 1e-12))
    confidence = float(np.clip(affinity + rng.normal(0.0, noise.confidence_std), 0.0, 1.0))
    return Proposal(Box3(tuple(center), tuple(size)), confidence, likelihood, appearance, obj.object_id)


def synth_detect(objects: Sequence[SceneObject], vocab: CategoryVocab, noise: NoiseConfig, rng_seed: int,
                 room_extent: Tuple[float, float, float] = (6.0, 6.0, 3.0)) -> List[Proposal]:
    """
    Simulated pre-trained detector

    One jittered proposal per surviving object plus Poisson false positives
    with near-uniform category likelihoods; proposals below the confidence
    threshold are dropped and the rest capped to the most confident ones.

    Returns:
        Proposals sorted by decreasing confidence (stable)
    """
    rng = np.random.default_rng(rng_seed)
    proposals: List[Proposal] = []
    for obj in objects:
        if rng.random() < noise.drop_rate:
            continue
        proposals.append(_observe(obj, vocab, noise, noise.box_jitter_std, rng))

    for _ in range(int(rng.poisson(noise.false_positive_rate))):
        size = rng.uniform(0.2, 1.0, 3)
        center = rng.uniform(size / 2.0, np.array(room_extent) - size / 2.0)
        appearance = rng.standard_normal(vocab.appearance_dim)
        appearance /= np.linalg.norm(appearance)
        likelihood = classify_appearance(appearance, vocab, 1.0)
        proposals.append(Proposal(Box3(tuple(center), tuple(size)), float(rng.uniform(0.05, 0.5)),
                                  likelihood, appearance, None))

    kept = [p for p in proposals if p.confidence >= noise.confidence_threshold]
    kept.sort(key=lambda p: -p.confidence)
    return kept[:noise.max_proposals]


def gt_proposals(objects: Sequence[SceneObject], vocab: CategoryVocab, noise: NoiseConfig,
                 rng_seed: int) -> List[Proposal]:
    """One proposal per object with its exact box (ground-truth proposal mode)"""
    rng = np.random.default_rng(rng_seed)
    observed = []
    for obj in objects:
        proposal = _observe(obj, vocab, noise, 0.0, rng)
        observed.append(Proposal(obj.box, 1.0, proposal.det_likelihood, proposal.appearance, obj.object_id))
    return observed


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

Candidate = Tuple[int, Optional[RelationId], Optional[int]]


def query_candidates(objects: Sequence[SceneObject], cfg: GenConfig) -> Tuple[List[Candidate], List[Candidate]]:
    """
    Truthful, discriminative (target, relation, anchor) triples

    Returns:
        (primary, secondary): relational triples on multi-instance targets, and
        everything else (category-only queries on unique targets, relational
        triples on unique targets)
    """
    counts: Dict[int, int] = {}
    for obj in objects:
        counts[obj.category] = counts.get(obj.category, 0) + 1
    anchors = [obj for obj in objects if counts[obj.category] == 1]

    primary: List[Candidate] = []
    secondary: List[Candidate] = []
    for target in objects:
        siblings = [obj for obj in objects if obj.category == target.category]
        context = [obj.box for obj in siblings]
        pool = primary if len(siblings) > 1 else secondary
        if len(siblings) == 1:
            secondary.append((target.object_id, None, None))
        for anchor in anchors:
            if anchor.category == target.category:
                continue
            relations = classify_relation(target.box, anchor.box, context,
                                          cfg.relation_margin, cfg.proximity_radius)
            for rel in relations:
                distractor_holds = any(
                    relation_holds(rel, other.box, anchor.box, context, cfg.relation_margin, cfg.proximity_radius)
                    for other in siblings if other.object_id != target.object_id
                )
                if not distractor_holds:
                    pool.append((target.object_id, rel, anchor.object_id))
    return primary, secondary


def generate_query(objects: Sequence[SceneObject], vocab: CategoryVocab, cfg: GenConfig, rng_seed: int,
                   exclude: Sequence[Candidate] = ()) -> Tuple[QueryRecord, Candidate]:
    """
    One template query for a scene

    Multi-instance targets are preferred so that queries exercise instance
    disambiguation whenever the scene allows it.

    Raises:
        QueryGenerationError: If no unused discriminative triple exists
    """
    rng = np.random.default_rng(rng_seed)
    primary, secondary = query_candidates(objects, cfg)
    primary = [c for c in primary if c not in exclude]
    secondary = [c for c in secondary if c not in exclude]
    pool = primary or secondary
    if not pool:
        raise QueryGenerationError("no discriminative (target, relation, anchor) triple in scene")

    target_id, relation, anchor_id = pool[int(rng.integers(len(pool)))]
    by_id = {obj.object_id: obj for obj in objects}
    target_name = vocab.names[by_id[target_id].category]
    if relation is None:
        meta = TemplateMeta(target_name)
    else:
        meta = TemplateMeta(
            target_name,
            relation.label,
            vocab.names[by_id[anchor_id].category],
            template_variant=int(rng.integers(len(RELATIONAL_TEMPLATES))),
            phrase_variant=int(rng.integers(len(RELATION_PHRASES[relation]))),
        )
    record = QueryRecord(render_template(meta), target_id, meta)
    return record, (target_id, relation, anchor_id)


# ---------------------------------------------------------------------------
# Scenes and datasets
# ---------------------------------------------------------------------------


def generate_scene(cfg: GenConfig, rng_seed: int, vocab: Optional[CategoryVocab] = None,
                   scene_id: str = "scene", split: str = "train") -> Scene:
    """
    Objects, detector proposals, ground-truth proposals and queries for one seed

    Raises:
        GenerationError: If placement fails, detection leaves no proposal, or
            no query can be written
    """
    vocab = vocab or CategoryVocab.from_config(cfg)
    rng = np.random.default_rng(rng_seed)
    objects = place_objects(cfg, vocab, rng)
    detect_seed, gt_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))

    proposals = synth_detect(objects, vocab, cfg.noise, detect_seed, cfg.room_extent)
    if not proposals:
        raise GenerationError(f"scene {scene_id} is unusable: detection left no proposal")

    queries: List[QueryRecord] = []
    used: List[Candidate] = []
    for _ in range(cfg.queries_per_scene):
        try:
            record, key = generate_query(objects, vocab, cfg, int(rng.integers(0, 2**31 - 1)), used)
        except QueryGenerationError:
            if queries:
                break
            raise
        queries.append(record)
        used.append(key)

    return Scene(scene_id, split, objects, tuple(proposals), tuple(queries),
                 tuple(gt_proposals(objects, vocab, cfg.noise, gt_seed)))


def scene_seed(seed: int, split: str, attempt: int) -> int:
    return int(np.random.SeedSequence([seed, SPLITS.index(split), attempt]).generate_state(1)[0])


def generate_split(cfg: GenConfig, vocab: CategoryVocab, seed: int, split: str, count: int,
                   summary: DatasetSummary) -> List[Scene]:
    scenes: List[Scene] = []
    attempt = 0
    skipped = 0
    max_attempts = count * cfg.max_scene_attempts
    while len(scenes) < count:
        if attempt >= max_attempts:
            raise DatasetError(f"only {len(scenes)}/{count} usable {split} scenes after {attempt} attempts")
        scene_id = f"{split}_{len(scenes):04d}"
        try:
            scenes.append(generate_scene(cfg, scene_seed(seed, split, attempt), vocab, scene_id, split))
        except GenerationError as e:
            skipped += 1
            logger.warning(f"Skipped {split} attempt {attempt}: {e}")
        attempt += 1
    summary.scenes[split] = len(scenes)
    summary.queries[split] = sum(len(s.queries) for s in scenes)
    summary.skipped[split] = skipped
    return scenes


def build_dataset(cfg: GenConfig, seed: int, out_path: str) -> DatasetSummary:
    """
    Generate both splits and write the dataset file plus its metadata sidecar

    Returns:
        DatasetSummary with scene, query and skip counts per split
    """
    from src.file_manager import DatasetFileManager

    manager = DatasetFileManager()
    manager.validate_output_path(out_path)
    vocab = CategoryVocab.from_config(cfg)
    summary = DatasetSummary(str(out_path))

    logger.info(f"Building dataset: {cfg.train_scenes} train / {cfg.test_scenes} test scenes, seed {seed}")
    scenes = []
    for split, count in (("train", cfg.train_scenes), ("test", cfg.test_scenes)):
        scenes.extend(generate_split(cfg, vocab, seed, split, count, summary))

    manager.write_dataset(out_path, scenes, vocab, cfg, seed)
    logger.info(f"Dataset written: {summary.to_dict()}")
    return summary
