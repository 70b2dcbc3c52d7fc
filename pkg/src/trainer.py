"""
Training for WeakGround
=======================

Weakly-supervised training from (scene, query) pairs. The loader runs in
weak mode, so objects and eval sections never reach this module.

Each batch holds queries from distinct scenes and is encoded in one batched
forward pass over:
- the b matched (query_i, scene_i) pairs;
- the b * (b - 1) crossed (query_i, scene_j) pairs when phrase matching is on;
- b * k negative (negative query, scene_i) pairs when negatives are on.
"""

import csv
import time
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.exceptions import DatasetError, ParseError, TrainingError
from src.file_manager import DatasetFileManager
from src.model import GroundingModel, ModelConfig, QueryInput, proposal_features
from src.numcore import ParamStore, Tensor, backward, reshape, take
from src.objectives import (
    LOSS_NAMES,
    LossBundle,
    LossWeights,
    category_alignment_losses,
    classifier_alignment_loss,
    compatibility_scores,
    info_nce_losses,
    loss_phr,
    phrase_scene_scores,
    relation_loss,
    select_relation_proposals,
    sentence_similarities,
    total_loss,
)
from src.queryparse import (
    NegativeQuerySet,
    ParsedQuery,
    TokenVocabulary,
    corrupt_target_phrase,
    generate_negatives,
    parse,
)
from src.synthworld import CategoryVocab, Scene

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L_se", "L_PN", "L_phr", "L_rel", "total")
_LOG_KEYS = {"L_se": "L_se", "L_PN": "L_pn", "L_phr": "L_phr", "L_rel": "L_rel", "total": "total"}


class TrainConfig(BaseModel):
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(50, ge=0)
    learning_rate: float = Field(0.05, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    seed: int = 0
    negatives: int = Field(25, ge=0)
    use_category: bool = True
    use_negatives: bool = True
    use_phrase: bool = True
    use_relation: bool = True
    max_grad_norm: float = Field(5.0, ge=0.0)
    parser_accuracy: float = Field(1.0, ge=0.0, le=1.0)
    weights: LossWeights = Field(default_factory=LossWeights)

    @model_validator(mode="after")
    def _one_loss_enabled(self) -> "TrainConfig":
        if not (self.use_category or self.use_negatives or self.use_phrase or self.use_relation):
            raise ValueError("at least one of the four losses must be enabled")
        return self

    @property
    def flags(self) -> Dict[str, bool]:
        return {"c1": self.use_category, "c2": self.use_negatives, "i1": self.use_phrase, "i2": self.use_relation}


class SGDMomentum:
    """Plain SGD with heavy-ball momentum"""

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, store: ParamStore) -> None:
        # lr 0 must leave parameters bit-identical
        if self.learning_rate == 0.0:
            return
        for name in store:
            velocity = self.velocity.get(name)
            velocity = store.grads[name] if velocity is None else self.momentum * velocity + store.grads[name]
            self.velocity[name] = velocity
            store.params[name] -= self.learning_rate * velocity


@dataclass
class TrainingExample:
    scene_index: int
    features: np.ndarray
    detector_labels: np.ndarray
    parsed: ParsedQuery
    query: QueryInput

    @property
    def target_category(self) -> int:
        return self.parsed.target_phrase.category


@dataclass
class TrainingResult:
    history: List[Dict[str, Optional[float]]]
    loss_counters: Dict[str, int]
    skipped_queries: int
    seconds: float = 0.0
    checkpoint: Optional[str] = None
    log_path: Optional[str] = None


def distinct_scene_batches(examples: Sequence[TrainingExample], batch_size: int) -> List[List[TrainingExample]]:
    """Split an ordered example list into batches whose scenes are all distinct"""
    batches = []
    pending = list(examples)
    while pending:
        batch, rest, seen = [], [], set()
        for example in pending:
            if len(batch) < batch_size and example.scene_index not in seen:
                batch.append(example)
                seen.add(example.scene_index)
            else:
                rest.append(example)
        batches.append(batch)
        pending = rest
    return batches


class Trainer:
    """Optimizes a GroundingModel on weakly-supervised pairs"""

    def __init__(self, model: GroundingModel, cfg: TrainConfig, vocab: CategoryVocab):
        self.model = model
        self.cfg = cfg
        self.vocab = vocab
        self.optimizer = SGDMomentum(cfg.learning_rate, cfg.momentum)
        self.loss_counters: Dict[str, int] = {name: 0 for name in LOSS_NAMES}
        self.skipped_queries = 0
        self._negative_cache: Dict[int, NegativeQuerySet] = {}
        self._phrase_table: Optional[np.ndarray] = None

    # -- data ---------------------------------------------------------------

    def prepare_examples(self, scenes: Sequence[Scene]) -> List[TrainingExample]:
        """Parse every query; failures are logged, counted and skipped"""
        rng = np.random.default_rng([self.cfg.seed, 1])
        examples = []
        errors = []
        for index, scene in enumerate(scenes):
            if not scene.proposals:
                errors.append(f"{scene.scene_id}: no proposals")
                continue
            features = proposal_features(scene.proposals, self.model.config.room_extent)
            labels = np.array([int(np.argmax(p.det_likelihood)) for p in scene.proposals], dtype=np.int64)
            for query in scene.queries:
                try:
                    parsed = parse(query.text, self.vocab)
                except ParseError as e:
                    errors.append(f"{scene.scene_id}: {e}")
                    continue
                parsed = corrupt_target_phrase(parsed, self.vocab, self.cfg.parser_accuracy, rng)
                examples.append(TrainingExample(index, features, labels, parsed, QueryInput.from_parsed(parsed)))

        self.skipped_queries = len(errors)
        if errors:
            logger.warning(f"Skipped {len(errors)} queries during preparation")
            for error in errors[:10]:
                logger.warning(f"  - {error}")
        return examples

    def _negatives(self, example: TrainingExample) -> NegativeQuerySet:
        key = id(example)
        if self._phrase_table is None:
            self._phrase_table = self.model.phrase_embedding_table()
        if key not in self._negative_cache:
            self._negative_cache[key] = generate_negatives(
                example.parsed, self.vocab, self._phrase_table, self.cfg.negatives
            )
        return self._negative_cache[key]

    # -- losses -------------------------------------------------------------

    def batch_loss(self, batch: Sequence[TrainingExample]) -> LossBundle:
        """Loss bundle of one batch of distinct-scene examples"""
        cfg = self.cfg
        b = len(batch)
        pairs: List[Tuple[np.ndarray, QueryInput]] = [(ex.features, ex.query) for ex in batch]

        cross_index = None
        if cfg.use_phrase and b > 1:
            cross_index = np.zeros((b, b), dtype=np.int64)
            for i in range(b):
                for j in range(b):
                    if i == j:
                        cross_index[i, j] = i
                    else:
                        cross_index[i, j] = len(pairs)
                        pairs.append((batch[j].features, batch[i].query))

        negative_rows: List[int] = []
        negative_owner: List[int] = []
        k = 0
        if cfg.use_negatives and cfg.negatives > 0:
            negative_sets = [self._negatives(ex) for ex in batch]
            k = min(len(s) for s in negative_sets)
            for i, (ex, negatives) in enumerate(zip(batch, negative_sets)):
                for parsed in negatives.parsed[:k]:
                    negative_rows.append(len(pairs))
                    negative_owner.append(i)
                    pairs.append((ex.features, QueryInput.from_parsed(parsed)))

        fused = self.model.forward(self.model.prepare(pairs))
        own = slice(0, b)
        proposals = fused.proposal_emb[own]
        proposal_mask = fused.proposal_mask[own]
        components: Dict[str, Optional[Tensor]] = {}

        if cfg.use_category:
            similarities = sentence_similarities(fused.sentence_emb[own], proposals)
            probs = fused.category_probs.data[own]
            target = np.stack([probs[i, :, ex.target_category] for i, ex in enumerate(batch)])
            components["se"] = category_alignment_losses(
                similarities, target, proposal_mask, cfg.weights.se_temperature
            ).mean()
            self.loss_counters["se"] += 1

        if cfg.use_negatives:
            positive = compatibility_scores(fused.sentence_emb[own], proposals, proposal_mask)
            negatives = None
            if k > 0:
                rows = np.asarray(negative_rows)
                owners = np.asarray(negative_owner)
                scores = compatibility_scores(
                    take(fused.sentence_emb, rows), take(proposals, owners), proposal_mask[owners]
                )
                negatives = reshape(scores, (b, k))
            components["pn"] = info_nce_losses(positive, negatives, cfg.weights.temperature).mean()
            self.loss_counters["pn"] += 1

        if cfg.use_phrase:
            if cross_index is None:
                components["phr"] = Tensor(0.0)
            else:
                grid = slice(0, b * b)
                flat = phrase_scene_scores(fused.phrase_emb[grid], fused.proposal_emb[grid],
                                           fused.phrase_mask[grid], fused.proposal_mask[grid])
                components["phr"] = loss_phr(take(flat, cross_index), cfg.weights.temperature)
            self.loss_counters["phr"] += 1

        if cfg.use_relation:
            triples = [[(int(t.relation), t.subject, t.anchor) for t in ex.parsed.relation_triples] for ex in batch]
            selection = select_relation_proposals(fused.phrase_emb[own], proposals, proposal_mask, triples)
            components["rel"] = relation_loss(self.model.relation_head, proposals, selection)
            self.loss_counters["rel"] += 1

        aux = None
        if cfg.weights.classifier_weight > 0.0:
            labels = np.zeros(proposal_mask.shape, dtype=np.int64)
            for i, ex in enumerate(batch):
                labels[i, :len(ex.detector_labels)] = ex.detector_labels
            aux = classifier_alignment_loss(fused.category_logits[own], labels, proposal_mask)

        return total_loss(components, cfg.weights, aux)

    # -- loop ---------------------------------------------------------------

    def _step(self, bundle: LossBundle, epoch: int, batch_index: int) -> None:
        objective = bundle.objective
        if not np.isfinite(objective.item()):
            raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
        store = self.model.params
        store.zero_grad()
        backward(objective)
        norm = store.grad_norm()
        if not np.isfinite(norm):
            raise TrainingError(f"non-finite gradient at epoch {epoch}, batch {batch_index}")
        if self.cfg.max_grad_norm > 0.0 and norm > self.cfg.max_grad_norm:
            store.scale_grads(self.cfg.max_grad_norm / norm)
        self.optimizer.step(store)

    def train_epoch(self, epoch: int, examples: Sequence[TrainingExample],
                    rng: np.random.Generator) -> Dict[str, Optional[float]]:
        self._phrase_table = self.model.phrase_embedding_table()
        self._negative_cache = {}
        order = rng.permutation(len(examples))
        batches = distinct_scene_batches([examples[i] for i in order], self.cfg.batch_size)

        sums: Dict[str, float] = {}
        counts: Dict[str, int] = {}
        for batch_index, batch in enumerate(batches):
            bundle = self.batch_loss(batch)
            self._step(bundle, epoch, batch_index)
            for key, value in bundle.to_dict().items():
                if value is not None:
                    sums[key] = sums.get(key, 0.0) + value
                    counts[key] = counts.get(key, 0) + 1

        row: Dict[str, Optional[float]] = {"epoch": epoch}
        for column in LOG_COLUMNS[1:]:
            key = _LOG_KEYS[column]
            row[column] = sums[key] / counts[key] if counts.get(key) else None
        aux = sums.get("aux")
        logger.info(
            f"Epoch {epoch}: " + ", ".join(
                f"{c}={row[c]:.4f}" for c in LOG_COLUMNS[1:] if row[c] is not None
            ) + (f", aux={aux / counts['aux']:.4f}" if aux is not None else "")
        )
        return row

    def fit(self, scenes: Sequence[Scene]) -> TrainingResult:
        """
        Train for the configured number of epochs

        Raises:
            DatasetError: If no usable training query exists
            TrainingError: On a non-finite loss or gradient
        """
        examples = self.prepare_examples(scenes)
        if not examples:
            raise DatasetError("no usable training queries")
        logger.info(
            f"Training on {len(examples)} queries from {len(scenes)} scenes, flags {self.cfg.flags}, "
            f"{self.model.params.num_parameters()} parameters"
        )
        rng = np.random.default_rng(self.cfg.seed)
        start = time.perf_counter()
        history = [self.train_epoch(epoch, examples, rng) for epoch in range(1, self.cfg.epochs + 1)]
        seconds = time.perf_counter() - start
        logger.info(f"Trained {self.cfg.epochs} epochs in {seconds:.1f}s")
        return TrainingResult(history, dict(self.loss_counters), self.skipped_queries, seconds)


def write_training_log(path: Union[str, Path], history: Sequence[Dict[str, Optional[float]]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in history:
            writer.writerow(["" if row[c] is None else (row[c] if c == "epoch" else repr(float(row[c])))
                             for c in LOG_COLUMNS])


def training_log_path(checkpoint_path: Union[str, Path]) -> Path:
    path = Path(checkpoint_path)
    return path.with_name(path.name + ".log.csv")


def build_model(vocab: CategoryVocab, model_cfg: ModelConfig, cfg: TrainConfig,
                room_extent: Sequence[float]) -> GroundingModel:
    """Model sized for a dataset vocabulary, initialized from the training seed"""
    model_cfg = model_cfg.model_copy(update={
        "category_count": len(vocab),
        "appearance_dim": vocab.appearance_dim,
        "room_extent": tuple(room_extent),
        "temperature": cfg.weights.temperature,
        "se_temperature": cfg.weights.se_temperature,
        "init_seed": cfg.seed,
    })
    model_cfg = ModelConfig(**model_cfg.model_dump())
    return GroundingModel(model_cfg, TokenVocabulary.build(vocab.names), vocab.names)


def train(data_path: Union[str, Path], cfg: TrainConfig, model_cfg: Optional[ModelConfig] = None,
          checkpoint_path: Optional[Union[str, Path]] = None) -> Tuple[GroundingModel, TrainingResult]:
    """
    Train on the train split of a dataset file

    Args:
        data_path: Dataset file (read in weak mode)
        cfg: Training settings
        model_cfg: Model settings; category count, appearance size and room
            extent are taken from the dataset
        checkpoint_path: When given, the checkpoint and its training log
            (`<checkpoint>.log.csv`) are written

    Returns:
        (trained model, TrainingResult)
    """
    manager = DatasetFileManager()
    scenes, vocab = manager.read_scenes(data_path, mode="weak", split="train")
    if not scenes:
        raise DatasetError(f"dataset {data_path} has no train scenes")
    room_extent = manager.read_meta(data_path)["gen_config"]["room_extent"]

    model = build_model(vocab, model_cfg or ModelConfig(), cfg, room_extent)
    result = Trainer(model, cfg, vocab).fit(scenes)

    if checkpoint_path is not None:
        model.save(checkpoint_path)
        log_path = training_log_path(checkpoint_path)
        write_training_log(log_path, result.history)
        result.checkpoint, result.log_path = str(checkpoint_path), str(log_path)
        logger.info(f"Training log written to {log_path}")
    return model, result
