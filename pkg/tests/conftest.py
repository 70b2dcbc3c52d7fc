"""Shared fixtures: tiny configurations, a tiny dataset and a hand-set oracle model."""

from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from src.file_manager import DatasetFileManager
from src.model import GroundingModel, ModelConfig
from src.queryparse import TemplateMeta, TokenVocabulary, render_template
from src.synthworld import (
    CategoryVocab,
    DatasetSummary,
    GenConfig,
    NoiseConfig,
    QueryRecord,
    build_dataset,
    generate_split,
)
from src.trainer import TrainConfig

# Proposal units fire only for appearances within this cosine of their prototype
ORACLE_THRESHOLD = 0.95


def tiny_gen_config(**overrides) -> GenConfig:
    values = dict(train_scenes=6, test_scenes=4, objects_min=4, objects_max=6, queries_per_scene=2)
    values.update(overrides)
    return GenConfig(**values)


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(embed_dim=16, text_layers=1, fusion_layers=1, heads=2, max_tokens=16)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_train_config(**overrides) -> TrainConfig:
    values = dict(epochs=1, batch_size=3, negatives=3)
    values.update(overrides)
    return TrainConfig(**values)


def oracle_gen_config() -> GenConfig:
    """Noiseless scenes in which every category occurs once"""
    return GenConfig(train_scenes=3, test_scenes=6, objects_min=4, objects_max=6,
                     distractors_min=1, distractors_max=1, noise=NoiseConfig.noiseless())


def build_oracle_dataset(path: Path) -> CategoryVocab:
    """Write a dataset whose queries are all category-only ("the sofa")"""
    cfg = oracle_gen_config()
    vocab = CategoryVocab.from_config(cfg)
    summary = DatasetSummary(str(path))
    scenes = []
    for split, count in (("train", cfg.train_scenes), ("test", cfg.test_scenes)):
        for scene in generate_split(cfg, vocab, 0, split, count, summary):
            queries = []
            for obj in scene.objects[:2]:
                meta = TemplateMeta(vocab.names[obj.category])
                queries.append(QueryRecord(render_template(meta), obj.object_id, meta))
            scenes.append(replace(scene, queries=tuple(queries)))
    DatasetFileManager().write_dataset(path, scenes, vocab, cfg, 0)
    return vocab


def build_oracle_model(vocab: CategoryVocab) -> GroundingModel:
    """
    Hand-set model that grounds category-only queries perfectly

    Proposal c maps to 0.05 * e_c, every category phrase pools to e_c and the
    sentence slot is zero, so the instance branch always wins with p_f = 1 on
    the right proposal.
    """
    names = vocab.names
    d = 16
    cfg = ModelConfig(embed_dim=d, text_layers=0, fusion_layers=0, heads=1, category_count=len(names),
                      appearance_dim=vocab.appearance_dim, room_extent=(6.0, 6.0, 3.0))
    model = GroundingModel(cfg, TokenVocabulary.build(names), names)
    params = model.params.params
    for value in params.values():
        value[...] = 0.0

    c = len(names)
    params["visual.0.w"][7:, :c] = vocab.prototypes.T
    params["visual.0.b"][:c] = -ORACLE_THRESHOLD
    params["visual.1.w"][...] = np.eye(d)

    basis = np.eye(d)
    table = params["text.token_embedding"]
    assigned = set()
    for k, name in enumerate(names):
        if len(name.split()) == 1:
            table[model.token_vocab.index(name)] = basis[k]
            assigned.add(name)
    for k, name in enumerate(names):
        words = name.split()
        if len(words) == 1:
            continue
        fixed = sum((table[model.token_vocab.index(w)] for w in words if w in assigned), np.zeros(d))
        free = [w for w in words if w not in assigned]
        for word in free:
            table[model.token_vocab.index(word)] = (len(words) * basis[k] - fixed) / len(free)
    return model


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("data") / "tiny.jsonl"
    build_dataset(tiny_gen_config(), 0, str(path))
    return path


@pytest.fixture(scope="session")
def tiny_vocab(tiny_dataset) -> CategoryVocab:
    return DatasetFileManager().read_vocab(tiny_dataset)


@pytest.fixture(scope="session")
def oracle_dataset(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("oracle") / "oracle.jsonl"
    build_oracle_dataset(path)
    return path


@pytest.fixture(scope="session")
def oracle_checkpoint(oracle_dataset, tmp_path_factory) -> Path:
    vocab = DatasetFileManager().read_vocab(oracle_dataset)
    path = tmp_path_factory.mktemp("ckpt") / "oracle.ckpt"
    build_oracle_model(vocab).save(path)
    return path


@pytest.fixture
def oracle_model(oracle_dataset) -> GroundingModel:
    return build_oracle_model(DatasetFileManager().read_vocab(oracle_dataset))
