"""
Grounding model for WeakGround
==============================

Desk-scale two-stream transformer:

- visual encoder: 2-layer MLP over normalized proposal geometry, detector
  confidence and appearance (proposals carry no positional encoding);
- text encoder: token + position embeddings with a learned summary slot in
  front, followed by pre-norm self-attention layers;
- fusion: per layer, optional proposal self-attention, proposals attending to
  tokens, tokens attending to proposals, then feed-forward blocks;
- heads: category classifier P_s over fused proposals and a relation head
  over (subject, anchor) proposal pairs.

Every forward runs batched over padded (proposals, query) pairs with
additive key masks, so one call serves a whole training batch.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.exceptions import CheckpointError, ContractError
from src.geometry import RelationId
from src.numcore import (
    ParamStore,
    Tensor,
    concat,
    constant,
    linear_forward,
    matmul,
    mlp_forward,
    softmax,
    sqrt,
    take,
)
from src.queryparse import ParsedQuery, TokenVocabulary, category_phrase_embeddings, tokenize
from src.synthworld import Proposal

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
MASK_VALUE = -1e9
LN_EPS = 1e-5

FeatureSource = Union[np.ndarray, Sequence[Proposal]]


class ModelConfig(BaseModel):
    embed_dim: int = Field(32, ge=1)
    text_layers: int = Field(2, ge=0)
    fusion_layers: int = Field(2, ge=0)
    heads: int = Field(4, ge=1)
    ffn_multiplier: int = Field(2, ge=1)
    relation_count: int = Field(len(RelationId), ge=1)
    category_count: int = Field(10, ge=1)
    appearance_dim: int = Field(16, ge=1)
    max_tokens: int = Field(24, ge=1)
    temperature: float = Field(0.1, gt=0.0)
    se_temperature: float = Field(0.1, gt=0.0)
    proposal_self_attention: bool = True
    relation_weight: float = Field(0.25, ge=0.0)
    room_extent: Tuple[float, float, float] = (6.0, 6.0, 3.0)
    init_seed: int = 0

    @model_validator(mode="after")
    def _heads_divide_dim(self) -> "ModelConfig":
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if min(self.room_extent) <= 0:
            raise ValueError("room extent must be positive")
        return self

    @property
    def proposal_feature_dim(self) -> int:
        return 7 + self.appearance_dim


@dataclass(frozen=True)
class QueryInput:
    """Word sequence plus noun-phrase word spans fed to the text encoder"""

    words: Tuple[str, ...]
    phrase_spans: Tuple[Tuple[int, int], ...] = ()

    @classmethod
    def from_parsed(cls, parsed: ParsedQuery) -> "QueryInput":
        return cls(tuple(parsed.words()), tuple(parsed.word_spans()))

    @classmethod
    def from_text(cls, text: str, category_names: Sequence[str]) -> "QueryInput":
        """Raw sentence without phrases (category branch only)"""
        return cls(tuple(w for unit in tokenize(text, category_names) for w in unit.split()))


@dataclass
class PairBatch:
    """Padded model inputs for a batch of (proposals, query) pairs"""

    features: np.ndarray
    proposal_mask: np.ndarray
    token_ids: np.ndarray
    token_mask: np.ndarray
    pooling: np.ndarray
    phrase_mask: np.ndarray
    truncated: int = 0

    @property
    def size(self) -> int:
        return int(self.features.shape[0])


@dataclass
class EncodedPair:
    """Fused embeddings of one pair: F_po [m, D], F_se [1, D], F_phr [n', D], P_s [m, c]"""

    proposal_emb: Tensor
    sentence_emb: Tensor
    phrase_emb: Tensor
    category_probs: Tensor


@dataclass
class TextStates:
    tokens: Tensor
    sentence: Tensor
    phrases: Tensor
    phrase_spans: Tuple[Tuple[int, int], ...]


@dataclass
class FusedBatch:
    proposal_emb: Tensor
    sentence_emb: Tensor
    phrase_emb: Tensor
    category_logits: Tensor
    proposal_mask: np.ndarray
    phrase_mask: np.ndarray

    @property
    def category_probs(self) -> Tensor:
        return softmax(self.category_logits, 1.0, axis=-1)

    def pair(self, index: int) -> EncodedPair:
        m = int(self.proposal_mask[index].sum())
        n = int(self.phrase_mask[index].sum())
        return EncodedPair(
            self.proposal_emb[index, :m],
            self.sentence_emb[index:index + 1],
            self.phrase_emb[index, :n],
            self.category_probs[index, :m],
        )


def proposal_features(proposals: Sequence[Proposal], room_extent: Sequence[float]) -> np.ndarray:
    """[m, 7 + d_a]: center and size over room extent, confidence, appearance"""
    extent = np.asarray(room_extent, dtype=np.float64)
    rows = [
        np.concatenate([
            np.asarray(p.box.center) / extent,
            np.asarray(p.box.size) / extent,
            [p.confidence],
            np.asarray(p.appearance, dtype=np.float64),
        ])
        for p in proposals
    ]
    return np.stack(rows) if rows else np.zeros((0, 7))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / sqrt(variance + eps) * gain + bias


class GroundingModel:
    """Parameters plus the forward computations of the grounding model"""

    def __init__(self, config: ModelConfig, token_vocab: TokenVocabulary, category_names: Sequence[str],
                 params: Optional[ParamStore] = None):
        if len(category_names) != config.category_count:
            raise ContractError(
                f"model configured for {config.category_count} categories, got {len(category_names)} names"
            )
        self.config = config
        self.token_vocab = token_vocab
        self.category_names = tuple(category_names)
        if params is None:
            params = ParamStore()
            self._init_params(params, np.random.default_rng(config.init_seed))
        self.params = params

    # -- parameters ---------------------------------------------------------

    def _parameter_layout(self) -> List[Tuple[str, Tuple[int, ...], str, int]]:
        """(name, shape, init, fan_in) in registration order"""
        cfg = self.config
        d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.ffn_multiplier
        layout: List[Tuple[str, Tuple[int, ...], str, int]] = []

        def linear(name: str, fan_in: int, fan_out: int):
            layout.append((f"{name}.w", (fan_in, fan_out), "uniform", fan_in))
            layout.append((f"{name}.b", (fan_out,), "uniform", fan_in))

        def norm(name: str):
            layout.append((f"{name}.g", (d,), "ones", d))
            layout.append((f"{name}.b", (d,), "zeros", d))

        def attention(name: str):
            for part in ("q", "k", "v", "o"):
                linear(f"{name}.{part}", d, d)

        def ffn(name: str):
            linear(f"{name}.0", d, hidden)
            linear(f"{name}.1", hidden, d)

        linear("visual.0", cfg.proposal_feature_dim, d)
        linear("visual.1", d, d)

        layout.append(("text.token_embedding", (len(self.token_vocab), d), "uniform", d))
        layout.append(("text.position_embedding", (cfg.max_tokens + 1, d), "uniform", d))
        layout.append(("text.summary", (d,), "zeros", d))
        for layer in range(cfg.text_layers):
            prefix = f"text.{layer}"
            norm(f"{prefix}.ln_attn")
            attention(f"{prefix}.attn")
            norm(f"{prefix}.ln_ffn")
            ffn(f"{prefix}.ffn")

        for layer in range(cfg.fusion_layers):
            prefix = f"fusion.{layer}"
            if cfg.proposal_self_attention:
                norm(f"{prefix}.ln_self")
                attention(f"{prefix}.self_attn")
            norm(f"{prefix}.ln_p2t_query")
            norm(f"{prefix}.ln_p2t_key")
            attention(f"{prefix}.p2t")
            norm(f"{prefix}.ln_t2p_query")
            norm(f"{prefix}.ln_t2p_key")
            attention(f"{prefix}.t2p")
            norm(f"{prefix}.ln_ffn_p")
            ffn(f"{prefix}.ffn_p")
            norm(f"{prefix}.ln_ffn_t")
            ffn(f"{prefix}.ffn_t")

        linear("classifier.0", d, d)
        linear("classifier.1", d, cfg.category_count)
        linear("relation.0", 2 * d, d)
        linear("relation.1", d, cfg.relation_count)
        return layout

    def _init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        for name, shape, init, fan_in in self._parameter_layout():
            if init == "zeros":
                value = np.zeros(shape)
            elif init == "ones":
                value = np.ones(shape)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                value = rng.uniform(-bound, bound, size=shape)
            store.add(name, value)
        logger.debug(f"Initialized {len(store)} parameter arrays ({store.num_parameters()} values)")

    def _p(self, name: str) -> Tensor:
        return self.params.leaf(name)

    def _linear(self, name: str, x: Tensor) -> Tensor:
        return linear_forward(x, self._p(f"{name}.w"), self._p(f"{name}.b"))

    def _mlp(self, name: str, x: Tensor, depth: int = 2) -> Tensor:
        layers = [(self._p(f"{name}.{i}.w"), self._p(f"{name}.{i}.b")) for i in range(depth)]
        return mlp_forward(x, layers, ["relu"] * (depth - 1) + ["none"])

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return layer_norm(x, self._p(f"{name}.g"), self._p(f"{name}.b"))

    def _attention(self, name: str, queries: Tensor, keys: Tensor, key_mask: np.ndarray) -> Tensor:
        """Multi-head attention of queries [B, Tq, D] over keys [B, Tk, D]"""
        batch, tq, d = queries.shape
        tk = keys.shape[1]
        heads = self.config.heads
        dh = d // heads
        q = self._linear(f"{name}.q", queries).reshape((batch, tq, heads, dh)).transpose((0, 2, 1, 3))
        k = self._linear(f"{name}.k", keys).reshape((batch, tk, heads, dh)).transpose((0, 2, 3, 1))
        v = self._linear(f"{name}.v", keys).reshape((batch, tk, heads, dh)).transpose((0, 2, 1, 3))
        bias = np.where(key_mask, 0.0, MASK_VALUE)[:, None, None, :]
        weights = softmax(matmul(q, k) * (1.0 / math.sqrt(dh)) + constant(bias), 1.0, axis=-1)
        mixed = matmul(weights, v).transpose((0, 2, 1, 3)).reshape((batch, tq, d))
        return self._linear(f"{name}.o", mixed)

    # -- input preparation --------------------------------------------------

    def prepare(self, pairs: Sequence[Tuple[FeatureSource, QueryInput]]) -> PairBatch:
        """
        Pad a sequence of (proposals or proposal features, query) pairs

        Raises:
            ContractError: If a pair has no proposals
        """
        cfg = self.config
        features = [
            src if isinstance(src, np.ndarray) else proposal_features(src, cfg.room_extent)
            for src, _ in pairs
        ]
        if not pairs or any(f.shape[0] == 0 for f in features):
            raise ContractError("every pair needs at least one proposal")

        batch = len(pairs)
        max_m = max(f.shape[0] for f in features)
        queries = [q for _, q in pairs]
        lengths = [min(len(q.words), cfg.max_tokens) for q in queries]
        truncated = sum(1 for q in queries if len(q.words) > cfg.max_tokens)
        max_t = 1 + max(lengths)
        max_p = max(len(q.phrase_spans) for q in queries)

        padded = np.zeros((batch, max_m, cfg.proposal_feature_dim))
        proposal_mask = np.zeros((batch, max_m), dtype=bool)
        token_ids = np.zeros((batch, max_t), dtype=np.int64)
        token_mask = np.zeros((batch, max_t), dtype=bool)
        pooling = np.zeros((batch, max_p, max_t))
        phrase_mask = np.zeros((batch, max_p), dtype=bool)

        for b, (feat, query, length) in enumerate(zip(features, queries, lengths)):
            padded[b, :feat.shape[0]] = feat
            proposal_mask[b, :feat.shape[0]] = True
            token_ids[b, 1:1 + length] = self.token_vocab.encode(query.words[:length])
            token_mask[b, :1 + length] = True
            for x, (start, end) in enumerate(query.phrase_spans):
                start = min(start, max(length - 1, 0))
                end = max(start + 1, min(end, length))
                pooling[b, x, 1 + start:1 + end] = 1.0 / (end - start)
                phrase_mask[b, x] = True

        if truncated:
            logger.warning(f"Truncated {truncated} queries to {cfg.max_tokens} tokens")
        return PairBatch(padded, proposal_mask, token_ids, token_mask, pooling, phrase_mask, truncated)

    # -- encoders -----------------------------------------------------------

    def _encode_proposals(self, features: np.ndarray) -> Tensor:
        return self._mlp("visual", constant(features))

    def _encode_tokens(self, token_ids: np.ndarray, token_mask: np.ndarray) -> Tensor:
        batch, length = token_ids.shape
        d = self.config.embed_dim
        summary = self._p("text.summary").reshape((1, 1, d)) * constant(np.ones((batch, 1, 1)))
        words = take(self._p("text.token_embedding"), token_ids[:, 1:])
        x = concat([summary, words], axis=1) + take(self._p("text.position_embedding"), np.arange(length))
        for layer in range(self.config.text_layers):
            prefix = f"text.{layer}"
            h = self._norm(f"{prefix}.ln_attn", x)
            x = x + self._attention(f"{prefix}.attn", h, h, token_mask)
            x = x + self._mlp(f"{prefix}.ffn", self._norm(f"{prefix}.ln_ffn", x))
        return x

    def _fuse(self, p: Tensor, t: Tensor, proposal_mask: np.ndarray, token_mask: np.ndarray
              ) -> Tuple[Tensor, Tensor]:
        for layer in range(self.config.fusion_layers):
            prefix = f"fusion.{layer}"
            if self.config.proposal_self_attention:
                h = self._norm(f"{prefix}.ln_self", p)
                p = p + self._attention(f"{prefix}.self_attn", h, h, proposal_mask)
            p = p + self._attention(f"{prefix}.p2t", self._norm(f"{prefix}.ln_p2t_query", p),
                                    self._norm(f"{prefix}.ln_p2t_key", t), token_mask)
            t = t + self._attention(f"{prefix}.t2p", self._norm(f"{prefix}.ln_t2p_query", t),
                                    self._norm(f"{prefix}.ln_t2p_key", p), proposal_mask)
            p = p + self._mlp(f"{prefix}.ffn_p", self._norm(f"{prefix}.ln_ffn_p", p))
            t = t + self._mlp(f"{prefix}.ffn_t", self._norm(f"{prefix}.ln_ffn_t", t))
        return p, t

    def _heads(self, p: Tensor, t: Tensor, pooling: np.ndarray, proposal_mask: np.ndarray,
               phrase_mask: np.ndarray) -> FusedBatch:
        sentence = t[:, 0, :]
        phrases = matmul(constant(pooling), t)
        logits = self._mlp("classifier", p)
        return FusedBatch(p, sentence, phrases, logits, proposal_mask, phrase_mask)

    def forward(self, batch: PairBatch) -> FusedBatch:
        """Full pipeline over a padded batch"""
        p = self._encode_proposals(batch.features)
        t = self._encode_tokens(batch.token_ids, batch.token_mask)
        p, t = self._fuse(p, t, batch.proposal_mask, batch.token_mask)
        return self._heads(p, t, batch.pooling, batch.proposal_mask, batch.phrase_mask)

    # -- single-pair operations ---------------------------------------------

    def encode_proposals(self, proposals: FeatureSource) -> Tensor:
        """
        Visual encoder f_po [m, D]

        Raises:
            ContractError: If there are no proposals
        """
        features = proposals if isinstance(proposals, np.ndarray) else \
            proposal_features(proposals, self.config.room_extent)
        if features.shape[0] == 0:
            raise ContractError("encode_proposals needs at least one proposal")
        return self._encode_proposals(features)

    def encode_text(self, query: QueryInput) -> TextStates:
        """Token states [T, D] (summary slot first), sentence state [D] and phrase states [n', D]"""
        batch = self.prepare([(np.zeros((1, self.config.proposal_feature_dim)), query)])
        t = self._encode_tokens(batch.token_ids, batch.token_mask)
        phrases = matmul(constant(batch.pooling[0]), t[0])
        return TextStates(t[0], t[0, 0], phrases, query.phrase_spans)

    def fuse(self, f_po: Tensor, text: TextStates) -> EncodedPair:
        """Fusion of one pair's proposal and token states"""
        m, length = f_po.shape[0], text.tokens.shape[0]
        proposal_mask = np.ones((1, m), dtype=bool)
        token_mask = np.ones((1, length), dtype=bool)
        p, t = self._fuse(f_po.reshape((1, m, -1)), text.tokens.reshape((1, length, -1)),
                          proposal_mask, token_mask)
        words = QueryInput(("",) * (length - 1), text.phrase_spans)
        pooling = self.prepare([(np.zeros((1, self.config.proposal_feature_dim)), words)]).pooling
        return self._heads(p, t, pooling, proposal_mask, np.ones((1, pooling.shape[1]), dtype=bool)).pair(0)

    def encode_pair(self, proposals: FeatureSource, query: QueryInput) -> EncodedPair:
        return self.forward(self.prepare([(proposals, query)])).pair(0)

    def relation_head(self, subject: Tensor, anchor: Tensor) -> Tensor:
        """Relation logits for (subject, anchor) embeddings [..., D] -> [..., R]"""
        return self._mlp("relation", concat([subject, anchor], axis=-1))

    # -- negatives ----------------------------------------------------------

    def phrase_embedding_table(self) -> np.ndarray:
        """Category phrase embeddings from the token embedding table, [c, D]"""
        return category_phrase_embeddings(self.params["text.token_embedding"], self.token_vocab,
                                          self.category_names)

    # -- checkpoints --------------------------------------------------------

    def checksum(self) -> str:
        return self.params.checksum()

    def header(self) -> dict:
        return {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_config": self.config.model_dump(mode="json"),
            "token_vocab": list(self.token_vocab.words),
            "categories": list(self.category_names),
            "params": [[name, list(self.params[name].shape)] for name in sorted(self.params)],
        }

    def save(self, path: Union[str, Path]) -> None:
        """Header line, then little-endian float64 arrays in sorted name order"""
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":"))
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as f:
                f.write(header.encode("utf-8") + b"\n")
                for name in sorted(self.params):
                    f.write(self.params[name].astype("<f8").tobytes())
        except OSError as e:
            raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
        logger.info(f"Saved checkpoint {path} ({self.params.num_parameters()} parameters)")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GroundingModel":
        """
        Load a checkpoint written by save

        Raises:
            CheckpointError: If the file is missing, truncated or malformed
        """
        try:
            with open(path, "rb") as f:
                header = json.loads(f.readline().decode("utf-8"))
                payload = f.read()
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

        if not isinstance(header, dict) or header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format in {path}")
        try:
            config = ModelConfig(**header["model_config"])
            shapes = [(name, tuple(shape)) for name, shape in header["params"]]
            vocab = TokenVocabulary(header["token_vocab"])
            categories = header["categories"]
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"malformed checkpoint header in {path}: {e}") from e

        expected = sum(int(np.prod(shape)) for _, shape in shapes) * 8
        if len(payload) != expected:
            raise CheckpointError(f"checkpoint {path} holds {len(payload)} bytes, expected {expected}")

        store = ParamStore()
        offset = 0
        for name, shape in shapes:
            count = int(np.prod(shape))
            store.add(name, np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape))
            offset += count * 8

        model = cls(config, vocab, categories, store)
        missing = {name for name, _, _, _ in model._parameter_layout()} ^ set(store.names())
        if missing:
            raise CheckpointError(f"checkpoint {path} parameters do not match its config: {sorted(missing)}")
        logger.info(f"Loaded checkpoint {path}")
        return model
