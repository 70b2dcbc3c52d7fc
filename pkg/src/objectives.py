"""
Training objectives for WeakGround
==================================

The four weakly-supervised losses and their weighted total:

- L_se   category-level matching: the sentence-to-proposal similarity
         distribution is pulled toward the classifier's target-category
         distribution (KL, supervision detached);
- L_PN   negative category recognition: top-3 sentence/proposal
         compatibility of the query against k phrase-swapped negatives;
- L_phr  instance-level matching: phrase/scene scores contrasted across the
         scenes of a batch;
- L_rel  relation matching: cross-entropy of the relation head on the
         proposals most similar to the subject and anchor phrases.

Kernels work on padded batches (leading axis = pairs, boolean masks for
valid proposals and phrases); the single-pair functions wrap them with a
batch of one.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from src.exceptions import ContractError
from src.numcore import (
    Tensor,
    constant,
    concat,
    cosine_matrix,
    info_nce_rows,
    lift,
    log_softmax,
    neg,
    reshape,
    tmax,
    topk_sum,
    tsum,
)

logger = logging.getLogger(__name__)

TOP_COMPATIBILITY = 3
MASK_VALUE = -1e9
PROB_FLOOR = 1e-12
LOSS_NAMES = ("se", "pn", "phr", "rel")


class LossWeights(BaseModel):
    lambda1: float = Field(0.4, ge=0.0)
    lambda2: float = Field(0.005, ge=0.0)
    lambda3: float = Field(0.05, ge=0.0)
    lambda4: float = Field(0.6, ge=0.0)
    temperature: float = Field(0.1, gt=0.0)
    se_temperature: float = Field(0.1, gt=0.0)
    classifier_weight: float = Field(1.0, ge=0.0)

    def weight(self, name: str) -> float:
        return {"se": self.lambda1, "pn": self.lambda2, "phr": self.lambda3, "rel": self.lambda4}[name]


@dataclass
class LossBundle:
    """
    Scalar losses of one batch

    `total` is the weighted sum of the four losses; `objective` adds the
    auxiliary classifier term and is what training differentiates.
    """

    components: Dict[str, Optional[Tensor]]
    total: Tensor
    aux: Optional[Tensor] = None
    objective: Optional[Tensor] = None

    @property
    def available(self) -> Dict[str, bool]:
        return {name: self.components.get(name) is not None for name in LOSS_NAMES}

    def value(self, name: str) -> Optional[float]:
        component = self.components.get(name)
        return None if component is None else component.item()

    def to_dict(self) -> Dict[str, Optional[float]]:
        values = {f"L_{name}": self.value(name) for name in LOSS_NAMES}
        values["total"] = self.total.item()
        values["aux"] = None if self.aux is None else self.aux.item()
        return values


def _mask_bias(mask: np.ndarray) -> Tensor:
    return constant(np.where(mask, 0.0, MASK_VALUE))


def _rows(matrix: Tensor, rows: int) -> Tensor:
    return reshape(matrix, (rows, -1))


# ---------------------------------------------------------------------------
# Similarities and scores
# ---------------------------------------------------------------------------


def sentence_similarities(sentence_emb: Tensor, proposal_emb: Tensor) -> Tensor:
    """cos(F_se, F_po[y]) for every pair: [N, D] x [N, M, D] -> [N, M]"""
    n, d = sentence_emb.shape
    return _rows(cosine_matrix(reshape(sentence_emb, (n, 1, d)), proposal_emb), n)


def compatibility_scores(sentence_emb: Tensor, proposal_emb: Tensor, proposal_mask: np.ndarray) -> Tensor:
    """Sum of the top-min(3, m) sentence/proposal cosine similarities, [N]"""
    similarities = sentence_similarities(sentence_emb, proposal_emb)
    k = min(TOP_COMPATIBILITY, similarities.shape[1])
    return topk_sum(similarities, k, axis=-1, mask=proposal_mask)


def scene_score_from_similarities(similarities: Tensor, phrase_mask: Optional[np.ndarray] = None,
                                  proposal_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Sum over phrases of the best proposal similarity

    Args:
        similarities: [..., n', m] phrase/proposal similarities
        phrase_mask: [..., n'] valid phrases
        proposal_mask: [..., m] valid proposals

    Returns:
        [...] scene scores
    """
    similarities = lift(similarities)
    if proposal_mask is not None:
        similarities = similarities + constant(np.where(proposal_mask, 0.0, MASK_VALUE)[..., None, :])
    best = tmax(similarities, axis=-1)
    if phrase_mask is not None:
        best = best * constant(phrase_mask.astype(np.float64))
    return tsum(best, axis=-1)


def phrase_scene_scores(phrase_emb: Tensor, proposal_emb: Tensor, phrase_mask: np.ndarray,
                        proposal_mask: np.ndarray) -> Tensor:
    """S(Q, S) for every pair: [N, P, D] x [N, M, D] -> [N]"""
    return scene_score_from_similarities(cosine_matrix(phrase_emb, proposal_emb), phrase_mask, proposal_mask)


# ---------------------------------------------------------------------------
# Batched losses
# ---------------------------------------------------------------------------


def category_alignment_losses(similarities: Tensor, target_probs: np.ndarray, proposal_mask: np.ndarray,
                              se_temperature: float) -> Tensor:
    """
    Per-pair KL(target || prediction) over proposals

    Args:
        similarities: [N, M] sentence/proposal cosine similarities S_se
        target_probs: [N, M] detached P_s[:, target category] per pair
        proposal_mask: [N, M] valid proposals
        se_temperature: Temperature of both distributions

    Returns:
        [N] losses
    """
    logits = np.where(proposal_mask, np.log(np.clip(target_probs, PROB_FLOOR, 1.0)), -np.inf) / se_temperature
    logits -= logits.max(axis=1, keepdims=True)
    target = np.where(proposal_mask, np.exp(logits), 0.0)
    target /= target.sum(axis=1, keepdims=True)
    log_target = np.where(target > 0.0, np.log(np.where(target > 0.0, target, 1.0)), 0.0)

    predicted = log_softmax(similarities + _mask_bias(proposal_mask), se_temperature, axis=1)
    entropy_term = (target * log_target).sum(axis=1)
    return constant(entropy_term) - tsum(predicted * constant(target), axis=1)


def info_nce_losses(positive: Tensor, negatives: Optional[Tensor], temperature: float) -> Tensor:
    """Row-wise InfoNCE of positives [N] against negatives [N, k]"""
    if negatives is None or negatives.shape[-1] == 0:
        return constant(np.zeros(positive.shape[0]))
    logits = concat([reshape(positive, (-1, 1)), negatives], axis=1)
    return info_nce_rows(logits, temperature)


def loss_phr_terms(scores: Tensor, temperature: float) -> Tensor:
    """Per-query -log h(Q_i, S_i) for a [b, b] score matrix (queries x scenes)"""
    scores = lift(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ContractError(f"loss_phr needs a square score matrix, got {scores.shape}")
    b = scores.shape[0]
    diagonal = np.arange(b)
    return neg(log_softmax(scores, temperature, axis=1)[diagonal, diagonal])


def loss_phr(scores: Tensor, temperature: float) -> Tensor:
    """
    Scene-contrastive phrase loss

    Args:
        scores: [b, b] matrix with S(Q_i, S_j) at row i, column j; paired
            scenes on the diagonal
        temperature: Temperature tau

    Returns:
        Mean over queries; exactly 0 for a batch of one
    """
    scores = lift(scores)
    if scores.shape[0] == 1:
        return Tensor(0.0)
    return loss_phr_terms(scores, temperature).mean()


@dataclass
class RelationSelection:
    """Proposal picked for each triple's subject and anchor"""

    pair_index: np.ndarray
    subject_proposal: np.ndarray
    anchor_proposal: np.ndarray
    relation: np.ndarray
    weight: np.ndarray

    def __len__(self) -> int:
        return len(self.relation)


def select_relation_proposals(phrase_emb: Tensor, proposal_emb: Tensor, proposal_mask: np.ndarray,
                              triples: Sequence[Sequence[Tuple[int, int, int]]]) -> RelationSelection:
    """
    Most similar proposal per subject / anchor phrase (lowest index on ties)

    Args:
        phrase_emb: [N, P, D]
        proposal_emb: [N, M, D]
        proposal_mask: [N, M]
        triples: Per pair, (relation, subject phrase, anchor phrase) triples

    Returns:
        Flat selection with per-triple weights giving each pair equal share
    """
    similarities = cosine_matrix(phrase_emb, proposal_emb).data
    similarities = np.where(proposal_mask[:, None, :], similarities, -np.inf)
    best = np.argmax(similarities, axis=-1)
    with_triples = sum(1 for t in triples if t)

    rows: List[Tuple[int, int, int, int, float]] = []
    for n, pair_triples in enumerate(triples):
        for relation, subject, anchor in pair_triples:
            weight = 1.0 / (len(pair_triples) * with_triples)
            rows.append((n, int(best[n, subject]), int(best[n, anchor]), int(relation), weight))
    columns = list(zip(*rows)) if rows else [(), (), (), (), ()]
    return RelationSelection(
        np.asarray(columns[0], dtype=np.int64),
        np.asarray(columns[1], dtype=np.int64),
        np.asarray(columns[2], dtype=np.int64),
        np.asarray(columns[3], dtype=np.int64),
        np.asarray(columns[4], dtype=np.float64),
    )


def relation_loss(relation_head, proposal_emb: Tensor, selection: RelationSelection) -> Optional[Tensor]:
    """Weighted cross-entropy of the relation head; None without triples"""
    if len(selection) == 0:
        return None
    subjects = proposal_emb[selection.pair_index, selection.subject_proposal]
    anchors = proposal_emb[selection.pair_index, selection.anchor_proposal]
    logits = relation_head(subjects, anchors)
    picked = log_softmax(logits, 1.0, axis=-1)[np.arange(len(selection)), selection.relation]
    return neg(tsum(picked * constant(selection.weight)))


def classifier_alignment_loss(category_logits: Tensor, detector_labels: np.ndarray,
                              proposal_mask: np.ndarray) -> Tensor:
    """
    Cross-entropy of P_s against the detector's argmax category

    Args:
        category_logits: [N, M, c] classifier logits
        detector_labels: [N, M] argmax of det_likelihood per proposal
        proposal_mask: [N, M] valid proposals

    Returns:
        Mean over valid proposals
    """
    log_probs = log_softmax(category_logits, 1.0, axis=-1)
    n, m = detector_labels.shape
    picked = log_probs[np.arange(n)[:, None], np.arange(m)[None, :], detector_labels]
    weight = proposal_mask.astype(np.float64) / max(int(proposal_mask.sum()), 1)
    return neg(tsum(picked * constant(weight)))


def total_loss(components: Dict[str, Optional[Union[Tensor, float]]], weights: LossWeights,
               aux: Optional[Tensor] = None) -> LossBundle:
    """
    Weighted sum of the available losses

    Args:
        components: Loss per name ("se", "pn", "phr", "rel"); None or missing
            means absent
        weights: Lambda weights
        aux: Optional classifier alignment loss added to the objective only

    Returns:
        LossBundle
    """
    lifted = {name: None if components.get(name) is None else lift(components[name]) for name in LOSS_NAMES}
    total = Tensor(0.0)
    for name in LOSS_NAMES:
        if lifted[name] is not None:
            total = total + lifted[name] * weights.weight(name)
    objective = total if aux is None else total + aux * weights.classifier_weight
    return LossBundle(lifted, total, aux, objective)


# ---------------------------------------------------------------------------
# Single-pair forms
# ---------------------------------------------------------------------------


def loss_se(proposal_emb: Tensor, sentence_emb: Tensor, category_probs: Tensor, target_category: int,
            se_temperature: float = 0.1) -> Tensor:
    """
    Category-level matching loss of one pair

    Args:
        proposal_emb: F_po [m, D]
        sentence_emb: F_se [1, D] or [D]
        category_probs: P_s [m, c]; only its values are used
        target_category: Category index of the target phrase
        se_temperature: Temperature tau_se

    Returns:
        Scalar KL divergence
    """
    m, c = category_probs.shape
    if not 0 <= target_category < c:
        raise ContractError(f"target category {target_category} outside [0, {c})")
    sentence = reshape(lift(sentence_emb), (1, -1))
    proposals = reshape(lift(proposal_emb), (1, m, -1))
    mask = np.ones((1, m), dtype=bool)
    target = lift(category_probs).data[:, target_category].reshape(1, m)
    return reshape(category_alignment_losses(sentence_similarities(sentence, proposals), target, mask,
                                             se_temperature), ())


def loss_pn(proposal_emb: Tensor, sentence_pos: Tensor, sentence_negs: Tensor, temperature: float = 0.1) -> Tensor:
    """
    Negative category recognition loss of one pair

    Args:
        proposal_emb: F_po [m, D]
        sentence_pos: Positive sentence embedding [1, D] or [D]
        sentence_negs: Negative sentence embeddings [k, D]
        temperature: Temperature tau

    Returns:
        Scalar InfoNCE loss; exactly 0 when k = 0
    """
    proposal_emb = lift(proposal_emb)
    sentence_negs = lift(sentence_negs)
    k = sentence_negs.shape[0] if sentence_negs.ndim == 2 else 0
    if k == 0:
        return Tensor(0.0)
    m, d = proposal_emb.shape
    sentences = concat([reshape(lift(sentence_pos), (1, d)), sentence_negs], axis=0)
    proposals = reshape(proposal_emb, (1, m, d)) * constant(np.ones((k + 1, 1, 1)))
    scores = compatibility_scores(sentences, proposals, np.ones((k + 1, m), dtype=bool))
    return reshape(info_nce_losses(scores[0:1], reshape(scores[1:], (1, k)), temperature), ())


def phrase_scene_score(phrase_emb: Tensor, proposal_emb: Tensor) -> Tensor:
    """S(Q, S) = sum over phrases of the max cosine similarity to any proposal"""
    phrase_emb, proposal_emb = lift(phrase_emb), lift(proposal_emb)
    if phrase_emb.shape[0] < 1 or proposal_emb.shape[0] < 1:
        raise ContractError("phrase_scene_score needs at least one phrase and one proposal")
    return scene_score_from_similarities(cosine_matrix(phrase_emb, proposal_emb))


def loss_rel(parsed, phrase_emb: Tensor, proposal_emb: Tensor, relation_head) -> Optional[Tensor]:
    """
    Relation matching loss of one pair

    Returns:
        Mean cross-entropy over the query's triples, or None without triples
    """
    triples = [(int(t.relation), t.subject, t.anchor) for t in parsed.relation_triples]
    if not triples:
        return None
    phrase_emb, proposal_emb = lift(phrase_emb), lift(proposal_emb)
    n, d = phrase_emb.shape
    m = proposal_emb.shape[0]
    proposals = reshape(proposal_emb, (1, m, d))
    selection = select_relation_proposals(reshape(phrase_emb, (1, n, d)), proposals,
                                          np.ones((1, m), dtype=bool), [triples])
    return relation_loss(relation_head, proposals, selection)
