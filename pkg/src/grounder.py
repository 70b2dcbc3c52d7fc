"""
Inference for WeakGround
========================

Two-branch decision rule on a frozen model:

    p_c[y] = cos(F_se, F_po[y])                  category branch
    p_f[y] = max_x cos(F_phr[x], F_po[y])        instance branch

The branch with the higher maximum wins; an exact tie goes to the category
branch and ties inside a branch go to the lowest proposal index.

When the parsed query relates its target phrase to an anchor phrase, both
score vectors are refined before the decision with

    e[y] = w * sum over triples of log P_rel(r | F_po[y], F_po[anchor])

where the anchor proposal is the argmax of the anchor phrase similarity (the
selection rule of L_rel) and is itself pinned to the floor probability. The
weight w is ModelConfig.relation_weight; w = 0 gives the unrefined rule.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.exceptions import ContractError, ParseError
from src.geometry import Box3
from src.model import GroundingModel, QueryInput
from src.numcore import constant, cosine_matrix, log_softmax
from src.queryparse import ParsedQuery, parse
from src.synthworld import Proposal

logger = logging.getLogger(__name__)

CATEGORY_BRANCH = "category"
INSTANCE_BRANCH = "instance"
RELATION_PROB_FLOOR = 1e-6

RelationHead = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class GroundingResult:
    """
    Outcome of one query

    `category_scores` and `instance_scores` are the raw cosine vectors p_c and
    p_f; `relation_scores` is the evidence added to both before the decision.
    """

    proposal_index: int
    branch: str
    category_scores: np.ndarray
    instance_scores: np.ndarray
    parsed: Optional[ParsedQuery] = None
    box: Optional[Box3] = None
    relation_scores: Optional[np.ndarray] = None

    @property
    def category_decision(self) -> np.ndarray:
        if self.relation_scores is None:
            return self.category_scores
        return self.category_scores + self.relation_scores

    @property
    def instance_decision(self) -> np.ndarray:
        if self.relation_scores is None or not self.instance_scores.size:
            return self.instance_scores
        return self.instance_scores + self.relation_scores

    @property
    def max_category(self) -> float:
        return float(self.category_scores.max())

    @property
    def max_instance(self) -> Optional[float]:
        return float(self.instance_scores.max()) if self.instance_scores.size else None

    @property
    def category_choice(self) -> int:
        return int(np.argmax(self.category_decision))

    @property
    def instance_choice(self) -> Optional[int]:
        return int(np.argmax(self.instance_decision)) if self.instance_scores.size else None

    def to_dict(self) -> dict:
        return {
            "proposal_index": self.proposal_index,
            "branch": self.branch,
            "max_p_c": self.max_category,
            "max_p_f": self.max_instance,
            "box": self.box.to_dict() if self.box else None,
        }


def choose_branch(category_scores: Sequence[float], instance_scores: Optional[Sequence[float]]) -> Tuple[int, str]:
    """
    Pick (proposal index, branch) from the two score vectors

    Args:
        category_scores: p_c, one score per proposal
        instance_scores: p_f, empty or None when no phrase was parsed

    Returns:
        (index, "category" | "instance")
    """
    p_c = np.asarray(category_scores, dtype=np.float64)
    if p_c.size == 0:
        raise ContractError("cannot choose among zero proposals")
    best_c = int(np.argmax(p_c))
    if instance_scores is None or len(instance_scores) == 0:
        return best_c, CATEGORY_BRANCH
    p_f = np.asarray(instance_scores, dtype=np.float64)
    best_f = int(np.argmax(p_f))
    if p_c[best_c] >= p_f[best_f]:
        return best_c, CATEGORY_BRANCH
    return best_f, INSTANCE_BRANCH


def relation_evidence(proposal_emb: np.ndarray, phrase_emb: np.ndarray, parsed: Optional[ParsedQuery],
                      relation_head: RelationHead, weight: float) -> Optional[np.ndarray]:
    """
    Weighted log-probability that each proposal stands in the parsed relations

    Args:
        proposal_emb: F_po [m, D]
        phrase_emb: F_phr [n', D]
        parsed: Parse of the query; only triples whose subject is the target
            phrase count
        relation_head: Maps subject rows [m, D] and anchor rows [m, D] to
            relation logits [m, R]
        weight: Scale of the evidence

    Returns:
        [m] evidence, or None when there is nothing to refine
    """
    if parsed is None or weight <= 0.0 or proposal_emb.shape[0] < 2:
        return None
    triples = [t for t in parsed.relation_triples
               if t.subject == parsed.target_index and t.anchor < phrase_emb.shape[0]]
    if not triples:
        return None

    m = proposal_emb.shape[0]
    similarities = cosine_matrix(phrase_emb, proposal_emb).data
    log_floor = np.log(RELATION_PROB_FLOOR)
    evidence = np.zeros(m)
    for triple in triples:
        anchor = int(np.argmax(similarities[triple.anchor]))
        logits = relation_head(proposal_emb, np.repeat(proposal_emb[anchor:anchor + 1], m, axis=0))
        log_probs = log_softmax(constant(logits), 1.0, axis=-1).data[:, int(triple.relation)]
        log_probs = np.maximum(log_probs, log_floor)
        log_probs[anchor] = log_floor
        evidence += log_probs
    return weight * evidence


class Grounder:
    """Grounds queries with a frozen GroundingModel"""

    def __init__(self, model: GroundingModel, chunk_size: int = 64):
        self.model = model
        self.chunk_size = chunk_size
        self.relation_weight = model.config.relation_weight

    def _relation_head(self, subjects: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        return self.model.relation_head(constant(subjects), constant(anchors)).data

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path]) -> "Grounder":
        return cls(GroundingModel.load(path))

    def query_input(self, text: str) -> Tuple[QueryInput, Optional[ParsedQuery]]:
        """
        Parsed query input, or the raw sentence when parsing fails

        Raises:
            ParseError: If the text yields no token at all
        """
        try:
            parsed = parse(text, self.model.category_names)
            return QueryInput.from_parsed(parsed), parsed
        except ParseError:
            query = QueryInput.from_text(text, self.model.category_names)
            if not query.words:
                raise ParseError(f"query '{text}' yields no tokens")
            logger.debug(f"No category phrase in '{text}', category branch only")
            return query, None

    def infer_many(self, requests: Sequence[Tuple[Sequence[Proposal], str]]) -> List[GroundingResult]:
        """Ground several (proposals, query text) requests, batched by chunk"""
        prepared = []
        for proposals, text in requests:
            if not proposals:
                raise ContractError("inference needs at least one proposal")
            query, parsed = self.query_input(text)
            prepared.append((proposals, query, parsed))

        results: List[GroundingResult] = []
        for start in range(0, len(prepared), self.chunk_size):
            chunk = prepared[start:start + self.chunk_size]
            fused = self.model.forward(self.model.prepare([(p, q) for p, q, _ in chunk]))
            for offset, (proposals, _, parsed) in enumerate(chunk):
                pair = fused.pair(offset)
                p_c = cosine_matrix(pair.proposal_emb, pair.sentence_emb).data[:, 0]
                if pair.phrase_emb.shape[0]:
                    p_f = cosine_matrix(pair.proposal_emb, pair.phrase_emb).data.max(axis=1)
                else:
                    p_f = np.zeros(0)
                evidence = relation_evidence(pair.proposal_emb.data, pair.phrase_emb.data, parsed,
                                             self._relation_head, self.relation_weight)
                result = GroundingResult(0, CATEGORY_BRANCH, p_c, p_f, parsed, relation_scores=evidence)
                index, branch = choose_branch(result.category_decision, result.instance_decision)
                result.proposal_index, result.branch, result.box = index, branch, proposals[index].box
                results.append(result)
        return results

    def infer(self, proposals: Sequence[Proposal], text: str) -> GroundingResult:
        return self.infer_many([(proposals, text)])[0]


def infer(proposals: Sequence[Proposal], text: str,
          checkpoint: Union[str, Path, GroundingModel]) -> Tuple[int, str, np.ndarray, np.ndarray]:
    """(chosen proposal index, branch, p_c, p_f) for one query"""
    model = checkpoint if isinstance(checkpoint, GroundingModel) else GroundingModel.load(checkpoint)
    result = Grounder(model).infer(proposals, text)
    return result.proposal_index, result.branch, result.category_scores, result.instance_scores
