"""Tests for the two-branch inference rule."""

import numpy as np
import pytest

from src.exceptions import ContractError, ParseError
from src.file_manager import DatasetFileManager
from src.geometry import RelationId
from src.grounder import (
    CATEGORY_BRANCH,
    INSTANCE_BRANCH,
    RELATION_PROB_FLOOR,
    Grounder,
    GroundingResult,
    choose_branch,
    infer,
    relation_evidence,
)
from src.queryparse import NounPhrase, ParsedQuery, RelationTriple


@pytest.fixture(scope="module")
def oracle_scenes(oracle_dataset):
    return DatasetFileManager().read_scenes(oracle_dataset, mode="full", split="test")[0]


class TestChooseBranch:
    def test_higher_maximum_wins(self):
        assert choose_branch([0.1, 0.2], [0.05, 0.9]) == (1, INSTANCE_BRANCH)
        assert choose_branch([0.8, 0.2], [0.05, 0.7]) == (0, CATEGORY_BRANCH)

    def test_exact_tie_goes_to_category(self):
        assert choose_branch([0.5, 0.2], [0.1, 0.5]) == (0, CATEGORY_BRANCH)

    def test_ties_within_branch_pick_lowest_index(self):
        assert choose_branch([0.1, 0.1], [0.7, 0.7]) == (0, INSTANCE_BRANCH)
        assert choose_branch([0.3, 0.3, 0.3], None) == (0, CATEGORY_BRANCH)

    def test_without_phrases_only_category_branch(self):
        assert choose_branch([0.2, 0.4], []) == (1, CATEGORY_BRANCH)

    def test_no_proposals(self):
        with pytest.raises(ContractError):
            choose_branch([], [])

    def test_common_positive_scale_keeps_decision(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p_c, p_f = rng.uniform(-1, 1, 7), rng.uniform(-1, 1, 7)
            scale = rng.uniform(0.1, 10.0)
            assert choose_branch(p_c * scale, p_f * scale) == choose_branch(p_c, p_f)


CHAIR, BED = [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]


def _chair_left_of_bed() -> ParsedQuery:
    return ParsedQuery(
        tokens=("the", "chair", "left of", "the", "bed"),
        noun_phrases=(NounPhrase("chair", (1, 2), 0), NounPhrase("bed", (4, 5), 1)),
        relation_triples=(RelationTriple(RelationId.LEFT, 0, 1),),
    )


def _left_for_row(row: int):
    """Relation head that says LEFT holds only for subject `row`"""

    def head(subjects: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        logits = np.zeros((subjects.shape[0], len(RelationId)))
        logits[row, RelationId.LEFT] = 5.0
        return logits

    return head


class TestRelationEvidence:
    proposals = np.array([CHAIR, CHAIR, BED])
    phrases = np.array([CHAIR, BED])

    def test_evidence_breaks_ties_between_same_category_proposals(self):
        evidence = relation_evidence(self.proposals, self.phrases, _chair_left_of_bed(), _left_for_row(1), 0.25)
        assert evidence.shape == (3,)
        assert evidence[1] > evidence[0]
        raw = np.array([0.9, 0.9, 0.1])
        assert choose_branch(raw, raw) == (0, CATEGORY_BRANCH)
        result = GroundingResult(0, CATEGORY_BRANCH, raw, raw, relation_scores=evidence)
        assert choose_branch(result.category_decision, result.instance_decision) == (1, CATEGORY_BRANCH)
        assert result.max_category == pytest.approx(0.9)

    def test_anchor_cannot_be_the_target(self):
        evidence = relation_evidence(self.proposals, self.phrases, _chair_left_of_bed(), _left_for_row(2), 1.0)
        assert evidence[2] == pytest.approx(np.log(RELATION_PROB_FLOOR))
        assert evidence[2] < evidence[0]

    def test_weight_scales_evidence(self):
        parsed = _chair_left_of_bed()
        once = relation_evidence(self.proposals, self.phrases, parsed, _left_for_row(1), 1.0)
        twice = relation_evidence(self.proposals, self.phrases, parsed, _left_for_row(1), 2.0)
        np.testing.assert_allclose(twice, 2.0 * once)

    def test_nothing_to_refine(self):
        parsed = _chair_left_of_bed()
        head = _left_for_row(1)
        bare = ParsedQuery(parsed.tokens, parsed.noun_phrases)
        assert relation_evidence(self.proposals, self.phrases, None, head, 1.0) is None
        assert relation_evidence(self.proposals, self.phrases, bare, head, 1.0) is None
        assert relation_evidence(self.proposals, self.phrases, parsed, head, 0.0) is None
        assert relation_evidence(self.proposals[:1], self.phrases, parsed, head, 1.0) is None

    def test_triples_about_other_phrases_are_ignored(self):
        parsed = ParsedQuery(("the", "chair", "left of", "the", "bed"), _chair_left_of_bed().noun_phrases,
                             (RelationTriple(RelationId.LEFT, 1, 0),))
        assert relation_evidence(self.proposals, self.phrases, parsed, _left_for_row(1), 1.0) is None

    def test_without_evidence_decisions_are_the_raw_scores(self):
        result = GroundingResult(0, CATEGORY_BRANCH, np.array([0.2, 0.4]), np.array([]))
        np.testing.assert_array_equal(result.category_decision, result.category_scores)
        assert result.instance_choice is None
        assert result.category_choice == 1


class TestGrounder:
    def test_oracle_model_finds_every_target(self, oracle_model, oracle_scenes):
        grounder = Grounder(oracle_model)
        for scene in oracle_scenes:
            for query in scene.queries:
                result = grounder.infer(list(scene.proposals), query.text)
                assert result.branch == INSTANCE_BRANCH
                assert scene.proposals[result.proposal_index].matched_object == query.eval_target
                assert result.max_instance == pytest.approx(1.0)
                assert result.max_category == pytest.approx(0.0)

    def test_query_without_category_uses_category_branch(self, oracle_model, oracle_scenes):
        result = Grounder(oracle_model).infer(list(oracle_scenes[0].proposals), "the thing over there")
        assert result.branch == CATEGORY_BRANCH
        assert result.parsed is None
        assert result.instance_scores.size == 0
        assert result.to_dict()["max_p_f"] is None

    @pytest.mark.parametrize("text", ["", "?!"])
    def test_query_without_tokens(self, oracle_model, oracle_scenes, text):
        with pytest.raises(ParseError):
            Grounder(oracle_model).infer(list(oracle_scenes[0].proposals), text)

    def test_no_proposals(self, oracle_model):
        with pytest.raises(ContractError):
            Grounder(oracle_model).infer([], "the chair")

    def test_chunking_does_not_change_results(self, oracle_model, oracle_scenes):
        requests = [(list(scene.proposals), query.text) for scene in oracle_scenes for query in scene.queries]
        whole = Grounder(oracle_model, chunk_size=64).infer_many(requests)
        chunked = Grounder(oracle_model, chunk_size=1).infer_many(requests)
        assert [r.proposal_index for r in whole] == [r.proposal_index for r in chunked]
        for a, b in zip(whole, chunked):
            np.testing.assert_allclose(a.category_scores, b.category_scores, atol=1e-10)
            np.testing.assert_allclose(a.instance_scores, b.instance_scores, atol=1e-10)

    def test_result_carries_box_and_parse(self, oracle_model, oracle_scenes):
        scene = oracle_scenes[0]
        query = scene.queries[0]
        result = Grounder(oracle_model).infer(list(scene.proposals), query.text)
        assert result.box == scene.proposals[result.proposal_index].box
        assert result.parsed.target_phrase.text == query.template_meta.target_category

    def test_functional_entry_point_loads_checkpoints(self, oracle_checkpoint, oracle_scenes):
        scene = oracle_scenes[0]
        index, branch, p_c, p_f = infer(list(scene.proposals), scene.queries[0].text, oracle_checkpoint)
        assert branch == INSTANCE_BRANCH
        assert p_c.shape == p_f.shape == (len(scene.proposals),)
        assert scene.proposals[index].matched_object == scene.queries[0].eval_target
