"""Tests for the four grounding losses, their batched kernels and the weighted total."""

import math

import numpy as np
import pytest

from src.exceptions import ContractError
from src.numcore import ParamStore, Tensor, concat, constant, grad_check, linear_forward, stack
from src.objectives import (
    LossWeights,
    category_alignment_losses,
    classifier_alignment_loss,
    compatibility_scores,
    info_nce_losses,
    loss_phr,
    loss_phr_terms,
    loss_pn,
    loss_rel,
    loss_se,
    phrase_scene_score,
    scene_score_from_similarities,
    select_relation_proposals,
    total_loss,
)
from src.queryparse import parse
from src.synthworld import DEFAULT_CATEGORIES

D = 6
MIN_GAP = 1e-3
# Gradients below this size are compared in absolute terms
GRAD_FLOOR = 1e-4


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _unit_rows(a) @ _unit_rows(b).T


def _separated(values: np.ndarray) -> bool:
    """Sorted entries of every row differ by at least MIN_GAP"""
    ordered = np.sort(np.atleast_2d(values), axis=-1)
    return ordered.shape[-1] < 2 or float(np.diff(ordered, axis=-1).min()) >= MIN_GAP


def _sample(rng, shapes, accept) -> ParamStore:
    """Draw parameters until `accept` holds, so no selection sits on a tie"""
    while True:
        store = ParamStore()
        for name, shape in shapes.items():
            store.add(name, rng.normal(size=shape))
        if accept(store):
            return store


class TestClosedForms:
    def test_phrase_loss_two_scenes(self):
        value = loss_phr(Tensor(np.eye(2)), 1.0).item()
        assert value == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-12)
        assert value == pytest.approx(0.3133, abs=1e-4)

    @pytest.mark.parametrize("b", [2, 3, 7])
    def test_phrase_loss_uniform_scores(self, b):
        assert loss_phr(Tensor(np.full((b, b), 0.4)), 0.1).item() == pytest.approx(math.log(b))

    def test_phrase_loss_single_scene_is_zero(self):
        assert loss_phr(Tensor([[5.0]]), 0.1).item() == 0.0

    def test_phrase_loss_needs_square_matrix(self):
        with pytest.raises(ContractError):
            loss_phr_terms(Tensor(np.zeros((2, 3))), 1.0)

    def test_negative_recognition_uniform(self):
        rng = np.random.default_rng(0)
        proposals = Tensor(rng.normal(size=(5, D)))
        sentence = rng.normal(size=D)
        negatives = Tensor(np.tile(sentence, (4, 1)))
        assert loss_pn(proposals, Tensor(sentence), negatives, 0.1).item() == pytest.approx(math.log(5))

    def test_negative_recognition_without_negatives(self):
        proposals = Tensor(np.ones((3, D)))
        assert loss_pn(proposals, Tensor(np.ones(D)), Tensor(np.zeros((0, D))), 0.1).item() == 0.0
        assert info_nce_losses(Tensor([1.0, 2.0]), None, 0.1).values == (0.0, 0.0)

    def test_compatibility_uses_top_three(self):
        sentence = Tensor([[1.0, 0.0]])
        proposals = Tensor([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.0], [2.0, 0.1]]])
        score = compatibility_scores(sentence, proposals, np.ones((1, 5), dtype=bool)).item()
        expected = sorted(_cos(np.array([[1.0, 0.0]]), proposals.data[0])[0])[-3:]
        assert score == pytest.approx(sum(expected))

    def test_compatibility_with_fewer_than_three_proposals(self):
        sentence = Tensor([[1.0, 0.0]])
        proposals = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
        assert compatibility_scores(sentence, proposals, np.ones((1, 2), dtype=bool)).item() == pytest.approx(1.0)

    def test_category_alignment_is_zero_when_distributions_agree(self):
        similarities = Tensor([[0.2, 0.2, 0.2]])
        target = np.full((1, 3), 0.3)
        loss = category_alignment_losses(similarities, target, np.ones((1, 3), dtype=bool), 0.1)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_category_alignment_is_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            m = int(rng.integers(1, 8))
            loss = category_alignment_losses(Tensor(rng.uniform(-1, 1, size=(1, m))),
                                             rng.uniform(0.0, 1.0, size=(1, m)),
                                             np.ones((1, m), dtype=bool), 0.1)
            assert loss.item() >= -1e-12

    def test_category_alignment_ignores_padding(self):
        mask = np.array([[True, True, False]])
        padded = category_alignment_losses(Tensor([[0.1, 0.5, 0.9]]), np.array([[0.2, 0.7, 1.0]]), mask, 0.1)
        plain = category_alignment_losses(Tensor([[0.1, 0.5]]), np.array([[0.2, 0.7]]),
                                          np.ones((1, 2), dtype=bool), 0.1)
        assert padded.item() == pytest.approx(plain.item(), abs=1e-12)

    def test_loss_se_rejects_unknown_category(self):
        with pytest.raises(ContractError):
            loss_se(Tensor(np.ones((2, D))), Tensor(np.ones(D)), Tensor(np.full((2, 3), 1 / 3)), 3)

    def test_classifier_alignment_uniform_logits(self):
        logits = Tensor(np.zeros((2, 3, 4)))
        labels = np.array([[0, 1, 2], [3, 0, 0]])
        mask = np.array([[True, True, True], [True, False, False]])
        assert classifier_alignment_loss(logits, labels, mask).item() == pytest.approx(math.log(4))


class TestSceneScore:
    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n, m = int(rng.integers(1, 6)), int(rng.integers(1, 9))
            similarities = rng.uniform(-1.0, 1.0, size=(n, m))
            expected = sum(max(row) for row in similarities.tolist())
            assert abs(scene_score_from_similarities(Tensor(similarities)).item() - expected) <= 1e-12

    def test_masks_exclude_padding(self):
        similarities = Tensor([[[0.1, 0.9, 0.95], [0.3, -0.2, 0.99], [0.5, 0.5, 0.5]]])
        phrase_mask = np.array([[True, True, False]])
        proposal_mask = np.array([[True, True, False]])
        score = scene_score_from_similarities(similarities, phrase_mask, proposal_mask).item()
        assert score == pytest.approx(0.9 + 0.3)

    def test_phrase_scene_score_matches_numpy(self):
        rng = np.random.default_rng(1)
        phrases, proposals = rng.normal(size=(3, D)), rng.normal(size=(7, D))
        expected = _cos(phrases, proposals).max(axis=1).sum()
        assert phrase_scene_score(Tensor(phrases), Tensor(proposals)).item() == pytest.approx(expected)

    def test_phrase_scene_score_needs_inputs(self):
        with pytest.raises(ContractError):
            phrase_scene_score(Tensor(np.zeros((0, D))), Tensor(np.ones((2, D))))


class TestInvariances:
    def test_negative_recognition_ignores_orderings(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            m, k = int(rng.integers(1, 9)), int(rng.integers(1, 6))
            proposals, sentence, negatives = rng.normal(size=(m, D)), rng.normal(size=D), rng.normal(size=(k, D))
            base = loss_pn(Tensor(proposals), Tensor(sentence), Tensor(negatives), 0.1).item()
            shuffled = loss_pn(Tensor(proposals[rng.permutation(m)]), Tensor(sentence),
                               Tensor(negatives[rng.permutation(k)]), 0.1).item()
            assert shuffled == pytest.approx(base, abs=1e-12)

    def test_losses_ignore_positive_rescaling(self):
        rng = np.random.default_rng(8)
        probs = Tensor(rng.dirichlet(np.ones(3), size=5))
        for _ in range(20):
            po, se, negs = rng.normal(size=(5, D)), rng.normal(size=(1, D)), rng.normal(size=(4, D))
            phrases = [rng.normal(size=(2, D)) for _ in range(3)]
            scenes = [rng.normal(size=(4, D)) for _ in range(3)]
            a, b, c = rng.uniform(0.01, 50.0, size=3)

            def values(po_scale, se_scale, phr_scale):
                scores = stack([
                    stack([phrase_scene_score(Tensor(p * phr_scale), Tensor(s * po_scale)) for s in scenes])
                    for p in phrases
                ])
                return (
                    loss_se(Tensor(po * po_scale), Tensor(se * se_scale), probs, 1).item(),
                    loss_pn(Tensor(po * po_scale), Tensor(se * se_scale), Tensor(negs * se_scale)).item(),
                    loss_phr(scores, 0.1).item(),
                )

            assert values(a, b, c) == pytest.approx(values(1.0, 1.0, 1.0), abs=1e-9)

    def test_relation_selection_ignores_positive_rescaling(self):
        rng = np.random.default_rng(9)
        phrases, proposals = rng.normal(size=(2, 3, D)), rng.normal(size=(2, 6, D))
        mask = np.ones((2, 6), dtype=bool)
        triples = [[(0, 0, 1), (3, 1, 2)], [(5, 2, 0)]]
        base = select_relation_proposals(Tensor(phrases), Tensor(proposals), mask, triples)
        scaled = select_relation_proposals(Tensor(phrases * 3.5), Tensor(proposals * 0.2), mask, triples)
        np.testing.assert_array_equal(scaled.subject_proposal, base.subject_proposal)
        np.testing.assert_array_equal(scaled.anchor_proposal, base.anchor_proposal)


class TestRelationSelection:
    def test_weights_share_pairs_equally(self):
        rng = np.random.default_rng(2)
        phrases = Tensor(rng.normal(size=(3, 2, D)))
        proposals = Tensor(rng.normal(size=(3, 4, D)))
        selection = select_relation_proposals(phrases, proposals, np.ones((3, 4), dtype=bool),
                                              [[(0, 0, 1), (4, 1, 0)], [], [(8, 0, 1)]])
        assert len(selection) == 3
        np.testing.assert_allclose(selection.weight, [0.25, 0.25, 0.5])
        np.testing.assert_array_equal(selection.pair_index, [0, 0, 2])
        expected = np.argmax(_cos(phrases.data[2], proposals.data[2]), axis=1)
        assert (selection.subject_proposal[2], selection.anchor_proposal[2]) == tuple(expected)

    def test_masked_proposals_are_never_selected(self):
        phrases = Tensor([[[1.0, 0.0]]])
        proposals = Tensor([[[0.0, 1.0], [1.0, 0.0]]])
        selection = select_relation_proposals(phrases, proposals, np.array([[True, False]]), [[(0, 0, 0)]])
        assert selection.subject_proposal[0] == 0

    def test_no_triples_gives_no_loss(self):
        parsed = parse("the chair", DEFAULT_CATEGORIES)
        assert loss_rel(parsed, Tensor(np.ones((1, D))), Tensor(np.ones((2, D))), None) is None


class TestTotal:
    def test_weighted_sum_of_available_losses(self):
        bundle = total_loss({"se": 1.0, "pn": None, "phr": 2.0}, LossWeights(lambda3=0.005))
        assert bundle.total.item() == pytest.approx(0.4 + 0.005 * 2.0)
        assert bundle.available == {"se": True, "pn": False, "phr": True, "rel": False}
        assert bundle.objective is bundle.total

    def test_auxiliary_term_enters_objective_only(self):
        bundle = total_loss({"rel": 1.0}, LossWeights(classifier_weight=2.0), aux=Tensor(0.5))
        assert bundle.total.item() == pytest.approx(0.6)
        assert bundle.objective.item() == pytest.approx(1.6)

    def test_to_dict_keys(self):
        values = total_loss({"se": 0.5}, LossWeights()).to_dict()
        assert list(values) == ["L_se", "L_pn", "L_phr", "L_rel", "total", "aux"]
        assert values["L_pn"] is None
        assert values["aux"] is None

    def test_weights_must_be_non_negative(self):
        with pytest.raises(ValueError):
            LossWeights(lambda1=-1.0)


class TestGradients:
    """Reverse-mode gradients of every loss against central differences"""

    seeds = range(20)

    @pytest.mark.parametrize("seed", seeds)
    def test_category_matching(self, seed):
        rng = np.random.default_rng(seed)
        probs = constant(_unit_rows(rng.uniform(0.1, 1.0, size=(5, 4))) ** 2)
        store = _sample(rng, {"po": (5, D), "se": (1, D)}, lambda s: True)
        report = grad_check(lambda s: loss_se(s.leaf("po"), s.leaf("se"), probs, 2), store,
                            abs_floor=GRAD_FLOOR)
        assert report.passed, report.summary()

    @pytest.mark.parametrize("seed", seeds)
    def test_negative_recognition(self, seed):
        rng = np.random.default_rng(seed)

        def untied(store):
            sentences = np.vstack([store["pos"], store["negs"]])
            return _separated(_cos(sentences, store["po"]))

        store = _sample(rng, {"po": (6, D), "pos": (1, D), "negs": (3, D)}, untied)
        report = grad_check(lambda s: loss_pn(s.leaf("po"), s.leaf("pos"), s.leaf("negs"), 0.1), store,
                            abs_floor=GRAD_FLOOR)
        assert report.passed, report.summary()

    @pytest.mark.parametrize("seed", seeds)
    def test_phrase_matching(self, seed):
        rng = np.random.default_rng(seed)
        b = 3
        shapes = {f"phr{i}": (2, D) for i in range(b)}
        shapes.update({f"po{j}": (4, D) for j in range(b)})

        def untied(store):
            return all(_separated(_cos(store[f"phr{i}"], store[f"po{j}"])) for i in range(b) for j in range(b))

        def objective(s):
            scores = stack([
                stack([phrase_scene_score(s.leaf(f"phr{i}"), s.leaf(f"po{j}")) for j in range(b)])
                for i in range(b)
            ])
            return loss_phr(scores, 0.1)

        report = grad_check(objective, _sample(rng, shapes, untied), abs_floor=GRAD_FLOOR)
        assert report.passed, report.summary()

    @pytest.mark.parametrize("seed", seeds)
    def test_relation_matching(self, seed):
        rng = np.random.default_rng(seed)
        parsed = parse("the chair that is left of the bed", DEFAULT_CATEGORIES)
        store = _sample(rng, {"phr": (2, D), "po": (5, D), "w": (2 * D, 9), "b": (9,)},
                        lambda s: _separated(_cos(s["phr"], s["po"])))

        def head(subject, anchor):
            return linear_forward(concat([subject, anchor], axis=-1), store.leaf("w"), store.leaf("b"))

        report = grad_check(lambda s: loss_rel(parsed, s.leaf("phr"), s.leaf("po"), head), store,
                            abs_floor=GRAD_FLOOR)
        assert report.passed, report.summary()

    @pytest.mark.parametrize("seed", seeds)
    def test_weighted_total(self, seed):
        rng = np.random.default_rng(seed)
        probs = constant(rng.dirichlet(np.ones(3), size=4))

        def untied(store):
            sentences = np.vstack([store["se"], store["negs"]])
            return _separated(_cos(sentences, store["po"])) and _separated(_cos(store["phr"], store["po"]))

        store = _sample(rng, {"po": (4, D), "se": (1, D), "negs": (2, D), "phr": (2, D)}, untied)

        def objective(s):
            components = {
                "se": loss_se(s.leaf("po"), s.leaf("se"), probs, 1),
                "pn": loss_pn(s.leaf("po"), s.leaf("se"), s.leaf("negs")),
                "phr": phrase_scene_score(s.leaf("phr"), s.leaf("po")),
            }
            return total_loss(components, LossWeights(lambda2=0.3, lambda3=0.2)).total

        report = grad_check(objective, store, abs_floor=GRAD_FLOOR)
        assert report.passed, report.summary()
