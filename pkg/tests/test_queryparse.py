"""Tests for tokenization, rule-based parsing and negative query generation."""

from types import SimpleNamespace

import numpy as np
import pytest

from src.exceptions import ContractError, ParseError
from src.geometry import RELATION_PHRASES, RelationId
from src.queryparse import (
    PAD,
    RELATIONAL_TEMPLATES,
    UNK,
    TemplateMeta,
    TokenVocabulary,
    corrupt_target_phrase,
    extraction_accuracy,
    generate_negatives,
    parse,
    render_template,
    tokenize,
)
from src.synthworld import DEFAULT_CATEGORIES

NAMES = tuple(DEFAULT_CATEGORIES)


class TestTokenize:
    def test_lowercases_and_strips_punctuation(self):
        assert tokenize("The Chair, near the LAMP!") == ["the", "chair", "near", "the", "lamp"]

    def test_merges_multiword_names(self):
        assert tokenize("the end table beside the toilet paper", NAMES) == [
            "the", "end table", "beside", "the", "toilet paper"]

    def test_single_word_prefix_is_not_merged(self):
        assert tokenize("the table", NAMES) == ["the", "table"]


class TestParse:
    def test_relational_query(self):
        parsed = parse("the chair that is to the left of the bed", NAMES)
        assert [p.text for p in parsed.noun_phrases] == ["chair", "bed"]
        assert parsed.target_phrase.text == "chair"
        assert parsed.target_phrase.category == NAMES.index("chair")
        assert len(parsed.relation_triples) == 1
        triple = parsed.relation_triples[0]
        assert (triple.relation, triple.subject, triple.anchor) == (RelationId.LEFT, 0, 1)

    def test_category_only_query(self):
        parsed = parse("the end table", NAMES)
        assert parsed.target_phrase.text == "end table"
        assert parsed.relation_triples == ()
        assert parsed.words() == ["the", "end", "table"]
        assert parsed.word_spans() == [(1, 3)]

    def test_longest_relation_phrase_wins(self):
        parsed = parse("the lamp nearest to the desk", NAMES)
        assert parsed.relation_triples[0].relation is RelationId.CLOSEST

    def test_no_category_raises(self):
        with pytest.raises(ParseError):
            parse("the thing over there", NAMES)
        with pytest.raises(ParseError):
            parse("", NAMES)

    def test_noun_phrase_cap_counts_dropped(self):
        text = " and ".join(["the chair"] * 5)
        parsed = parse(text, NAMES, max_phrases=3)
        assert len(parsed.noun_phrases) == 3
        assert parsed.dropped_phrases == 2

    def test_no_relation_between_phrases(self):
        parsed = parse("the chair and the bed", NAMES)
        assert len(parsed.noun_phrases) == 2
        assert parsed.relation_triples == ()

    def test_to_dict_shape(self):
        data = parse("find the sofa next to the lamp", NAMES).to_dict()
        assert data["target_phrase"] == {"text": "sofa", "span": [2, 3]}
        assert data["relation_triples"] == [{"relation": "next_to", "subject": 0, "anchor": 1}]


class TestTemplateCorpus:
    @staticmethod
    def _corpus(count: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        relations = list(RelationId)
        records = []
        for _ in range(count):
            target = NAMES[int(rng.integers(len(NAMES)))]
            if rng.random() < 0.2:
                meta = TemplateMeta(target)
            else:
                anchor = target
                while anchor == target:
                    anchor = NAMES[int(rng.integers(len(NAMES)))]
                relation = relations[int(rng.integers(len(relations)))]
                meta = TemplateMeta(target, relation.label, anchor,
                                    int(rng.integers(len(RELATIONAL_TEMPLATES))),
                                    int(rng.integers(len(RELATION_PHRASES[relation]))))
            records.append(SimpleNamespace(text=render_template(meta), template_meta=meta))
        return records

    def test_every_template_query_is_parsed_exactly(self):
        report = extraction_accuracy(self._corpus(10_000), NAMES)
        assert report.total == 10_000
        assert report.parse_failures == 0
        assert report.target_accuracy == 1.0
        assert report.triple_accuracy == 1.0, report.mismatches[:3]

    def test_records_without_metadata_are_ignored(self):
        report = extraction_accuracy([SimpleNamespace(text="the chair", template_meta=None)], NAMES)
        assert report.total == 0
        assert report.target_accuracy == 0.0

    def test_render_parse_render_is_stable(self):
        for record in self._corpus(200, seed=1):
            parsed = parse(record.text, NAMES)
            again = parse(parsed.text, NAMES)
            assert again.tokens == parsed.tokens
            assert again.relation_triples == parsed.relation_triples


class TestNegatives:
    @staticmethod
    def _embeddings():
        rng = np.random.default_rng(4)
        table = rng.normal(size=(len(NAMES), 8))
        table[NAMES.index("armchair")] = table[NAMES.index("chair")] + 0.01
        return table

    def test_most_similar_category_comes_first(self):
        parsed = parse("the chair that is next to the bed", NAMES)
        negatives = generate_negatives(parsed, NAMES, self._embeddings(), 3)
        assert len(negatives) == 3
        assert negatives.categories[0] == NAMES.index("armchair")
        assert negatives.queries[0] == "the armchair that is next to the bed"
        assert NAMES.index("chair") not in negatives.categories
        assert negatives.shortfall == 0

    def test_negatives_keep_the_rest_of_the_parse(self):
        parsed = parse("the toilet paper above the desk", NAMES)
        negative = generate_negatives(parsed, NAMES, self._embeddings(), 1).parsed[0]
        assert negative.relation_triples == parsed.relation_triples
        assert negative.noun_phrases[1].text == "desk"
        assert negative.noun_phrases[1].span == (4, 5)

    def test_shortfall_when_vocabulary_is_small(self):
        names = ("chair", "bed", "lamp")
        parsed = parse("the chair", names)
        negatives = generate_negatives(parsed, names, np.eye(3), 5)
        assert len(negatives) == 2
        assert negatives.shortfall == 3

    def test_zero_and_negative_k(self):
        parsed = parse("the chair", NAMES)
        assert len(generate_negatives(parsed, NAMES, self._embeddings(), 0)) == 0
        with pytest.raises(ContractError):
            generate_negatives(parsed, NAMES, self._embeddings(), -1)

    def test_mapping_embeddings_are_accepted(self):
        table = self._embeddings()
        parsed = parse("the chair", NAMES)
        from_mapping = generate_negatives(parsed, NAMES, {c: table[c] for c in range(len(NAMES))}, 4)
        assert from_mapping.categories == generate_negatives(parsed, NAMES, table, 4).categories


class TestCorruption:
    def test_perfect_accuracy_is_identity(self):
        parsed = parse("the chair", NAMES)
        assert corrupt_target_phrase(parsed, NAMES, 1.0, np.random.default_rng(0)) is parsed

    def test_zero_accuracy_always_changes_category(self):
        parsed = parse("the chair that is above the bed", NAMES)
        rng = np.random.default_rng(0)
        for _ in range(20):
            wrong = corrupt_target_phrase(parsed, NAMES, 0.0, rng)
            assert wrong.target_phrase.category != parsed.target_phrase.category
            assert wrong.tokens == parsed.tokens


class TestTokenVocabulary:
    def test_covers_the_template_corpus(self):
        vocab = TokenVocabulary.build(NAMES)
        assert vocab.words[:2] == (PAD, UNK)
        for record in TestTemplateCorpus._corpus(300, seed=2):
            assert all(vocab.index(w) != 1 for w in parse(record.text, NAMES).words())

    def test_unknown_words_map_to_unk(self):
        vocab = TokenVocabulary.build(NAMES)
        assert vocab.encode(["chair", "zeppelin"])[1] == 1

    def test_rejects_malformed_word_lists(self):
        with pytest.raises(ContractError):
            TokenVocabulary(["chair", PAD, UNK])
        with pytest.raises(ContractError):
            TokenVocabulary([PAD, UNK, "chair", "chair"])
