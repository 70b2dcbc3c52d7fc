"""
Rule-based query parsing for WeakGround
=======================================

Closed-vocabulary replacement for a learned phrase parser:

- tokenize: lowercase, strip punctuation, merge multiword category names
  into single units ("toilet paper");
- parse: noun phrases are category units, the first one is the target
  phrase, and a relation triple is emitted whenever a relation phrase sits
  between two consecutive noun phrases;
- generate_negatives: swap the target phrase for the most similar other
  categories to build negative queries.

Template rendering lives here too so that generation and parsing share one
definition of the query shapes.
"""

import logging
import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from src.exceptions import ContractError, ParseError
from src.geometry import RELATION_PHRASES, RelationId

logger = logging.getLogger(__name__)

MAX_NOUN_PHRASES = 16

CATEGORY_TEMPLATE = "the {target}"
RELATIONAL_TEMPLATES = (
    "the {target} that is {relation} the {anchor}",
    "find the {target} {relation} the {anchor}",
    "choose the {target} which is {relation} the {anchor}",
)
FILLER_WORDS = ("the", "that", "is", "find", "choose", "which", "a", "on", "wall")

PAD, UNK = "<pad>", "<unk>"

_PUNCTUATION = re.compile(r"[^a-z0-9\s]+")

VocabLike = Union[Sequence[str], "object"]


def _names(vocab: VocabLike) -> Tuple[str, ...]:
    return tuple(getattr(vocab, "names", vocab))


@dataclass(frozen=True)
class TemplateMeta:
    """Structure a template query was rendered from"""

    target_category: str
    relation: Optional[str] = None
    anchor_category: Optional[str] = None
    template_variant: int = 0
    phrase_variant: int = 0

    def to_dict(self) -> dict:
        return {
            "target_category": self.target_category,
            "relation": self.relation,
            "anchor_category": self.anchor_category,
            "template_variant": self.template_variant,
            "phrase_variant": self.phrase_variant,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TemplateMeta":
        return cls(**data)


def render_template(meta: TemplateMeta, variant: Optional[int] = None) -> str:
    """
    Query text for a template description

    Args:
        meta: Target / relation / anchor description
        variant: Template variant overriding meta.template_variant

    Returns:
        Rendered query text
    """
    if meta.relation is None:
        return CATEGORY_TEMPLATE.format(target=meta.target_category)
    relation = RelationId[meta.relation.upper()]
    phrases = RELATION_PHRASES[relation]
    template = RELATIONAL_TEMPLATES[(meta.template_variant if variant is None else variant) % len(RELATIONAL_TEMPLATES)]
    return template.format(target=meta.target_category,
                           relation=phrases[meta.phrase_variant % len(phrases)],
                           anchor=meta.anchor_category)


# ---------------------------------------------------------------------------
# Tokens
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def _multiword_names(names: Tuple[str, ...]) -> Tuple[Tuple[str, ...], ...]:
    """Multiword names as word tuples, longest first"""
    split = {tuple(name.split()) for name in names if len(name.split()) > 1}
    return tuple(sorted(split, key=lambda words: (-len(words), words)))


def tokenize(text: str, vocab: Optional[VocabLike] = None) -> List[str]:
    """
    Lowercased, punctuation-stripped tokens

    With a vocabulary, multiword category names are merged greedily
    longest-first into one unit token.
    """
    words = _PUNCTUATION.sub(" ", text.lower()).split()
    if vocab is None:
        return words
    multiword = _multiword_names(_names(vocab))
    tokens: List[str] = []
    i = 0
    while i < len(words):
        for name in multiword:
            if tuple(words[i:i + len(name)]) == name:
                tokens.append(" ".join(name))
                i += len(name)
                break
        else:
            tokens.append(words[i])
            i += 1
    return tokens


class TokenVocabulary:
    """Word-level vocabulary of the text encoder"""

    def __init__(self, words: Sequence[str]):
        if list(words[:2]) != [PAD, UNK]:
            raise ContractError(f"token vocabulary must start with {PAD} and {UNK}")
        if len(set(words)) != len(words):
            raise ContractError("token vocabulary has duplicate words")
        self.words: Tuple[str, ...] = tuple(words)
        self._index: Dict[str, int] = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, category_names: Sequence[str]) -> "TokenVocabulary":
        """Every word the template corpus can produce, sorted"""
        words = set(FILLER_WORDS)
        for name in category_names:
            words.update(name.split())
        for phrases in RELATION_PHRASES.values():
            for phrase in phrases:
                words.update(phrase.split())
        return cls([PAD, UNK] + sorted(words))

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def index(self, word: str) -> int:
        return self._index.get(word, 1)

    def encode(self, words: Sequence[str]) -> List[int]:
        return [self.index(w) for w in words]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NounPhrase:
    text: str
    span: Tuple[int, int]
    category: Optional[int]


@dataclass(frozen=True)
class RelationTriple:
    relation: RelationId
    subject: int
    anchor: int


@dataclass(frozen=True)
class ParsedQuery:
    """
    Parse of one query

    Spans index the unit tokens and are half-open. `words()` expands the units
    into the word sequence the text encoder consumes.
    """

    tokens: Tuple[str, ...]
    noun_phrases: Tuple[NounPhrase, ...]
    relation_triples: Tuple[RelationTriple, ...] = ()
    target_index: int = 0
    dropped_phrases: int = 0

    @property
    def target_phrase(self) -> NounPhrase:
        return self.noun_phrases[self.target_index]

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def words(self) -> List[str]:
        return [word for token in self.tokens for word in token.split()]

    def word_spans(self) -> List[Tuple[int, int]]:
        """Noun-phrase spans in word positions"""
        offsets = [0]
        for token in self.tokens:
            offsets.append(offsets[-1] + len(token.split()))
        return [(offsets[p.span[0]], offsets[p.span[1]]) for p in self.noun_phrases]

    def with_target(self, category: int, name: str) -> "ParsedQuery":
        """The query with its target phrase replaced by another category"""
        start, end = self.target_phrase.span
        tokens = self.tokens[:start] + (name,) + self.tokens[end:]
        shift = 1 - (end - start)
        phrases = []
        for i, phrase in enumerate(self.noun_phrases):
            if i == self.target_index:
                phrases.append(NounPhrase(name, (start, start + 1), category))
            elif phrase.span[0] >= end:
                phrases.append(replace(phrase, span=(phrase.span[0] + shift, phrase.span[1] + shift)))
            else:
                phrases.append(phrase)
        return replace(self, tokens=tokens, noun_phrases=tuple(phrases))

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "target_phrase": {"text": self.target_phrase.text, "span": list(self.target_phrase.span)},
            "noun_phrases": [
                {"text": p.text, "span": list(p.span), "category": p.category} for p in self.noun_phrases
            ],
            "relation_triples": [
                {"relation": t.relation.label, "subject": t.subject, "anchor": t.anchor}
                for t in self.relation_triples
            ],
            "dropped_phrases": self.dropped_phrases,
        }


@lru_cache(maxsize=8)
def _relation_matchers(relations: Tuple[Tuple[RelationId, Tuple[str, ...]], ...]
                       ) -> Tuple[Tuple[Tuple[str, ...], RelationId], ...]:
    """(phrase words, relation) pairs, longest phrase first, library order on ties"""
    matchers = []
    for rel, phrases in relations:
        for phrase in phrases:
            matchers.append((tuple(phrase.split()), rel))
    return tuple(sorted(matchers, key=lambda m: -len(m[0])))


def _find_relation(words: Sequence[str], matchers) -> Optional[RelationId]:
    for phrase, rel in matchers:
        n = len(phrase)
        for i in range(len(words) - n + 1):
            if tuple(words[i:i + n]) == phrase:
                return rel
    return None


def parse(text: str, vocab: VocabLike,
          relations: Mapping[RelationId, Sequence[str]] = RELATION_PHRASES,
          max_phrases: int = MAX_NOUN_PHRASES) -> ParsedQuery:
    """
    Extract noun phrases, the target phrase and relation triples

    Args:
        text: Query text
        vocab: Category vocabulary (object with `names`, or a name sequence)
        relations: Relation library surface phrases
        max_phrases: Noun-phrase cap; later spans are dropped

    Returns:
        ParsedQuery whose target phrase is the first noun phrase

    Raises:
        ParseError: If no category name occurs in the query
    """
    names = _names(vocab)
    index = {name: i for i, name in enumerate(names)}
    tokens = tuple(tokenize(text, names))

    phrases = [NounPhrase(tok, (i, i + 1), index[tok]) for i, tok in enumerate(tokens) if tok in index]
    if not phrases:
        raise ParseError(f"no category phrase in query '{text}'")
    dropped = max(0, len(phrases) - max_phrases)
    phrases = phrases[:max_phrases]

    matchers = _relation_matchers(tuple((RelationId(r), tuple(p)) for r, p in relations.items()))
    triples = []
    for i in range(len(phrases) - 1):
        between = [w for tok in tokens[phrases[i].span[1]:phrases[i + 1].span[0]] for w in tok.split()]
        rel = _find_relation(between, matchers)
        if rel is not None:
            triples.append(RelationTriple(rel, i, i + 1))

    return ParsedQuery(tokens, tuple(phrases), tuple(triples), 0, dropped)


# ---------------------------------------------------------------------------
# Negative queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NegativeQuerySet:
    queries: Tuple[str, ...]
    categories: Tuple[int, ...]
    parsed: Tuple[ParsedQuery, ...] = ()
    requested: int = 0

    @property
    def shortfall(self) -> int:
        return self.requested - len(self.categories)

    def __len__(self) -> int:
        return len(self.queries)


def category_phrase_embeddings(token_embeddings: np.ndarray, token_vocab: TokenVocabulary,
                               names: Sequence[str]) -> np.ndarray:
    """Per-category phrase embedding: mean of its word embeddings, [c, D]"""
    return np.stack([
        token_embeddings[token_vocab.encode(name.split())].mean(axis=0) for name in names
    ])


def rank_similar_categories(target: int, phrase_embeddings: np.ndarray) -> List[int]:
    """Other categories by decreasing cosine similarity to the target, index order on ties"""
    unit = phrase_embeddings / np.maximum(np.linalg.norm(phrase_embeddings, axis=1, keepdims=True), 1e-12)
    similarity = unit @ unit[target]
    others = [c for c in range(len(phrase_embeddings)) if c != target]
    return sorted(others, key=lambda c: (-similarity[c], c))


def generate_negatives(parsed: ParsedQuery, vocab: VocabLike,
                       phrase_embeddings: Union[np.ndarray, Mapping[int, np.ndarray]],
                       k: int) -> NegativeQuerySet:
    """
    k negative queries built by replacing the target phrase

    Args:
        parsed: Parsed positive query
        vocab: Category vocabulary
        phrase_embeddings: Phrase embedding per category index
        k: Number of negatives wanted

    Returns:
        NegativeQuerySet; when fewer than k other categories exist all of them
        are used and the shortfall is recorded
    """
    if k < 0:
        raise ContractError(f"k must be >= 0, got {k}")
    names = _names(vocab)
    if k == 0:
        return NegativeQuerySet((), (), (), 0)
    target = parsed.target_phrase.category
    if target is None:
        raise ContractError("negatives need a resolvable target category")
    if isinstance(phrase_embeddings, Mapping):
        phrase_embeddings = np.stack([np.asarray(phrase_embeddings[c]) for c in range(len(names))])

    chosen = rank_similar_categories(target, np.asarray(phrase_embeddings, dtype=np.float64))[:k]
    negatives = tuple(parsed.with_target(c, names[c]) for c in chosen)
    if len(chosen) < k:
        logger.debug(f"Only {len(chosen)} of {k} negatives available for '{parsed.text}'")
    return NegativeQuerySet(tuple(n.text for n in negatives), tuple(chosen), negatives, k)


def corrupt_target_phrase(parsed: ParsedQuery, vocab: VocabLike, accuracy: float,
                          rng: np.random.Generator) -> ParsedQuery:
    """
    Emulate an imperfect extractor

    With probability 1 - accuracy the extracted target category becomes a
    uniformly drawn other category; the query tokens stay untouched.
    """
    if accuracy >= 1.0:
        return parsed
    names = _names(vocab)
    if rng.random() < accuracy or len(names) < 2:
        return parsed
    target = parsed.target_phrase.category
    others = [c for c in range(len(names)) if c != target]
    wrong = others[int(rng.integers(len(others)))]
    phrases = list(parsed.noun_phrases)
    phrases[parsed.target_index] = replace(parsed.target_phrase, category=wrong)
    return replace(parsed, noun_phrases=tuple(phrases))


# ---------------------------------------------------------------------------
# Extraction accuracy
# ---------------------------------------------------------------------------


@dataclass
class ExtractionReport:
    total: int = 0
    target_correct: int = 0
    triples_correct: int = 0
    parse_failures: int = 0
    mismatches: List[str] = field(default_factory=list)

    @property
    def target_accuracy(self) -> float:
        return self.target_correct / self.total if self.total else 0.0

    @property
    def triple_accuracy(self) -> float:
        return self.triples_correct / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "target_accuracy": self.target_accuracy,
            "triple_accuracy": self.triple_accuracy,
            "parse_failures": self.parse_failures,
        }


def _expected_triples(meta: TemplateMeta) -> List[Tuple[RelationId, str, str]]:
    if meta.relation is None:
        return []
    return [(RelationId[meta.relation.upper()], meta.target_category, meta.anchor_category)]


def extraction_accuracy(records: Iterable, vocab: VocabLike, max_mismatches: int = 20) -> ExtractionReport:
    """
    Target-phrase and relation-triple accuracy against template metadata

    Args:
        records: Objects with `text` and `template_meta` (records without
            metadata are ignored)
        vocab: Category vocabulary

    Returns:
        ExtractionReport
    """
    report = ExtractionReport()
    for record in records:
        meta = record.template_meta
        if meta is None:
            continue
        report.total += 1
        try:
            parsed = parse(record.text, vocab)
        except ParseError:
            report.parse_failures += 1
            continue
        if parsed.target_phrase.text == meta.target_category:
            report.target_correct += 1
        found = [
            (t.relation, parsed.noun_phrases[t.subject].text, parsed.noun_phrases[t.anchor].text)
            for t in parsed.relation_triples
        ]
        if found == _expected_triples(meta):
            report.triples_correct += 1
        elif len(report.mismatches) < max_mismatches:
            report.mismatches.append(record.text)
    return report
