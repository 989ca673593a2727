"""Core task objects for document-level relation extraction.

A document is tokenized into sentences of word tokens and carries a set of
entities, each grounded by one or more mention spans. Gold facts are ordered
(head, tail, relation) triplets over entity indices; the candidate space is
the full ordered Cartesian square of entities, self-pairs included.

All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np

__all__ = [
    "Document",
    "Entity",
    "GoldFact",
    "Mention",
    "RelationLabelSet",
    "enumerate_pairs",
    "pair_cap",
    "truncated_entities",
]


@dataclass(frozen=True)
class Mention:
    """A contiguous token span inside a single sentence.

    ``token_start`` is inclusive, ``token_end`` exclusive; both are
    sentence-local word indices.
    """

    sent_index: int
    token_start: int
    token_end: int
    surface: str = ""

    def __post_init__(self) -> None:
        if self.sent_index < 0:
            raise ValueError(f"negative sentence index {self.sent_index}")
        if self.token_start < 0 or self.token_start >= self.token_end:
            raise ValueError(
                f"degenerate mention span [{self.token_start}, {self.token_end})"
            )


@dataclass(frozen=True)
class Entity:
    """An entity grounded by one or more mentions.

    ``entity_type`` is carried through from the source data but never
    consumed by the model.
    """

    entity_index: int
    mentions: tuple[Mention, ...]
    entity_type: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "mentions", tuple(self.mentions))
        if not self.mentions:
            raise ValueError(f"entity {self.entity_index} has no mentions")


@dataclass(frozen=True)
class GoldFact:
    """A gold relation triplet; head may equal tail."""

    head_index: int
    tail_index: int
    relation_id: str


@dataclass(frozen=True)
class Document:
    """A tokenized document with its entity structure and gold facts.

    ``gold_labels`` may be empty at inference time. Relation-id validity is
    checked by the corpus loader against the active label set.
    """

    doc_id: str
    title: str
    sentences: tuple[tuple[str, ...], ...]
    entities: tuple[Entity, ...]
    gold_labels: tuple[GoldFact, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "sentences", tuple(tuple(s) for s in self.sentences)
        )
        object.__setattr__(self, "entities", tuple(self.entities))
        object.__setattr__(self, "gold_labels", tuple(self.gold_labels))
        for entity in self.entities:
            for mention in entity.mentions:
                if mention.sent_index >= len(self.sentences):
                    raise ValueError(
                        f"document {self.doc_id!r}: entity {entity.entity_index} "
                        f"mention sentence {mention.sent_index} out of range"
                    )
                sent_len = len(self.sentences[mention.sent_index])
                if mention.token_end > sent_len:
                    raise ValueError(
                        f"document {self.doc_id!r}: entity {entity.entity_index} "
                        f"mention span [{mention.token_start}, {mention.token_end}) "
                        f"exceeds sentence {mention.sent_index} length {sent_len}"
                    )
        m = len(self.entities)
        for fact in self.gold_labels:
            if not (0 <= fact.head_index < m and 0 <= fact.tail_index < m):
                raise ValueError(
                    f"document {self.doc_id!r}: gold fact ({fact.head_index}, "
                    f"{fact.relation_id}, {fact.tail_index}) references an "
                    f"unknown entity index (have {m} entities)"
                )

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @cached_property
    def sentence_offsets(self) -> tuple[int, ...]:
        """Flat word index at which each sentence starts."""
        offsets = []
        pos = 0
        for sent in self.sentences:
            offsets.append(pos)
            pos += len(sent)
        return tuple(offsets)

    @cached_property
    def words(self) -> tuple[str, ...]:
        """All word tokens in reading order."""
        return tuple(w for sent in self.sentences for w in sent)

    def mention_word_indices(self, mention: Mention) -> range:
        """Flat word indices covered by a mention."""
        offset = self.sentence_offsets[mention.sent_index]
        return range(offset + mention.token_start, offset + mention.token_end)

    def gold_pairs(self) -> set[tuple[int, int]]:
        return {(f.head_index, f.tail_index) for f in self.gold_labels}


class RelationLabelSet:
    """An ordered set of (relation_id, relation_name) labels.

    Order is stable for the lifetime of the object; embedding caches are
    keyed by the fingerprint, which covers both ids and names.
    """

    def __init__(self, labels: list[tuple[str, str]] | tuple[tuple[str, str], ...]):
        self._labels = tuple((str(i), str(n)) for i, n in labels)
        ids = [i for i, _ in self._labels]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate relation ids: {dupes}")
        self._index = {rid: k for k, (rid, _) in enumerate(self._labels)}

    @classmethod
    def from_dict(cls, mapping: dict[str, str]) -> "RelationLabelSet":
        """Build from an id -> name map, preserving insertion order."""
        return cls(list(mapping.items()))

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(i for i, _ in self._labels)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for _, n in self._labels)

    def index_of(self, relation_id: str) -> int:
        return self._index[relation_id]

    def name_of(self, relation_id: str) -> str:
        return self._labels[self._index[relation_id]][1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for rid, name in self._labels:
            h.update(rid.encode("utf-8"))
            h.update(b"\x00")
            h.update(name.encode("utf-8"))
            h.update(b"\x01")
        return h.hexdigest()

    def __len__(self) -> int:
        return len(self._labels)

    def __iter__(self):
        return iter(self._labels)

    def __contains__(self, relation_id: str) -> bool:
        return relation_id in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, RelationLabelSet) and self._labels == other._labels

    def __repr__(self) -> str:
        return f"RelationLabelSet({len(self)} labels)"


def enumerate_pairs(doc: Document) -> list[tuple[int, int]]:
    """All ordered (head, tail) entity pairs of a document.

    Returns the full m x m square including self-pairs, head-major.
    """
    m = doc.num_entities
    if m == 0:
        raise ValueError(f"document {doc.doc_id!r}: no entities")
    return [(h, t) for h in range(m) for t in range(m)]


def pair_cap(
    pairs: list[tuple[int, int]],
    cap: int | None,
    rng_seed: int,
    gold_pairs: set[tuple[int, int]] | None = None,
) -> list[tuple[int, int]]:
    """Cap the candidate pair list for memory-bounded training.

    Identity when ``cap`` is None or not exceeded. Otherwise keeps every
    pair present in ``gold_pairs`` and fills the remaining quota with a
    seeded uniform sample of the rest, preserving enumeration order. Gold
    pairs are never discarded, even when they alone exceed the cap.
    Evaluation must not cap (full enumeration is required for valid F1).
    """
    if cap is not None and cap < 0:
        raise ValueError(f"negative pair cap {cap}")
    if cap is None or len(pairs) <= cap:
        return list(pairs)
    gold = gold_pairs or set()
    kept_gold = [p for p in pairs if p in gold]
    pool = [p for p in pairs if p not in gold]
    quota = max(0, cap - len(kept_gold))
    rng = np.random.default_rng(rng_seed)
    if quota >= len(pool):
        sampled = set(pool)
    elif quota == 0:
        sampled = set()
    else:
        picked = rng.choice(len(pool), size=quota, replace=False)
        sampled = {pool[i] for i in picked}
    keep = set(kept_gold) | sampled
    return [p for p in pairs if p in keep]


def truncated_entities(doc: Document, num_words: int) -> list[int]:
    """Entity indices whose every mention word falls beyond ``num_words``."""
    dropped = []
    for entity in doc.entities:
        survives = any(
            idx < num_words
            for mention in entity.mentions
            for idx in doc.mention_word_indices(mention)
        )
        if not survives:
            dropped.append(entity.entity_index)
    return dropped
