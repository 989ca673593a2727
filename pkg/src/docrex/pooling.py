"""Mention-level and entity-level aggregation.

Mentions are always pooled by the mean of their words' first-subword
embeddings. The strategy choice (mean vs coordinate-wise LogSumExp, a smooth
maximum) applies at the entity level only, where multiple mention vectors
are merged.
"""

from __future__ import annotations

import torch

from .data_model import Document, Entity, Mention
from .encoders import EncoderOutput

MEAN = "mean"
LOGSUMEXP = "logsumexp"
POOLING_STRATEGIES = (MEAN, LOGSUMEXP)


class MentionDropped(ValueError):
    """Every word of the mention was truncated away."""


class EntityDropped(ValueError):
    """Every mention of the entity was truncated away."""


def check_strategy(strategy: str) -> str:
    if strategy not in POOLING_STRATEGIES:
        raise ValueError(
            f"unknown pooling strategy {strategy!r}; choose from {POOLING_STRATEGIES}"
        )
    return strategy


def pool_mention(enc: EncoderOutput, mention: Mention, sentence_offset: int) -> torch.Tensor:
    """Mean of the first-subword embeddings of the mention's surviving words."""
    flat = range(sentence_offset + mention.token_start, sentence_offset + mention.token_end)
    positions = [enc.word_map[w] for w in flat if w < enc.num_words]
    if not positions:
        raise MentionDropped(
            f"mention at sentence-local [{mention.token_start}, {mention.token_end}) "
            "was fully truncated"
        )
    return enc.token_embeddings[positions].mean(dim=0)


def pool_entity(mention_vecs: list[torch.Tensor], strategy: str) -> torch.Tensor:
    """Merge mention vectors into one entity vector.

    ``mean`` is the arithmetic mean; ``logsumexp`` applies coordinate-wise
    LSE with max-shift stabilization (finite even for inputs around 1e4).
    """
    check_strategy(strategy)
    if not mention_vecs:
        raise ValueError("entity has no mention vectors")
    stacked = torch.stack(list(mention_vecs))
    if strategy == MEAN:
        return stacked.mean(dim=0)
    return torch.logsumexp(stacked, dim=0)


def entity_vector(
    enc: EncoderOutput, doc: Document, entity: Entity, strategy: str
) -> torch.Tensor:
    """Pool all surviving mentions of one entity."""
    vecs = []
    for mention in entity.mentions:
        try:
            vecs.append(pool_mention(enc, mention, doc.sentence_offsets[mention.sent_index]))
        except MentionDropped:
            continue
    if not vecs:
        raise EntityDropped(f"entity {entity.entity_index} has no surviving mentions")
    return pool_entity(vecs, strategy)


def document_entity_vectors(
    enc: EncoderOutput, doc: Document, strategy: str
) -> tuple[dict[int, torch.Tensor], list[int]]:
    """Entity vectors for a whole document, plus dropped entity indices."""
    vectors: dict[int, torch.Tensor] = {}
    dropped: list[int] = []
    for entity in doc.entities:
        try:
            vectors[entity.entity_index] = entity_vector(enc, doc, entity, strategy)
        except EntityDropped:
            dropped.append(entity.entity_index)
    return vectors, dropped
