"""Pair-localized context pooling over encoder attention.

Adapts the localized context pooling idea from ATLOP: each entity gets an
attention distribution over document tokens (its mention rows of the
head-averaged last-layer attention matrix); a pair's joint distribution is
the element-wise product of head and tail distributions, renormalized, and
the context vector is the resulting convex combination of token embeddings.
Head and tail representations are then refined through distinct two-layer
networks with a saturating output nonlinearity.

The whole mechanism is toggleable; with it off, the pipeline consumes the
pooled entity vectors directly.
"""

from __future__ import annotations

import torch
from torch import nn

from .blocks import TwoLayerFFN
from .data_model import Document, Entity
from .encoders import EncoderOutput
from .pooling import EntityDropped

HEAD = "head"
TAIL = "tail"


def entity_attention(enc: EncoderOutput, doc: Document, entity: Entity) -> torch.Tensor:
    """Attention distribution of one entity over all document tokens.

    Mean of the attention rows at the entity's surviving mention token
    positions; rows are row-stochastic, so the mean sums to 1.
    """
    positions = []
    for mention in entity.mentions:
        for flat in doc.mention_word_indices(mention):
            if flat < enc.num_words:
                positions.append(enc.word_map[flat])
    if not positions:
        raise EntityDropped(f"entity {entity.entity_index} has no surviving mentions")
    return enc.attention[positions].mean(dim=0)


def localized_context(
    attn_head: torch.Tensor, attn_tail: torch.Tensor, enc: EncoderOutput
) -> tuple[torch.Tensor, bool]:
    """Per-pair context vector from the joint attention distribution.

    Returns the convex combination of token embeddings under the normalized
    element-wise product of the two distributions. When the product has zero
    mass (disjoint attention supports) the fallback is the uniform mean over
    all tokens; the flag reports that the fallback fired.
    """
    joint = attn_head * attn_tail
    total = joint.sum()
    if float(total.detach()) <= 0.0:
        return enc.token_embeddings.mean(dim=0), True
    weights = joint / total
    return weights @ enc.token_embeddings, False


class PairContextRefiner(nn.Module):
    """Distinct head/tail refinement networks consuming the pair context.

    Output coordinates are squashed into (-1, 1) by the final tanh.
    """

    def __init__(self, entity_dim: int, activation: str = "gelu"):
        super().__init__()
        self.entity_dim = entity_dim
        self.ffn_head = TwoLayerFFN(2 * entity_dim, entity_dim, entity_dim, activation)
        self.ffn_tail = TwoLayerFFN(2 * entity_dim, entity_dim, entity_dim, activation)

    def refine(
        self, entity_vec: torch.Tensor, context_vec: torch.Tensor, side: str
    ) -> torch.Tensor:
        if side == HEAD:
            ffn = self.ffn_head
        elif side == TAIL:
            ffn = self.ffn_tail
        else:
            raise ValueError(f"side must be 'head' or 'tail', got {side!r}")
        if entity_vec.shape[-1] != context_vec.shape[-1]:
            raise ValueError(
                f"entity/context dimension mismatch: {entity_vec.shape[-1]} vs "
                f"{context_vec.shape[-1]}"
            )
        return torch.tanh(ffn(torch.cat([entity_vec, context_vec], dim=-1)))
