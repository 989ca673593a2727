"""Candidate relation representations and scoring.

Head and tail entity vectors are concatenated (order matters: relations are
directed) and mapped by a two-layer feedforward network into the match
space, where each relation type embedding is scored by a sigmoid dot
product. A relation is assigned when its score strictly exceeds the
decision threshold; a pair may receive zero, one, or many relations.
"""

from __future__ import annotations

import torch
from torch import nn

from .blocks import TwoLayerFFN


class PairScorer(nn.Module):
    """Pair representation network plus sigmoid matching scores."""

    def __init__(
        self,
        entity_dim: int,
        latent_dim: int,
        activation: str = "gelu",
        threshold: float = 0.5,
    ):
        super().__init__()
        if not 0.0 < threshold < 1.0:
            raise ValueError(f"decision threshold must lie in (0, 1), got {threshold}")
        self.entity_dim = entity_dim
        self.latent_dim = latent_dim
        self.threshold = threshold
        self.ffn = TwoLayerFFN(2 * entity_dim, latent_dim, latent_dim, activation)

    def relation_repr(self, head_vec: torch.Tensor, tail_vec: torch.Tensor) -> torch.Tensor:
        """Map a (head, tail) vector pair into the match space. Batched over
        leading dimensions."""
        if head_vec.shape[-1] != tail_vec.shape[-1]:
            raise ValueError(
                f"head/tail dimension mismatch: {head_vec.shape[-1]} vs {tail_vec.shape[-1]}"
            )
        if head_vec.shape[-1] != self.entity_dim:
            raise ValueError(
                f"expected entity vectors of size {self.entity_dim}, got {head_vec.shape[-1]}"
            )
        return self.ffn(torch.cat([head_vec, tail_vec], dim=-1))

    def logits(self, rel_repr: torch.Tensor, label_matrix: torch.Tensor) -> torch.Tensor:
        """Dot products against the K label embeddings; shape (..., K)."""
        if rel_repr.shape[-1] != label_matrix.shape[-1]:
            raise ValueError(
                f"match-space dimension mismatch: {rel_repr.shape[-1]} vs "
                f"{label_matrix.shape[-1]}"
            )
        return rel_repr @ label_matrix.transpose(-1, -2)

    def score(self, rel_repr: torch.Tensor, label_matrix: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(rel_repr, label_matrix))


def decide(scores, threshold: float) -> set[int]:
    """Relation indices whose score strictly exceeds the threshold.

    Ties at the threshold are excluded; the empty set is a valid outcome.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"decision threshold must lie in (0, 1), got {threshold}")
    return {i for i, s in enumerate(scores) if float(s) > threshold}
