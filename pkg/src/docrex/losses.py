"""Training objectives.

The primary objective is the focal loss (Lin et al.), a dynamically scaled
binary cross-entropy that down-weights well-classified cells; it addresses
the heavy positive/negative imbalance of document-level relation data. An
adaptive-threshold variant in the style of ATLOP's TH class is kept as an
ablation: a small MLP predicts a per-pair threshold logit and the loss
pushes positive logits above it and negative logits below it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import TwoLayerFFN

# Large finite mask value; -inf would produce NaNs in fully-masked rows.
_MASK = 1e30


@dataclass(frozen=True)
class FocalParams:
    """Focusing parameter and positive-class weight.

    Negatives are weighted by ``1 - alpha_pos``. gamma=0 reduces the loss to
    class-weighted binary cross-entropy.
    """

    gamma: float = 2.0
    alpha_pos: float = 0.25

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.alpha_pos <= 1.0:
            raise ValueError(f"alpha_pos must lie in (0, 1], got {self.alpha_pos}")


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    params: FocalParams = FocalParams(),
    reduction: str = "mean",
) -> torch.Tensor:
    """Focal loss over a (pairs, labels) logit matrix with binary targets.

    Per cell: -alpha_t * (1 - p_t)^gamma * log(p_t), where p_t is the
    predicted probability of the true class. Computed through log-sigmoid
    identities, so no exponential overflows for |logit| up to at least 100.
    """
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if torch.isnan(logits).any():
        raise ValueError("NaN logit passed to focal_loss")
    targets = targets.to(dtype=logits.dtype)
    # log p_t and log(1 - p_t), branchless over the two target values.
    log_p = targets * F.logsigmoid(logits) + (1 - targets) * F.logsigmoid(-logits)
    log_not_p = targets * F.logsigmoid(-logits) + (1 - targets) * F.logsigmoid(logits)
    alpha = targets * params.alpha_pos + (1 - targets) * (1 - params.alpha_pos)
    cells = -alpha * torch.exp(params.gamma * log_not_p) * log_p
    if reduction == "mean":
        return cells.mean()
    if reduction == "sum":
        return cells.sum()
    if reduction == "none":
        return cells
    raise ValueError(f"unknown reduction {reduction!r}")


class ThresholdHead(nn.Module):
    """Per-pair threshold logit predictor for the adaptive-threshold variant.

    Input is the pair representation concatenated with a global context
    vector (the mean of all relation type embeddings); output is one scalar
    logit per pair.
    """

    def __init__(self, latent_dim: int, activation: str = "gelu"):
        super().__init__()
        self.latent_dim = latent_dim
        self.mlp = TwoLayerFFN(2 * latent_dim, latent_dim, 1, activation)

    @staticmethod
    def global_context(label_matrix: torch.Tensor) -> torch.Tensor:
        return label_matrix.mean(dim=0)

    def forward(self, rel_reprs: torch.Tensor, label_matrix: torch.Tensor) -> torch.Tensor:
        context = self.global_context(label_matrix)
        expanded = context.expand(rel_reprs.shape[:-1] + context.shape)
        return self.mlp(torch.cat([rel_reprs, expanded], dim=-1)).squeeze(-1)


def adaptive_threshold_loss(
    logits: torch.Tensor, th_logits: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """ATLOP-style two-part ranking loss with a learned threshold logit.

    For each pair, one cross-entropy over {positives, TH} pushes every
    positive above the threshold (absent when the pair has no positives),
    and one over {negatives, TH} pushes the threshold above every negative.
    Returns the mean over pairs of the summed terms.
    """
    if logits.shape != targets.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    if th_logits.shape != logits.shape[:-1]:
        raise ValueError(
            f"th_logits shape {tuple(th_logits.shape)} does not match pairs {tuple(logits.shape[:-1])}"
        )
    targets = targets.to(dtype=logits.dtype)
    full = torch.cat([logits, th_logits.unsqueeze(-1)], dim=-1)
    th_mark = torch.zeros_like(full)
    th_mark[..., -1] = 1.0
    pos_mark = torch.cat([targets, torch.zeros_like(th_logits).unsqueeze(-1)], dim=-1)

    # Positives vs TH: mask everything else out of the softmax.
    pos_logits = full - (1 - pos_mark - th_mark) * _MASK
    pos_term = -(F.log_softmax(pos_logits, dim=-1) * pos_mark).sum(dim=-1)

    # Negatives vs TH: the TH slot is the correct class.
    neg_logits = full - pos_mark * _MASK
    neg_term = -(F.log_softmax(neg_logits, dim=-1) * th_mark).sum(dim=-1)

    return (pos_term + neg_term).mean()


def adaptive_threshold_decisions(
    logits: torch.Tensor, th_logits: torch.Tensor
) -> torch.Tensor:
    """Boolean decisions: a relation is predicted iff its logit strictly
    exceeds the pair's threshold logit."""
    return logits > th_logits.unsqueeze(-1)


def logit(p: float) -> float:
    """Inverse sigmoid."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    return math.log(p / (1.0 - p))
