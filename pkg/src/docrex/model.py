"""End-to-end matcher assembly.

Wires encoder, pooling, optional localized context pooling and the pair
scorer into one module: documents in, per-pair relation logits out. With
context pooling disabled the forward path consumes the pooled entity
vectors directly, bit-identical to a build without the refiner.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
from torch import nn

from .context_pooling import HEAD, TAIL, PairContextRefiner, entity_attention, localized_context
from .data_model import Document, RelationLabelSet, enumerate_pairs, pair_cap
from .dataset_io import PredictionRecord
from .encoders import (
    EncoderConfig,
    LabelEmbeddingCache,
    LabelProjection,
    build_document_encoder,
    build_label_encoder,
)
from .losses import FocalParams, ThresholdHead, adaptive_threshold_decisions
from .pooling import check_strategy, document_entity_vectors
from .relation import PairScorer

logger = logging.getLogger(__name__)

FOCAL = "focal"
ADAPTIVE_THRESHOLD = "adaptive_threshold"
LOSSES = (FOCAL, ADAPTIVE_THRESHOLD)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and objective switches.

    ``lop`` toggles localized context pooling (on by default); ``pooling``
    selects the entity aggregation strategy. Serialized as flat key=value
    text in checkpoints.
    """

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pooling: str = "mean"
    lop: bool = True
    loss: str = FOCAL
    activation: str = "gelu"
    decision_threshold: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha_pos: float = 0.25
    loss_reduction: str = "mean"

    def __post_init__(self) -> None:
        check_strategy(self.pooling)
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision_threshold must lie in (0, 1)")

    def focal_params(self) -> FocalParams:
        return FocalParams(gamma=self.focal_gamma, alpha_pos=self.focal_alpha_pos)

    def to_flat_dict(self) -> dict[str, str]:
        flat = {
            "pooling": self.pooling,
            "lop": "on" if self.lop else "off",
            "loss": self.loss,
            "activation": self.activation,
            "decision_threshold": repr(self.decision_threshold),
            "focal_gamma": repr(self.focal_gamma),
            "focal_alpha_pos": repr(self.focal_alpha_pos),
            "loss_reduction": self.loss_reduction,
        }
        enc = self.encoder
        flat.update(
            {
                "encoder.backend_kind": enc.backend_kind,
                "encoder.max_length": str(enc.max_length),
                "encoder.hidden_size": str(enc.hidden_size),
                "encoder.latent_size": "" if enc.latent_size is None else str(enc.latent_size),
                "encoder.num_layers": str(enc.num_layers),
                "encoder.num_heads": str(enc.num_heads),
                "encoder.ffn_size": str(enc.ffn_size),
                "encoder.doc_model_name": enc.doc_model_name,
                "encoder.label_model_name": enc.label_model_name,
            }
        )
        return flat

    @classmethod
    def from_flat_dict(cls, flat: dict[str, str]) -> "ModelConfig":
        encoder = EncoderConfig(
            backend_kind=flat.get("encoder.backend_kind", "tiny"),
            max_length=int(flat.get("encoder.max_length", 512)),
            hidden_size=int(flat.get("encoder.hidden_size", 32)),
            latent_size=int(flat["encoder.latent_size"]) if flat.get("encoder.latent_size") else None,
            num_layers=int(flat.get("encoder.num_layers", 2)),
            num_heads=int(flat.get("encoder.num_heads", 2)),
            ffn_size=int(flat.get("encoder.ffn_size", 64)),
            doc_model_name=flat.get("encoder.doc_model_name", "microsoft/deberta-v3-large"),
            label_model_name=flat.get("encoder.label_model_name", "BAAI/bge-large-en-v1.5"),
        )
        return cls(
            encoder=encoder,
            pooling=flat.get("pooling", "mean"),
            lop=parse_on_off(flat.get("lop", "on")),
            loss=flat.get("loss", FOCAL),
            activation=flat.get("activation", "gelu"),
            decision_threshold=float(flat.get("decision_threshold", 0.5)),
            focal_gamma=float(flat.get("focal_gamma", 2.0)),
            focal_alpha_pos=float(flat.get("focal_alpha_pos", 0.25)),
            loss_reduction=flat.get("loss_reduction", "mean"),
        )


def parse_on_off(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {value!r}")


@dataclass
class PairBatch:
    """Scored candidate pairs for one document."""

    doc: Document
    pairs: list[tuple[int, int]]
    logits: torch.Tensor  # (pairs, K)
    th_logits: torch.Tensor | None = None  # (pairs,) for the adaptive variant
    dropped_entities: list[int] = field(default_factory=list)
    context_fallbacks: int = 0


class RelationMatcher(nn.Module):
    """Bi-encoder document-level relation matcher."""

    def __init__(self, doc_encoder: nn.Module, label_encoder: nn.Module, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.doc_encoder = doc_encoder
        self.label_encoder = label_encoder
        latent = cfg.encoder.latent_size or doc_encoder.hidden_size
        self.label_projection = LabelProjection(
            label_encoder.hidden_size, latent, cfg.activation
        )
        self.scorer = PairScorer(
            doc_encoder.hidden_size, latent, cfg.activation, cfg.decision_threshold
        )
        # Optional heads are constructed only when enabled, so a disabled
        # configuration is parameter-identical to a build without them.
        self.refiner = (
            PairContextRefiner(doc_encoder.hidden_size, cfg.activation) if cfg.lop else None
        )
        self.threshold_head = (
            ThresholdHead(latent, cfg.activation) if cfg.loss == ADAPTIVE_THRESHOLD else None
        )

    def encoder_parameters(self):
        yield from self.doc_encoder.parameters()
        yield from self.label_encoder.parameters()

    def head_parameters(self):
        yield from self.label_projection.parameters()
        yield from self.scorer.parameters()
        if self.refiner is not None:
            yield from self.refiner.parameters()
        if self.threshold_head is not None:
            yield from self.threshold_head.parameters()

    def label_matrix(
        self, labels: RelationLabelSet, cache: LabelEmbeddingCache | None = None
    ) -> torch.Tensor:
        """Projected label embeddings, K x latent.

        The optional cache stores the raw (pre-projection) matrix; the
        projection is re-applied because it trains with the heads.
        """
        if cache is not None:
            raw = cache.get(labels, self.label_encoder)
        else:
            raw = self.label_encoder.encode_labels(labels)
        return self.label_projection(raw)

    def score_document(
        self,
        doc: Document,
        label_matrix: torch.Tensor,
        pairs: list[tuple[int, int]] | None = None,
        cap: int | None = None,
        cap_seed: int = 0,
    ) -> PairBatch:
        """Logits for the document's candidate pairs.

        Pairs touching truncation-dropped entities are skipped (scored as
        no-relation downstream). ``cap`` is for training only; evaluation
        must enumerate fully.
        """
        enc = self.doc_encoder.encode_document(doc)
        vectors, dropped = document_entity_vectors(enc, doc, self.cfg.pooling)
        if pairs is None:
            pairs = enumerate_pairs(doc)
        alive = [(h, t) for h, t in pairs if h in vectors and t in vectors]
        if cap is not None:
            alive = pair_cap(alive, cap, cap_seed, gold_pairs=doc.gold_pairs())
        if not alive:
            empty = torch.zeros((0, label_matrix.shape[0]), dtype=label_matrix.dtype)
            return PairBatch(doc, [], empty, None, dropped, 0)

        heads = torch.stack([vectors[h] for h, _ in alive])
        tails = torch.stack([vectors[t] for _, t in alive])
        fallbacks = 0
        if self.refiner is not None:
            attn = {
                index: entity_attention(enc, doc, doc.entities[index])
                for index in vectors
            }
            contexts = []
            for h, t in alive:
                context, fell_back = localized_context(attn[h], attn[t], enc)
                fallbacks += int(fell_back)
                contexts.append(context)
            context_stack = torch.stack(contexts)
            heads = self.refiner.refine(heads, context_stack, HEAD)
            tails = self.refiner.refine(tails, context_stack, TAIL)

        rel_reprs = self.scorer.relation_repr(heads, tails)
        logits = self.scorer.logits(rel_reprs, label_matrix)
        th_logits = None
        if self.threshold_head is not None:
            th_logits = self.threshold_head(rel_reprs, label_matrix)
        return PairBatch(doc, alive, logits, th_logits, dropped, fallbacks)

    @torch.no_grad()
    def predict_document(
        self,
        doc: Document,
        labels: RelationLabelSet,
        label_matrix: torch.Tensor | None = None,
        threshold: float | None = None,
    ) -> list[PredictionRecord]:
        """Decided triplets for one document."""
        if label_matrix is None:
            label_matrix = self.label_matrix(labels)
        batch = self.score_document(doc, label_matrix)
        if not batch.pairs:
            return []
        scores = torch.sigmoid(batch.logits)
        if self.threshold_head is not None and threshold is None:
            decisions = adaptive_threshold_decisions(batch.logits, batch.th_logits)
        else:
            tau = threshold if threshold is not None else self.scorer.threshold
            decisions = scores > tau
        records = []
        ids = labels.ids
        for row, (h, t) in enumerate(batch.pairs):
            for k in torch.nonzero(decisions[row]).flatten().tolist():
                records.append(
                    PredictionRecord(
                        title=doc.title,
                        h_idx=h,
                        t_idx=t,
                        r=ids[k],
                        score=float(scores[row, k]),
                    )
                )
        return records

    @torch.no_grad()
    def predict_corpus(
        self,
        corpus,
        labels: RelationLabelSet,
        threshold: float | None = None,
        cache: LabelEmbeddingCache | None = None,
    ) -> list[PredictionRecord]:
        label_matrix = self.label_matrix(labels, cache)
        records = []
        for doc in corpus:
            records.extend(self.predict_document(doc, labels, label_matrix, threshold))
        return records


def build_targets(
    doc: Document, pairs: list[tuple[int, int]], labels: RelationLabelSet
) -> torch.Tensor:
    """Binary (pairs, K) target matrix from the document's gold facts."""
    targets = torch.zeros((len(pairs), len(labels)))
    index = {pair: row for row, pair in enumerate(pairs)}
    for fact in doc.gold_labels:
        row = index.get((fact.head_index, fact.tail_index))
        if row is not None and fact.relation_id in labels:
            targets[row, labels.index_of(fact.relation_id)] = 1.0
    return targets


def build_model(
    cfg: ModelConfig,
    doc_vocab_sources,
    label_vocab_sources,
    seed: int = 0,
) -> RelationMatcher:
    """Construct a matcher with seeded weight initialization.

    For the tiny backend the vocabularies are built from the given word
    sources (typically the training documents and the label names).
    """
    torch.manual_seed(seed)
    doc_encoder = build_document_encoder(cfg.encoder, doc_vocab_sources)
    label_encoder = build_label_encoder(cfg.encoder, label_vocab_sources)
    return RelationMatcher(doc_encoder, label_encoder, cfg)
