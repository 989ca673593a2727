"""Bi-encoder document-level relation extraction.

Documents and relation labels are encoded separately; entity pairs are
matched against label embeddings in a shared latent space. Ships data
pipelines, training and evaluation harnesses for supervised, few-shot and
zero-shot settings, and a tiny from-scratch encoder backend for desk-scale
verification.
"""

from .data_model import (
    Document,
    Entity,
    GoldFact,
    Mention,
    RelationLabelSet,
    enumerate_pairs,
    pair_cap,
)
from .dataset_io import (
    CorpusFile,
    FewShotSpec,
    PredictionRecord,
    load_corpus,
    load_pretrain_corpus,
    load_rel_info,
    read_predictions,
    sample_fewshot,
    write_predictions,
)
from .encoders import EncoderConfig, EncoderOutput, LabelEmbeddingCache
from .losses import FocalParams, adaptive_threshold_loss, focal_loss
from .metrics import EvalReport, aggregate_runs, build_train_facts, evaluate
from .model import ModelConfig, RelationMatcher, build_model
from .relation import decide

__version__ = "0.1.0"

__all__ = [
    "CorpusFile",
    "Document",
    "EncoderConfig",
    "EncoderOutput",
    "Entity",
    "EvalReport",
    "FewShotSpec",
    "FocalParams",
    "GoldFact",
    "LabelEmbeddingCache",
    "Mention",
    "ModelConfig",
    "PredictionRecord",
    "RelationLabelSet",
    "RelationMatcher",
    "adaptive_threshold_loss",
    "aggregate_runs",
    "build_model",
    "build_train_facts",
    "decide",
    "enumerate_pairs",
    "evaluate",
    "focal_loss",
    "load_corpus",
    "load_pretrain_corpus",
    "load_rel_info",
    "pair_cap",
    "read_predictions",
    "sample_fewshot",
    "write_predictions",
]
