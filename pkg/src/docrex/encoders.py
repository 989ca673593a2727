"""Token encoders behind the bi-encoder.

Two backends share one contract: given a document they produce per-token
embeddings, the last encoder layer's attention matrix averaged over heads
(rows are post-softmax probability distributions), and a word-to-first-subword
index map. The label side produces one mean-pooled embedding per relation
name.

* ``tiny``: a from-scratch two-layer, two-head transformer over a
  whitespace+lowercase vocabulary. Small enough for exact finite-difference
  checking, expressive enough to overfit toy corpora.
* ``pretrained``: a thin wrapper over Hugging Face models (document and label
  encoders may differ). Optional; requires the ``transformers`` extra and
  downloadable weights.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import torch
from torch import nn

from .blocks import TwoLayerFFN, weights_digest
from .data_model import Document, RelationLabelSet, truncated_entities

logger = logging.getLogger(__name__)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class EncoderConfig:
    """Backend selection and sizing.

    ``latent_size`` is the shared match space; it defaults to the document
    encoder's hidden size when unset. The tiny-specific fields are ignored
    by the pretrained backend.
    """

    backend_kind: str = "tiny"
    max_length: int = 512
    hidden_size: int = 32
    latent_size: int | None = None
    num_layers: int = 2
    num_heads: int = 2
    ffn_size: int = 64
    doc_model_name: str = "microsoft/deberta-v3-large"
    label_model_name: str = "BAAI/bge-large-en-v1.5"

    def __post_init__(self) -> None:
        if self.backend_kind not in ("tiny", "pretrained"):
            raise ValueError(f"unknown backend kind {self.backend_kind!r}")
        if self.max_length <= 0:
            raise ValueError("max_length must be positive")
        if self.hidden_size <= 0:
            raise ValueError("hidden_size must be positive")
        if self.hidden_size % self.num_heads != 0:
            raise ValueError("hidden_size must be divisible by num_heads")

    @property
    def resolved_latent_size(self) -> int:
        return self.latent_size if self.latent_size is not None else self.hidden_size


@dataclass
class EncoderOutput:
    """Contextual embeddings plus attention for one document.

    ``attention`` holds the last layer's post-softmax probabilities averaged
    over heads; each row sums to 1. ``word_map`` gives, for every original
    word that survived truncation, the index of its first subword.
    """

    token_embeddings: torch.Tensor
    attention: torch.Tensor
    word_map: list[int]

    @property
    def num_tokens(self) -> int:
        return self.token_embeddings.shape[0]

    @property
    def num_words(self) -> int:
        return len(self.word_map)


class TinyTokenizer:
    """Whitespace + lowercase tokenizer with a corpus-built vocabulary.

    One token per word; unseen words map to ``<unk>``. Vocabulary order is
    sorted, so identical corpora yield identical ids on any platform.
    """

    def __init__(self, vocab: dict[str, int]):
        if vocab.get(PAD_TOKEN) != 0 or vocab.get(UNK_TOKEN) != 1:
            raise ValueError("vocab must map <pad> to 0 and <unk> to 1")
        self.vocab = dict(vocab)

    @classmethod
    def build(cls, token_sources) -> "TinyTokenizer":
        """Build from any iterable of word iterables (sentences, names...)."""
        words = set()
        for source in token_sources:
            for word in source:
                words.add(word.lower())
        vocab = {PAD_TOKEN: 0, UNK_TOKEN: 1}
        for word in sorted(words):
            vocab.setdefault(word, len(vocab))
        return cls(vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode_words(self, words) -> list[int]:
        unk = self.vocab[UNK_TOKEN]
        return [self.vocab.get(w.lower(), unk) for w in words]

    def to_json(self) -> str:
        return json.dumps(self.vocab, ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TinyTokenizer":
        return cls(json.loads(text))


class TinyEncoderLayer(nn.Module):
    """Post-LN transformer block exposing head-averaged attention probs."""

    def __init__(self, hidden: int, heads: int, ffn_size: int):
        super().__init__()
        self.heads = heads
        self.head_dim = hidden // heads
        self.q_proj = nn.Linear(hidden, hidden)
        self.k_proj = nn.Linear(hidden, hidden)
        self.v_proj = nn.Linear(hidden, hidden)
        self.out_proj = nn.Linear(hidden, hidden)
        self.ln_attn = nn.LayerNorm(hidden)
        self.ffn = TwoLayerFFN(hidden, ffn_size, hidden, activation="gelu")
        self.ln_ffn = nn.LayerNorm(hidden)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        length = x.shape[0]
        shape = (length, self.heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(0, 1)
        k = self.k_proj(x).view(shape).transpose(0, 1)
        v = self.v_proj(x).view(shape).transpose(0, 1)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        probs = torch.softmax(scores, dim=-1)
        context = (probs @ v).transpose(0, 1).reshape(length, -1)
        x = self.ln_attn(x + self.out_proj(context))
        x = self.ln_ffn(x + self.ffn(x))
        return x, probs.mean(dim=0)


class TinyEncoder(nn.Module):
    """From-scratch transformer encoder with learned positions."""

    def __init__(self, vocab_size: int, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(vocab_size, cfg.hidden_size)
        self.pos_emb = nn.Embedding(cfg.max_length, cfg.hidden_size)
        self.layers = nn.ModuleList(
            TinyEncoderLayer(cfg.hidden_size, cfg.num_heads, cfg.ffn_size)
            for _ in range(cfg.num_layers)
        )

    def forward(self, token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        length = token_ids.shape[0]
        positions = torch.arange(length, device=token_ids.device)
        x = self.token_emb(token_ids) + self.pos_emb(positions)
        attention = None
        for layer in self.layers:
            x, attention = layer(x)
        return x, attention


class TinyDocumentEncoder(nn.Module):
    """Document side of the tiny backend."""

    def __init__(self, tokenizer: TinyTokenizer, cfg: EncoderConfig):
        super().__init__()
        self.tokenizer = tokenizer
        self.cfg = cfg
        self.encoder = TinyEncoder(tokenizer.vocab_size, cfg)

    @property
    def hidden_size(self) -> int:
        return self.cfg.hidden_size

    def encode_document(self, doc: Document) -> EncoderOutput:
        words = doc.words
        if not words:
            raise ValueError(f"document {doc.doc_id!r} is empty")
        token_ids = self.tokenizer.encode_words(words)
        if len(token_ids) > self.cfg.max_length:
            token_ids = token_ids[: self.cfg.max_length]
            dropped = truncated_entities(doc, len(token_ids))
            if dropped:
                logger.warning(
                    "document %r: truncation at %d tokens dropped entities %s; "
                    "their pairs are skipped and scored as no-relation",
                    doc.doc_id,
                    self.cfg.max_length,
                    dropped,
                )
            else:
                logger.warning(
                    "document %r: truncated %d of %d words",
                    doc.doc_id,
                    len(words) - len(token_ids),
                    len(words),
                )
        device = self.encoder.token_emb.weight.device
        ids = torch.tensor(token_ids, dtype=torch.long, device=device)
        embeddings, attention = self.encoder(ids)
        # One token per word, so the first-subword map is the identity.
        return EncoderOutput(embeddings, attention, list(range(len(token_ids))))


def mean_pool(token_embeddings: torch.Tensor) -> torch.Tensor:
    """Mean over token rows; identity for a single row."""
    if token_embeddings.shape[0] == 0:
        raise ValueError("cannot pool an empty token matrix")
    return token_embeddings.mean(dim=0)


class TinyLabelEncoder(nn.Module):
    """Label side of the tiny backend: mean-pooled name embeddings."""

    def __init__(self, tokenizer: TinyTokenizer, cfg: EncoderConfig):
        super().__init__()
        self.tokenizer = tokenizer
        self.cfg = cfg
        self.encoder = TinyEncoder(tokenizer.vocab_size, cfg)

    @property
    def hidden_size(self) -> int:
        return self.cfg.hidden_size

    def encode_labels(self, labels: RelationLabelSet) -> torch.Tensor:
        rows = []
        device = self.encoder.token_emb.weight.device
        for relation_id, name in labels:
            words = name.split()
            if not words:
                raise ValueError(f"relation {relation_id!r} has an empty name")
            ids = self.tokenizer.encode_words(words)[: self.cfg.max_length]
            embeddings, _ = self.encoder(torch.tensor(ids, dtype=torch.long, device=device))
            rows.append(mean_pool(embeddings))
        return torch.stack(rows)


class LabelProjection(nn.Module):
    """Maps raw label embeddings into the match space.

    Identity when the label encoder's output dimension already equals the
    latent size; otherwise a two-layer feedforward projection.
    """

    def __init__(self, in_dim: int, latent_dim: int, activation: str = "gelu"):
        super().__init__()
        self.in_dim = in_dim
        self.latent_dim = latent_dim
        self.ffn = (
            None
            if in_dim == latent_dim
            else TwoLayerFFN(in_dim, latent_dim, latent_dim, activation)
        )

    def forward(self, label_embeddings: torch.Tensor) -> torch.Tensor:
        if self.ffn is None:
            return label_embeddings
        return self.ffn(label_embeddings)


class LabelEmbeddingCache:
    """Precomputed raw label matrices, keyed by label set and weights.

    A hit returns a bit-identical tensor to a fresh forward pass; any change
    to the label set or the encoder weights changes the key and forces a
    recompute. Intended for inference (weights frozen).
    """

    def __init__(self):
        self._store: dict[tuple[str, str], torch.Tensor] = {}
        self.hits = 0
        self.misses = 0

    def get(self, labels: RelationLabelSet, encoder: nn.Module) -> torch.Tensor:
        key = (labels.fingerprint(), weights_digest(encoder))
        cached = self._store.get(key)
        if cached is None:
            self.misses += 1
            with torch.no_grad():
                cached = encoder.encode_labels(labels).detach().clone()
            self._store[key] = cached
        else:
            self.hits += 1
        return cached


class PretrainedDocumentEncoder(nn.Module):
    """Hugging Face document encoder (last-layer attention, first subwords).

    Requires the ``pretrained`` extra. Mirrors the tiny backend contract;
    words whose subwords are all truncated away are dropped from the map.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        transformers = _import_transformers()
        self.cfg = cfg
        self.hf_tokenizer = transformers.AutoTokenizer.from_pretrained(cfg.doc_model_name)
        self.model = transformers.AutoModel.from_pretrained(
            cfg.doc_model_name, output_attentions=True
        )

    @property
    def hidden_size(self) -> int:
        return self.model.config.hidden_size

    def encode_document(self, doc: Document) -> EncoderOutput:
        words = list(doc.words)
        if not words:
            raise ValueError(f"document {doc.doc_id!r} is empty")
        encoded = self.hf_tokenizer(
            words,
            is_split_into_words=True,
            truncation=True,
            max_length=self.cfg.max_length,
            return_tensors="pt",
        )
        outputs = self.model(**encoded)
        embeddings = outputs.last_hidden_state[0]
        attention = outputs.attentions[-1][0].mean(dim=0)
        word_ids = encoded.word_ids(0)
        word_map: list[int] = []
        for position, word_id in enumerate(word_ids):
            if word_id is not None and word_id == len(word_map):
                word_map.append(position)
        dropped = truncated_entities(doc, len(word_map))
        if dropped:
            logger.warning(
                "document %r: truncation dropped entities %s", doc.doc_id, dropped
            )
        return EncoderOutput(embeddings, attention, word_map)


class PretrainedLabelEncoder(nn.Module):
    """Hugging Face label encoder with mean pooling over name tokens."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        transformers = _import_transformers()
        self.cfg = cfg
        self.hf_tokenizer = transformers.AutoTokenizer.from_pretrained(cfg.label_model_name)
        self.model = transformers.AutoModel.from_pretrained(cfg.label_model_name)

    @property
    def hidden_size(self) -> int:
        return self.model.config.hidden_size

    def encode_labels(self, labels: RelationLabelSet) -> torch.Tensor:
        rows = []
        for relation_id, name in labels:
            if not name.strip():
                raise ValueError(f"relation {relation_id!r} has an empty name")
            encoded = self.hf_tokenizer(
                name, truncation=True, max_length=self.cfg.max_length, return_tensors="pt"
            )
            hidden = self.model(**encoded).last_hidden_state[0]
            rows.append(mean_pool(hidden))
        return torch.stack(rows)


def _import_transformers():
    try:
        import transformers
    except ImportError as exc:
        raise ImportError(
            "the pretrained backend needs the 'transformers' package; "
            "install docrex[pretrained]"
        ) from exc
    return transformers


def build_document_encoder(
    cfg: EncoderConfig, vocab_sources=None
) -> TinyDocumentEncoder | PretrainedDocumentEncoder:
    """Instantiate the configured document encoder.

    ``vocab_sources`` (word iterables) is required for the tiny backend.
    """
    if cfg.backend_kind == "tiny":
        if vocab_sources is None:
            raise ValueError("tiny backend needs vocab sources to build a vocabulary")
        return TinyDocumentEncoder(TinyTokenizer.build(vocab_sources), cfg)
    return PretrainedDocumentEncoder(cfg)


def build_label_encoder(
    cfg: EncoderConfig, vocab_sources=None
) -> TinyLabelEncoder | PretrainedLabelEncoder:
    if cfg.backend_kind == "tiny":
        if vocab_sources is None:
            raise ValueError("tiny backend needs vocab sources to build a vocabulary")
        return TinyLabelEncoder(TinyTokenizer.build(vocab_sources), cfg)
    return PretrainedLabelEncoder(cfg)
