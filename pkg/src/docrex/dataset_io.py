"""Corpus ingestion and serialization.

Supervised corpora follow the public DocRED JSON layout: an array of
documents with ``title``, ``sents`` (array of token arrays), ``vertexSet``
(per-entity mention lists) and optional ``labels``. The synthetic
pretraining corpus is line-delimited JSON with raw text, word-offset entity
mentions and free-string relation labels. Predictions are line-delimited
JSON records compatible with the official scorers once ``score`` is
dropped.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_model import Document, Entity, GoldFact, Mention, RelationLabelSet

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")

# Documents longer than this (whitespace words) are dropped from the
# pretraining corpus; config-exposed.
DEFAULT_PRETRAIN_MAX_WORDS = 1024


class CorpusError(ValueError):
    """Schema violation with document/field context."""


@dataclass
class CorpusFile:
    """A fully parsed corpus split."""

    path: str
    split: str
    documents: list[Document]

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def by_title(self) -> dict[str, Document]:
        return {doc.title: doc for doc in self.documents}


@dataclass(frozen=True)
class FewShotSpec:
    """Subset sizes and seeds for the few-shot protocol."""

    sizes: tuple[int, ...] = (1, 5, 10, 50, 100, 500, 1000)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self) -> None:
        if not self.sizes or any(n <= 0 for n in self.sizes):
            raise ValueError(f"sizes must be positive, got {self.sizes}")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def num_runs(self) -> int:
        return len(self.sizes) * len(self.seeds)


@dataclass(frozen=True)
class PredictionRecord:
    """One decided triplet, in the official prediction field layout."""

    title: str
    h_idx: int
    t_idx: int
    r: str
    score: float = 1.0

    def key(self) -> tuple[str, int, int, str]:
        return (self.title, self.h_idx, self.t_idx, self.r)


@dataclass
class SkipReport:
    """Filtering counters for the pretraining corpus loader."""

    total_lines: int = 0
    malformed: int = 0
    over_length: int = 0
    kept: int = 0

    @property
    def skipped(self) -> int:
        return self.malformed + self.over_length


def load_rel_info(path: str | Path) -> RelationLabelSet:
    """Read an id -> human-readable-name JSON map."""
    with open(path, encoding="utf-8") as fh:
        mapping = json.load(fh)
    if not isinstance(mapping, dict) or not mapping:
        raise CorpusError(f"{path}: expected a non-empty id->name object")
    return RelationLabelSet.from_dict(mapping)


def load_corpus(
    path: str | Path, rel_info: RelationLabelSet, split: str = "train"
) -> CorpusFile:
    """Parse a DocRED-layout JSON corpus into validated documents.

    Fails loudly on the first schema violation, reporting the document title
    and field path; unknown relation ids are rejected.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise CorpusError(f"{path}: expected a JSON array of documents")
    documents = [
        _parse_document(entry, index, rel_info, str(path)) for index, entry in enumerate(raw)
    ]
    return CorpusFile(path=str(path), split=split, documents=documents)


def _parse_document(
    entry: dict, index: int, rel_info: RelationLabelSet, path: str
) -> Document:
    title = entry.get("title")
    where = f"{path}: document {index} ({title!r})"
    if not isinstance(title, str) or not title:
        raise CorpusError(f"{path}: document {index}: missing or empty 'title'")
    sents = entry.get("sents")
    if not isinstance(sents, list) or not all(isinstance(s, list) for s in sents):
        raise CorpusError(f"{where}: 'sents' must be an array of token arrays")
    vertex_set = entry.get("vertexSet")
    if not isinstance(vertex_set, list):
        raise CorpusError(f"{where}: missing 'vertexSet'")

    entities = []
    for e_idx, mention_list in enumerate(vertex_set):
        if not isinstance(mention_list, list) or not mention_list:
            raise CorpusError(f"{where}: vertexSet[{e_idx}] must be a non-empty array")
        mentions = []
        entity_type = ""
        for m_idx, raw_mention in enumerate(mention_list):
            field_path = f"vertexSet[{e_idx}][{m_idx}]"
            try:
                pos = raw_mention["pos"]
                mention = Mention(
                    sent_index=int(raw_mention["sent_id"]),
                    token_start=int(pos[0]),
                    token_end=int(pos[1]),
                    surface=str(raw_mention.get("name", "")),
                )
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise CorpusError(f"{where}: {field_path}: {exc}") from exc
            entity_type = str(raw_mention.get("type", entity_type))
            mentions.append(mention)
        entities.append(Entity(entity_index=e_idx, mentions=tuple(mentions), entity_type=entity_type))

    gold = []
    for l_idx, raw_label in enumerate(entry.get("labels", [])):
        field_path = f"labels[{l_idx}]"
        try:
            fact = GoldFact(
                head_index=int(raw_label["h"]),
                tail_index=int(raw_label["t"]),
                relation_id=str(raw_label["r"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CorpusError(f"{where}: {field_path}: {exc}") from exc
        if fact.relation_id not in rel_info:
            raise CorpusError(
                f"{where}: {field_path}: unknown relation id {fact.relation_id!r}"
            )
        gold.append(fact)

    try:
        return Document(
            doc_id=title,
            title=title,
            sentences=tuple(tuple(str(t) for t in sent) for sent in sents),
            entities=tuple(entities),
            gold_labels=tuple(gold),
        )
    except ValueError as exc:
        raise CorpusError(f"{where}: {exc}") from exc


def sample_fewshot(corpus: CorpusFile, n: int, seed: int) -> CorpusFile:
    """Seeded uniform document sample without replacement, in canonical order.

    Subsets for one seed are nested: the n=1 subset is a subset of the n=5
    subset, and so on, because each draw takes a prefix of one seeded
    permutation (PCG64, so results are identical across platforms).
    """
    size = len(corpus)
    if n > size:
        raise ValueError(f"requested {n} documents but corpus has {size}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(size)
    chosen = sorted(int(i) for i in order[:n])
    return CorpusFile(
        path=corpus.path,
        split=corpus.split,
        documents=[corpus.documents[i] for i in chosen],
    )


def load_pretrain_corpus(
    path: str | Path, max_words: int = DEFAULT_PRETRAIN_MAX_WORDS
) -> tuple[CorpusFile, SkipReport]:
    """Read the line-delimited synthetic pretraining corpus.

    Each line holds ``{text, entities, relations}`` with word-offset mention
    spans and free-string labels (kept verbatim for the label encoder).
    Malformed lines and over-length documents are skipped and counted; a
    skip rate above 50% aborts, since it signals a corrupt corpus.
    """
    report = SkipReport()
    documents = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            report.total_lines += 1
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                report.malformed += 1
                continue
            words = str(record.get("text", "")).split()
            if len(words) > max_words:
                report.over_length += 1
                continue
            try:
                documents.append(pretrain_record_to_document(record, f"pretrain-{line_no}"))
            except (KeyError, TypeError, ValueError):
                report.malformed += 1
                continue
            report.kept += 1
    if report.total_lines and report.skipped / report.total_lines > 0.5:
        raise CorpusError(
            f"{path}: {report.skipped}/{report.total_lines} records skipped; "
            "corpus looks corrupt"
        )
    corpus = CorpusFile(path=str(path), split="train", documents=documents)
    return corpus, report


def pretrain_record_to_document(record: dict, fallback_id: str) -> Document:
    """Convert one pretraining record to a single-sentence document.

    ``text`` is whitespace-tokenized into one sentence; mention ``start`` /
    ``end`` are word offsets (end exclusive).
    """
    words = tuple(str(record["text"]).split())
    if not words:
        raise ValueError("empty text")
    doc_id = str(record.get("doc_hash", fallback_id))
    entities = []
    for e_idx, raw_entity in enumerate(record["entities"]):
        mentions = []
        for raw_mention in raw_entity["mentions"]:
            start = int(raw_mention["start"])
            end = int(raw_mention["end"])
            mentions.append(
                Mention(
                    sent_index=0,
                    token_start=start,
                    token_end=end,
                    surface=" ".join(words[start:end]),
                )
            )
        entities.append(Entity(entity_index=e_idx, mentions=tuple(mentions)))
    id_to_index = {raw.get("id", i): i for i, raw in enumerate(record["entities"])}
    gold = []
    for raw_rel in record.get("relations", []):
        gold.append(
            GoldFact(
                head_index=id_to_index[raw_rel["head"]],
                tail_index=id_to_index[raw_rel["tail"]],
                relation_id=str(raw_rel["label"]),
            )
        )
    return Document(
        doc_id=doc_id,
        title=doc_id,
        sentences=(words,),
        entities=tuple(entities),
        gold_labels=tuple(gold),
    )


def corpus_label_set(corpus: CorpusFile) -> RelationLabelSet:
    """Label set from the distinct relation strings of a corpus (sorted).

    Pretraining labels are free strings, so id and name coincide.
    """
    seen = sorted({fact.relation_id for doc in corpus for fact in doc.gold_labels})
    if not seen:
        raise ValueError("corpus has no gold relations to derive a label set from")
    return RelationLabelSet([(label, label) for label in seen])


_PREDICTION_FIELDS = ("title", "h_idx", "t_idx", "r", "score")


def write_predictions(preds: list[PredictionRecord], path: str | Path) -> None:
    """Write line-delimited prediction records."""
    with open(path, "w", encoding="utf-8") as fh:
        for pred in preds:
            fh.write(
                json.dumps(
                    {
                        "title": pred.title,
                        "h_idx": pred.h_idx,
                        "t_idx": pred.t_idx,
                        "r": pred.r,
                        "score": pred.score,
                    },
                    ensure_ascii=False,
                )
            )
            fh.write("\n")


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    """Read prediction records back; validates field presence per line."""
    preds = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            missing = [f for f in _PREDICTION_FIELDS if f not in record]
            if missing:
                raise CorpusError(f"{path}:{line_no}: missing fields {missing}")
            preds.append(
                PredictionRecord(
                    title=str(record["title"]),
                    h_idx=int(record["h_idx"]),
                    t_idx=int(record["t_idx"]),
                    r=str(record["r"]),
                    score=float(record["score"]),
                )
            )
    return preds
