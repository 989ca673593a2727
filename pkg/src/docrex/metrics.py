"""Micro F1 and Ign F1 over relation triplets.

A prediction is correct iff its (document, head index, tail index, relation)
matches a gold label exactly. Ign F1 follows the official DocRED scorer
convention: correct predictions whose relational fact — any (head mention
name, relation, tail mention name) combination — appears in the training
set are removed from the true-positive and prediction counts of the
precision term, while the recall term and the gold denominator stay
unchanged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

from .data_model import Document
from .dataset_io import CorpusFile, PredictionRecord

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("precision", "recall", "f1", "ign_precision", "ign_recall", "ign_f1")


@dataclass(frozen=True)
class EvalReport:
    """Scores plus the counts they were derived from."""

    precision: float
    recall: float
    f1: float
    ign_precision: float
    ign_recall: float
    ign_f1: float
    tp: int
    fp: int
    fn: int
    ignored_correct: int

    @property
    def num_predictions(self) -> int:
        return self.tp + self.fp

    @property
    def num_gold(self) -> int:
        return self.tp + self.fn

    @property
    def tp_ign(self) -> int:
        return self.tp - self.ignored_correct

    @property
    def preds_ign(self) -> int:
        return self.num_predictions - self.ignored_correct

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ign_precision": self.ign_precision,
            "ign_recall": self.ign_recall,
            "ign_f1": self.ign_f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "ignored_correct": self.ignored_correct,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def format_table(self) -> str:
        rows = [
            ("precision", self.precision, "ign_precision", self.ign_precision),
            ("recall", self.recall, "ign_recall", self.ign_recall),
            ("f1", self.f1, "ign_f1", self.ign_f1),
        ]
        lines = [f"{'metric':<12} {'value':>8}   {'metric':<14} {'value':>8}"]
        for name, value, ign_name, ign_value in rows:
            lines.append(f"{name:<12} {value:>8.4f}   {ign_name:<14} {ign_value:>8.4f}")
        lines.append(
            f"tp={self.tp} fp={self.fp} fn={self.fn} ignored_correct={self.ignored_correct}"
        )
        return "\n".join(lines)


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def build_train_facts(corpus: CorpusFile) -> frozenset[tuple[str, str, str]]:
    """(head name, relation, tail name) string facts from training gold labels.

    Every mention name of each entity counts, matching the public evaluation
    convention (train and test contain different documents, so entity
    indices cannot be compared across them).
    """
    facts = set()
    for doc in corpus:
        for fact in doc.gold_labels:
            heads = doc.entities[fact.head_index].mentions
            tails = doc.entities[fact.tail_index].mentions
            for head_mention in heads:
                for tail_mention in tails:
                    facts.add((head_mention.surface, fact.relation_id, tail_mention.surface))
    return frozenset(facts)


def _fact_in_train(
    doc: Document, pred: PredictionRecord, train_facts: frozenset
) -> bool:
    for head_mention in doc.entities[pred.h_idx].mentions:
        for tail_mention in doc.entities[pred.t_idx].mentions:
            if (head_mention.surface, pred.r, tail_mention.surface) in train_facts:
                return True
    return False


def evaluate(
    preds: list[PredictionRecord],
    gold_corpus: CorpusFile,
    train_fact_set: frozenset[tuple[str, str, str]] = frozenset(),
) -> EvalReport:
    """Micro-averaged triplet F1 and Ign F1 against a gold corpus.

    Duplicate predictions for one (doc, h, t, r) are deduplicated with a
    warning; predictions referencing unknown documents are an error.
    """
    by_title = gold_corpus.by_title()
    unique: dict[tuple, PredictionRecord] = {}
    duplicates = 0
    for pred in preds:
        if pred.title not in by_title:
            raise ValueError(f"prediction references unknown document {pred.title!r}")
        doc = by_title[pred.title]
        if not (0 <= pred.h_idx < doc.num_entities and 0 <= pred.t_idx < doc.num_entities):
            raise ValueError(
                f"prediction ({pred.title!r}, {pred.h_idx}, {pred.t_idx}, {pred.r}) "
                f"references an unknown entity index"
            )
        if pred.key() in unique:
            duplicates += 1
        else:
            unique[pred.key()] = pred
    if duplicates:
        logger.warning("deduplicated %d duplicate predictions", duplicates)

    gold_keys = {
        (doc.title, fact.head_index, fact.tail_index, fact.relation_id)
        for doc in gold_corpus
        for fact in doc.gold_labels
    }
    tp = 0
    ignored_correct = 0
    for key, pred in unique.items():
        if key in gold_keys:
            tp += 1
            if _fact_in_train(by_title[pred.title], pred, train_fact_set):
                ignored_correct += 1
    num_preds = len(unique)
    num_gold = len(gold_keys)

    precision = tp / num_preds if num_preds else 0.0
    recall = tp / num_gold if num_gold else 0.0
    preds_ign = num_preds - ignored_correct
    ign_precision = (tp - ignored_correct) / preds_ign if preds_ign else 0.0
    # Official scorer convention: the recall term of Ign F1 is unchanged.
    ign_recall = recall
    return EvalReport(
        precision=precision,
        recall=recall,
        f1=_f1(precision, recall),
        ign_precision=ign_precision,
        ign_recall=ign_recall,
        ign_f1=_f1(ign_precision, ign_recall),
        tp=tp,
        fp=num_preds - tp,
        fn=num_gold - tp,
        ignored_correct=ignored_correct,
    )


def aggregate_runs(
    reports: list[EvalReport], population_std: bool = False
) -> dict[str, tuple[float, float]]:
    """Per-metric mean and standard deviation over repeated runs.

    Sample std (ddof=1) by default; single-report aggregates get std 0 by
    convention.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {}
    n = len(reports)
    for name in METRIC_FIELDS:
        values = [getattr(r, name) for r in reports]
        mean = sum(values) / n
        if n == 1:
            std = 0.0
        else:
            denom = n if population_std else n - 1
            std = (sum((v - mean) ** 2 for v in values) / denom) ** 0.5
        out[name] = (mean, std)
    return out
