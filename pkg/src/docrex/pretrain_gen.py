"""Synthetic pretraining corpus generation.

Raw text documents are sent to an annotation model which returns entities
(character-offset mentions) and relations (free-string labels) as JSON.
Responses are validated, character spans are snapped to word boundaries,
and the malformed / over-length filters mirror the pretraining corpus
loader, so every kept record is loadable. Runs are resumable: documents
already present in the output (keyed by content hash) are skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .clients import ClientError
from .data_model import GoldFact
from .dataset_io import DEFAULT_PRETRAIN_MAX_WORDS, CorpusFile, pretrain_record_to_document

logger = logging.getLogger(__name__)

# Character-offset repairs beyond this distance are rejected as malformed.
SNAP_TOLERANCE = 2

DEFAULT_GENERATION_TEMPLATE = """\
You are an information extraction annotator. Read the document below and
annotate the entities it mentions and the relations that hold between them.

Respond with a single JSON object and nothing else, using exactly this schema:

{
  "entities": [
    {"id": 0, "mentions": [{"start": 0, "end": 5}]}
  ],
  "relations": [
    {"head": 0, "tail": 1, "label": "RELATION_NAME"}
  ]
}

Rules:
- "start" and "end" are character offsets into the document text, end exclusive.
- Group mentions referring to the same real-world entity under one id.
- "label" is a short uppercase relation name with underscores, for example
  IS_LOCATED_IN, WORKS_FOR, PART_OF or CONTAINS.
- Only annotate relations clearly supported by the document.

Document:
{document}
"""


@dataclass
class GenReport:
    """Counters for one generation run."""

    requested: int = 0
    returned: int = 0
    malformed_json: int = 0
    over_length: int = 0
    kept: int = 0
    skipped_resume: int = 0
    failed_requests: int = 0
    unique_labels: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def doc_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def render_generation_prompt(template: str, document: str) -> str:
    """Literal placeholder substitution; templates may contain JSON braces."""
    if "{document}" not in template:
        raise ValueError("template is missing the {document} placeholder")
    return template.replace("{document}", document)


def _snap_span(text: str, start: int, end: int) -> tuple[int, int] | None:
    """Map a character span to word offsets, repairing small misalignments.

    Spans are snapped to the nearest word boundaries within SNAP_TOLERANCE
    characters; anything worse, or outside the text, is rejected.
    """
    if not (0 <= start < end <= len(text)):
        return None
    starts, ends = [], []
    pos = 0
    for word in text.split():
        begin = text.index(word, pos)
        starts.append(begin)
        ends.append(begin + len(word))
        pos = begin + len(word)
    if not starts:
        return None
    first = min(range(len(starts)), key=lambda i: abs(starts[i] - start))
    last = min(range(len(ends)), key=lambda i: abs(ends[i] - end))
    if abs(starts[first] - start) > SNAP_TOLERANCE or abs(ends[last] - end) > SNAP_TOLERANCE:
        return None
    if last < first:
        return None
    return first, last + 1


def parse_annotation(text: str, completion: str) -> dict | None:
    """Validate one completion into a pretraining record, or None if malformed.

    Expects a JSON object with entities (char-offset mentions) and
    relations; spans are converted to word offsets. Any structural problem
    rejects the whole record.
    """
    try:
        payload = json.loads(completion)
    except json.JSONDecodeError:
        return None
    if not isinstance(payload, dict):
        return None
    raw_entities = payload.get("entities")
    raw_relations = payload.get("relations", [])
    if not isinstance(raw_entities, list) or not isinstance(raw_relations, list):
        return None

    entities = []
    known_ids = set()
    for raw in raw_entities:
        try:
            entity_id = raw["id"]
            raw_mentions = raw["mentions"]
        except (TypeError, KeyError):
            return None
        mentions = []
        for m in raw_mentions:
            try:
                span = _snap_span(text, int(m["start"]), int(m["end"]))
            except (TypeError, KeyError, ValueError):
                return None
            if span is None:
                return None
            mentions.append({"start": span[0], "end": span[1]})
        if not mentions:
            return None
        known_ids.add(entity_id)
        entities.append({"id": entity_id, "mentions": mentions})

    relations = []
    for raw in raw_relations:
        try:
            head, tail, label = raw["head"], raw["tail"], str(raw["label"])
        except (TypeError, KeyError):
            return None
        if head not in known_ids or tail not in known_ids or not label:
            return None
        relations.append({"head": head, "tail": tail, "label": label})

    if not entities:
        return None
    record = {
        "text": text,
        "entities": entities,
        "relations": relations,
        "doc_hash": doc_hash(text),
    }
    # Pipeline closure: a kept record must survive the corpus loader.
    try:
        pretrain_record_to_document(record, "validation")
    except (KeyError, TypeError, ValueError):
        return None
    return record


def _existing_hashes(out_path: Path) -> set[str]:
    hashes = set()
    if out_path.exists():
        with open(out_path, encoding="utf-8") as fh:
            for line in fh:
                try:
                    record = json.loads(line)
                except json.JSONDecodeError:
                    continue
                if "doc_hash" in record:
                    hashes.add(record["doc_hash"])
    return hashes


def generate(
    raw_docs: list[str],
    client,
    template: str = DEFAULT_GENERATION_TEMPLATE,
    max_words: int = DEFAULT_PRETRAIN_MAX_WORDS,
    out_path: str | Path | None = None,
) -> tuple[list[dict], GenReport]:
    """Annotate raw documents into pretraining records.

    Raw outputs are filtered after the request: over-length documents and
    malformed annotations are dropped and counted, so
    ``kept = returned - malformed_json - over_length`` always holds. Client
    failures (after the client's own retries) skip the document. When
    ``out_path`` is given, records append to it and already-annotated
    documents are skipped by content hash.
    """
    report = GenReport()
    records: list[dict] = []
    done = _existing_hashes(Path(out_path)) if out_path is not None else set()
    out_fh = open(out_path, "a", encoding="utf-8") if out_path is not None else None
    try:
        for text in raw_docs:
            text = text.strip()
            if not text:
                continue
            if doc_hash(text) in done:
                report.skipped_resume += 1
                continue
            report.requested += 1
            prompt = render_generation_prompt(template, text)
            try:
                completion = client.complete(prompt)
            except ClientError as exc:
                report.failed_requests += 1
                logger.warning("annotation failed for doc %s: %s", doc_hash(text)[:12], exc)
                continue
            report.returned += 1
            logger.info(
                "annotated doc %s: %d chars returned", doc_hash(text)[:12], len(completion)
            )
            if len(text.split()) > max_words:
                report.over_length += 1
                continue
            record = parse_annotation(text, completion)
            if record is None:
                report.malformed_json += 1
                continue
            report.kept += 1
            records.append(record)
            done.add(record["doc_hash"])
            if out_fh is not None:
                out_fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    finally:
        if out_fh is not None:
            out_fh.close()
    report.unique_labels = len(
        {rel["label"] for record in records for rel in record["relations"]}
    )
    assert (
        report.kept == report.returned - report.malformed_json - report.over_length
    ), "kept-count bookkeeping broke"
    return records, report


def normalize_label(label: str) -> str:
    """Canonical label form: trimmed, inner whitespace runs collapsed to
    underscores, uppercased."""
    collapsed = re.sub(r"\s+", "_", label.strip())
    return collapsed.upper()


def normalize_labels(corpus: CorpusFile) -> tuple[CorpusFile, dict[str, str], int]:
    """Normalize every relation string of a corpus.

    Returns the rewritten corpus, the original -> normalized mapping, and
    the count of relations dropped because they normalized to empty.
    """
    mapping: dict[str, str] = {}
    dropped = 0
    documents = []
    for doc in corpus:
        facts = []
        for fact in doc.gold_labels:
            normalized = normalize_label(fact.relation_id)
            if not normalized:
                dropped += 1
                continue
            mapping[fact.relation_id] = normalized
            facts.append(GoldFact(fact.head_index, fact.tail_index, normalized))
        documents.append(
            type(doc)(
                doc_id=doc.doc_id,
                title=doc.title,
                sentences=doc.sentences,
                entities=doc.entities,
                gold_labels=tuple(facts),
            )
        )
    return CorpusFile(corpus.path, corpus.split, documents), mapping, dropped


def load_raw_documents(path: str | Path) -> list[str]:
    """Raw text source: a directory of .txt files (sorted) or one file with
    one document per line."""
    path = Path(path)
    if path.is_dir():
        return [
            p.read_text(encoding="utf-8").strip()
            for p in sorted(path.glob("*.txt"))
        ]
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
