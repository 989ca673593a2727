"""Zero-shot relation extraction through a completion endpoint.

Documents are rendered with entity mentions wrapped in indexed tags and a
serialized relation label list; the completion is constrained (by
instruction here, optionally by server-side decoding) to one parenthesized
(head_index, relation_id, tail_index) triplet per line. Parsing is a total
function over arbitrary text: every candidate line is either accepted or
rejected into a counted category. Accepted triplets become score-1.0
prediction records evaluated by the shared metric suite.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .clients import ClientError
from .data_model import Document, RelationLabelSet
from .dataset_io import CorpusFile, PredictionRecord
from .metrics import EvalReport, evaluate

logger = logging.getLogger(__name__)

DEFAULT_ZEROSHOT_TEMPLATE = """\
Extract the relations between the tagged entities in the document below.

Entity mentions are marked inline with indexed tags: <e0>...</e0> marks
mentions of entity 0, <e1>...</e1> marks mentions of entity 1, and so on.
The same entity index may appear several times.

Allowed relation labels, one per line as "identifier: name":
{labels}

Output one triplet per line, in exactly this format and nothing else:
(head_entity_index, relation_identifier, tail_entity_index)

Use only the numeric entity indexes from the tags and only the allowed
relation identifiers. Output nothing if no relation holds.

Document:
{document}
"""

_TAG_RE = re.compile(r"</?e\d+>")
_TRIPLET_RE = re.compile(r"\(\s*([^(),]*?)\s*,\s*([^(),]*?)\s*,\s*([^(),]*?)\s*\)")


@dataclass
class RejectCounts:
    """Per-category counts of discarded candidate lines."""

    malformed: int = 0
    unknown_relation: int = 0
    out_of_range: int = 0
    duplicate: int = 0

    @property
    def total(self) -> int:
        return self.malformed + self.unknown_relation + self.out_of_range + self.duplicate


@dataclass
class ZeroShotReport:
    """Run-level accounting for one zero-shot pass."""

    documents: int = 0
    failed_documents: int = 0
    triplets: int = 0
    rejects: RejectCounts = field(default_factory=RejectCounts)

    @property
    def degraded(self) -> bool:
        return self.documents > 0 and self.failed_documents / self.documents > 0.10


def serialize_labels(labels: RelationLabelSet) -> str:
    return "\n".join(f"{rid}: {name}" for rid, name in labels)


def tag_document(doc: Document) -> tuple[str, int]:
    """Wrap every mention in its entity's indexed tag.

    Overlapping mentions are resolved outermost-wins (longer span first,
    then lower entity index), deterministically; the number of mentions
    dropped by overlap is returned and logged as a warning.
    """
    claims = []  # (sent, start, end, entity_index)
    for entity in doc.entities:
        for mention in entity.mentions:
            claims.append(
                (mention.sent_index, mention.token_start, mention.token_end, entity.entity_index)
            )
    # Longer spans first so containers win over contained spans.
    claims.sort(key=lambda c: (c[0], c[1], -(c[2] - c[1]), c[3]))
    kept: list[tuple[int, int, int, int]] = []
    dropped = 0
    for sent, start, end, index in claims:
        overlaps = any(
            k_sent == sent and start < k_end and k_start < end
            for k_sent, k_start, k_end, _ in kept
        )
        if overlaps:
            dropped += 1
        else:
            kept.append((sent, start, end, index))
    if dropped:
        logger.warning(
            "document %r: %d overlapping mentions left untagged", doc.doc_id, dropped
        )

    opens: dict[tuple[int, int], int] = {}
    closes: dict[tuple[int, int], int] = {}
    for sent, start, end, index in kept:
        opens[(sent, start)] = index
        closes[(sent, end - 1)] = index
    pieces = []
    for s_idx, sentence in enumerate(doc.sentences):
        for t_idx, word in enumerate(sentence):
            token = word
            if (s_idx, t_idx) in opens:
                token = f"<e{opens[(s_idx, t_idx)]}>" + token
            if (s_idx, t_idx) in closes:
                token = token + f"</e{closes[(s_idx, t_idx)]}>"
            pieces.append(token)
    return " ".join(pieces), dropped


def strip_tags(tagged: str) -> str:
    return _TAG_RE.sub("", tagged)


def render_prompt(doc: Document, labels: RelationLabelSet, template: str = DEFAULT_ZEROSHOT_TEMPLATE) -> str:
    if "{document}" not in template or "{labels}" not in template:
        raise ValueError("template needs {document} and {labels} placeholders")
    tagged, _ = tag_document(doc)
    return template.replace("{labels}", serialize_labels(labels)).replace("{document}", tagged)


def parse_triplets(
    completion: str, doc: Document, labels: RelationLabelSet
) -> tuple[list[tuple[int, str, int]], RejectCounts]:
    """Extract strict (head, relation, tail) triplets from arbitrary text.

    A candidate is any parenthesized three-field group on a line; prose
    lines without one are ignored. Candidates with non-integer indices are
    malformed; unknown relation ids, out-of-range entity indices and
    duplicates are counted separately. Never raises.
    """
    rejects = RejectCounts()
    accepted: list[tuple[int, str, int]] = []
    seen: set[tuple[int, str, int]] = set()
    m = doc.num_entities
    for line in completion.splitlines():
        match = _TRIPLET_RE.search(line)
        if match is None:
            continue
        head_text, relation_id, tail_text = (g.strip() for g in match.groups())
        try:
            head = int(head_text)
            tail = int(tail_text)
        except ValueError:
            rejects.malformed += 1
            continue
        if relation_id not in labels:
            rejects.unknown_relation += 1
            continue
        if not (0 <= head < m and 0 <= tail < m):
            rejects.out_of_range += 1
            continue
        triplet = (head, relation_id, tail)
        if triplet in seen:
            rejects.duplicate += 1
            continue
        seen.add(triplet)
        accepted.append(triplet)
    return accepted, rejects


def run_zeroshot(
    corpus: CorpusFile,
    client,
    labels: RelationLabelSet,
    template: str = DEFAULT_ZEROSHOT_TEMPLATE,
) -> tuple[list[PredictionRecord], EvalReport, ZeroShotReport]:
    """Render, complete at temperature 0, parse, and score a whole corpus.

    Predictions carry score 1.0 (no calibrated confidence is available);
    per-document client failures skip the document, and a failure rate
    above 10% marks the run degraded.
    """
    report = ZeroShotReport()
    predictions: list[PredictionRecord] = []
    for doc in corpus:
        report.documents += 1
        prompt = render_prompt(doc, labels, template)
        try:
            completion = client.complete(prompt, temperature=0.0)
        except ClientError as exc:
            report.failed_documents += 1
            logger.warning("zero-shot request failed for %r: %s", doc.doc_id, exc)
            continue
        triplets, rejects = parse_triplets(completion, doc, labels)
        report.triplets += len(triplets)
        report.rejects.malformed += rejects.malformed
        report.rejects.unknown_relation += rejects.unknown_relation
        report.rejects.out_of_range += rejects.out_of_range
        report.rejects.duplicate += rejects.duplicate
        for head, relation_id, tail in triplets:
            predictions.append(
                PredictionRecord(title=doc.title, h_idx=head, t_idx=tail, r=relation_id, score=1.0)
            )
    if report.degraded:
        logger.warning(
            "zero-shot run degraded: %d/%d documents failed",
            report.failed_documents,
            report.documents,
        )
    eval_report = evaluate(predictions, corpus)
    return predictions, eval_report, report
