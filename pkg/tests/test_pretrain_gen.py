"""Synthetic annotation pipeline: generation, filtering, label hygiene."""

import json

import pytest

from docrex.clients import (
    ClientError,
    HttpAnnotatorClient,
    MockAnnotatorClient,
    simple_mock_annotator,
)
from docrex.dataset_io import load_pretrain_corpus
from docrex.pretrain_gen import (
    DEFAULT_GENERATION_TEMPLATE,
    doc_hash,
    generate,
    load_raw_documents,
    normalize_label,
    normalize_labels,
    parse_annotation,
    render_generation_prompt,
)


def fixed_annotation(text: str) -> str:
    words = text.split()
    first, last = words[0], words[-1]
    return json.dumps(
        {
            "entities": [
                {"id": 0, "mentions": [{"start": 0, "end": len(first)}]},
                {
                    "id": 1,
                    "mentions": [{"start": len(text) - len(last), "end": len(text)}],
                },
            ],
            "relations": [{"head": 0, "tail": 1, "label": "WORKS_FOR"}],
        }
    )


def echo_client() -> MockAnnotatorClient:
    from docrex.clients import extract_document_from_prompt

    return MockAnnotatorClient(lambda p: fixed_annotation(extract_document_from_prompt(p)))


class TestRenderPrompt:
    def test_document_substituted(self):
        prompt = render_generation_prompt(DEFAULT_GENERATION_TEMPLATE, "alice met bob")
        assert "alice met bob" in prompt
        assert "{document}" not in prompt

    def test_template_without_placeholder_rejected(self):
        with pytest.raises(ValueError, match="placeholder"):
            render_generation_prompt("no slot here", "text")

    def test_json_braces_in_template_survive(self):
        # The schema example inside the default template must not be
        # interpreted as a substitution field.
        assert '"entities"' in DEFAULT_GENERATION_TEMPLATE
        prompt = render_generation_prompt(DEFAULT_GENERATION_TEMPLATE, "x")
        assert '{"start": 0, "end": 5}' in prompt.replace("'", '"')


class TestParseAnnotation:
    TEXT = "alice works for acme corp"

    def test_valid_annotation(self):
        record = parse_annotation(self.TEXT, fixed_annotation(self.TEXT))
        assert record is not None
        assert record["entities"][0]["mentions"][0] == {"start": 0, "end": 1}
        assert record["entities"][1]["mentions"][0] == {"start": 4, "end": 5}
        assert record["relations"][0]["label"] == "WORKS_FOR"
        assert record["doc_hash"] == doc_hash(self.TEXT)

    def test_truncated_json_is_malformed(self):
        assert parse_annotation(self.TEXT, '{"entities": [') is None

    def test_non_object_is_malformed(self):
        assert parse_annotation(self.TEXT, "[1, 2]") is None

    def test_span_outside_text_is_malformed(self):
        bad = json.dumps(
            {
                "entities": [{"id": 0, "mentions": [{"start": 0, "end": 999}]}],
                "relations": [],
            }
        )
        assert parse_annotation(self.TEXT, bad) is None

    def test_off_by_one_span_snapped(self):
        # "works" spans chars [6, 11); offsets shifted by one repair to the
        # word boundary.
        ann = json.dumps(
            {
                "entities": [{"id": 0, "mentions": [{"start": 7, "end": 10}]}],
                "relations": [],
            }
        )
        record = parse_annotation(self.TEXT, ann)
        assert record is not None
        assert record["entities"][0]["mentions"][0] == {"start": 1, "end": 2}

    def test_mid_word_span_rejected(self):
        # Start 3+ chars away from any word boundary: unrepairable.
        ann = json.dumps(
            {
                "entities": [{"id": 0, "mentions": [{"start": 9, "end": 25}]}],
                "relations": [],
            }
        )
        assert parse_annotation(self.TEXT, ann) is None

    def test_relation_with_unknown_entity_rejected(self):
        ann = json.dumps(
            {
                "entities": [{"id": 0, "mentions": [{"start": 0, "end": 5}]}],
                "relations": [{"head": 0, "tail": 9, "label": "X"}],
            }
        )
        assert parse_annotation(self.TEXT, ann) is None


class TestGenerate:
    def test_fixed_valid_annotation_kept(self):
        records, report = generate(["alice works for acme"], echo_client())
        assert report.kept == 1 and report.returned == 1
        assert report.requested == 1
        assert len(records) == 1

    def test_malformed_counted(self):
        client = MockAnnotatorClient(lambda p: '{"entities": [')
        records, report = generate(["some document here"], client)
        assert report.malformed_json == 1 and report.kept == 0
        assert records == []

    def test_over_length_counted_after_return(self):
        long_doc = " ".join(["word"] * 40)
        records, report = generate([long_doc, "short doc here"], echo_client(), max_words=30)
        assert report.over_length == 1
        assert report.kept == 1
        assert report.kept == report.returned - report.malformed_json - report.over_length

    def test_label_preserved_verbatim(self):
        records, _ = generate(["bob joined globex"], echo_client())
        assert records[0]["relations"][0]["label"] == "WORKS_FOR"

    def test_unique_label_count(self):
        labels = iter(["A_REL", "B_REL", "A_REL"])

        def respond(prompt):
            from docrex.clients import extract_document_from_prompt

            text = extract_document_from_prompt(prompt)
            ann = json.loads(fixed_annotation(text))
            ann["relations"][0]["label"] = next(labels)
            return json.dumps(ann)

        _, report = generate(
            ["one doc here", "two docs here", "three docs here"],
            MockAnnotatorClient(respond),
        )
        assert report.unique_labels == 2

    def test_client_failure_skips_and_counts(self):
        calls = {"n": 0}

        def respond(prompt):
            calls["n"] += 1
            raise ClientError("down")

        class FailingClient:
            def complete(self, prompt, temperature=None):
                return respond(prompt)

        records, report = generate(["doc one here", "doc two here"], FailingClient())
        assert report.failed_requests == 2 and report.kept == 0

    def test_resume_skips_existing_hashes(self, tmp_path):
        out = tmp_path / "corpus.jsonl"
        docs = ["alice works for acme", "bob works for globex"]
        client = echo_client()
        _, first = generate(docs, client, out_path=out)
        assert first.kept == 2
        calls_before = client.calls
        _, second = generate(docs + ["carol works for initech"], client, out_path=out)
        assert second.skipped_resume == 2
        assert second.kept == 1
        assert client.calls == calls_before + 1
        # File accumulated all three.
        assert len(out.read_text().strip().splitlines()) == 3

    def test_pipeline_closure_with_loader(self, tmp_path):
        out = tmp_path / "corpus.jsonl"
        docs = [f"doc number {i} mentions topic {i}" for i in range(10)]
        _, report = generate(docs, simple_mock_annotator(), out_path=out)
        assert report.kept == 10
        corpus, skip_report = load_pretrain_corpus(out)
        assert skip_report.skipped == 0
        assert len(corpus) == 10


class TestNormalizeLabels:
    def test_stated_rules(self):
        assert normalize_label("works for") == "WORKS_FOR"
        assert normalize_label("PART_OF") == "PART_OF"
        assert normalize_label("  contains  ") == "CONTAINS"
        assert normalize_label("is   located	in") == "IS_LOCATED_IN"

    def test_corpus_rewrite_and_mapping(self, tmp_path):
        lines = []
        for label in ("works for", "WORKS_FOR", "   "):
            record = {
                "text": "a works for b",
                "entities": [
                    {"id": 0, "mentions": [{"start": 0, "end": 1}]},
                    {"id": 1, "mentions": [{"start": 3, "end": 4}]},
                ],
                "relations": [{"head": 0, "tail": 1, "label": label}],
            }
            lines.append(json.dumps(record))
        path = tmp_path / "p.jsonl"
        path.write_text("\n".join(lines), encoding="utf-8")
        corpus, _ = load_pretrain_corpus(path)
        normalized, mapping, dropped = normalize_labels(corpus)
        assert mapping == {"works for": "WORKS_FOR", "WORKS_FOR": "WORKS_FOR"}
        assert dropped == 1
        kept_labels = [f.relation_id for d in normalized for f in d.gold_labels]
        assert kept_labels == ["WORKS_FOR", "WORKS_FOR"]


class TestHttpClientRetry:
    def make_client(self):
        return HttpAnnotatorClient(
            "http://annotator.test/v1/chat/completions",
            "test-model",
            max_retries=3,
            backoff_base=0.0,
        )

    def test_recovers_after_transient_failures(self, monkeypatch):
        import requests

        attempts = {"n": 0}

        class FakeResponse:
            def raise_for_status(self):
                pass

            def json(self):
                return {"choices": [{"message": {"content": "ok"}}]}

        def fake_post(url, json=None, timeout=None):
            attempts["n"] += 1
            if attempts["n"] < 3:
                raise requests.ConnectionError("transient")
            return FakeResponse()

        monkeypatch.setattr("docrex.clients.requests.post", fake_post)
        assert self.make_client().complete("hello") == "ok"
        assert attempts["n"] == 3

    def test_exhausted_retries_raise(self, monkeypatch):
        import requests

        def fake_post(url, json=None, timeout=None):
            raise requests.Timeout("still down")

        monkeypatch.setattr("docrex.clients.requests.post", fake_post)
        with pytest.raises(ClientError, match="after 3 attempts"):
            self.make_client().complete("hello")

    def test_payload_shape(self, monkeypatch):
        seen = {}

        class FakeResponse:
            def raise_for_status(self):
                pass

            def json(self):
                return {"choices": [{"message": {"content": "fine"}}]}

        def fake_post(url, json=None, timeout=None):
            seen.update(json)
            return FakeResponse()

        monkeypatch.setattr("docrex.clients.requests.post", fake_post)
        self.make_client().complete("prompt text", temperature=0.0)
        assert seen["messages"] == [{"role": "user", "content": "prompt text"}]
        assert seen["temperature"] == 0.0
        assert seen["model"] == "test-model"


def test_load_raw_documents_from_file_and_dir(tmp_path):
    file_path = tmp_path / "docs.txt"
    file_path.write_text("doc one\n\ndoc two\n", encoding="utf-8")
    assert load_raw_documents(file_path) == ["doc one", "doc two"]
    d = tmp_path / "docs"
    d.mkdir()
    (d / "b.txt").write_text("second doc", encoding="utf-8")
    (d / "a.txt").write_text("first doc", encoding="utf-8")
    assert load_raw_documents(d) == ["first doc", "second doc"]
