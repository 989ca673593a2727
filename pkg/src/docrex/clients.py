"""Completion-endpoint clients for annotation and zero-shot inference.

The harnesses are model-agnostic: anything exposing ``complete(prompt,
temperature)`` works. The HTTP client speaks the common chat-completion
wire format; the mock client wraps a deterministic callable for tests and
offline runs.
"""

from __future__ import annotations

import hashlib
import logging
import time

import requests

logger = logging.getLogger(__name__)


class ClientError(RuntimeError):
    """The endpoint stayed unreachable after retries."""


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class HttpAnnotatorClient:
    """Chat-completion HTTP client with retry and backoff.

    Requests carry ``{model, messages, temperature}``; the first choice's
    message content is returned. Failed requests are retried up to
    ``max_retries`` times with exponential backoff, then raise.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        timeout: float = 60.0,
        temperature: float = 0.0,
        max_retries: int = 3,
        backoff_base: float = 0.5,
    ):
        self.endpoint = endpoint
        self.model = model
        self.timeout = timeout
        self.temperature = temperature
        self.max_retries = max_retries
        self.backoff_base = backoff_base

    def complete(self, prompt: str, temperature: float | None = None) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature if temperature is None else temperature,
        }
        last_error = None
        for attempt in range(self.max_retries):
            try:
                response = requests.post(self.endpoint, json=payload, timeout=self.timeout)
                response.raise_for_status()
                body = response.json()
                text = body["choices"][0]["message"]["content"]
                logger.info(
                    "completion for prompt %s: %d chars", prompt_hash(prompt)[:12], len(text)
                )
                return text
            except (requests.RequestException, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                wait = self.backoff_base * (2**attempt)
                logger.warning(
                    "request %s failed (attempt %d/%d): %s",
                    prompt_hash(prompt)[:12],
                    attempt + 1,
                    self.max_retries,
                    exc,
                )
                if attempt + 1 < self.max_retries and wait > 0:
                    time.sleep(wait)
        raise ClientError(f"endpoint {self.endpoint} failed after {self.max_retries} attempts: {last_error}")


class MockAnnotatorClient:
    """Deterministic stand-in implementing the same interface.

    Wraps a ``prompt -> completion`` callable; every call is logged with the
    prompt hash, mirroring the HTTP client.
    """

    def __init__(self, respond):
        self._respond = respond
        self.calls = 0

    def complete(self, prompt: str, temperature: float | None = None) -> str:
        self.calls += 1
        text = self._respond(prompt)
        logger.info(
            "mock completion for prompt %s: %d chars", prompt_hash(prompt)[:12], len(text)
        )
        return text


def extract_document_from_prompt(prompt: str) -> str:
    """Recover the document portion of a rendered prompt (the text after the
    last 'Document:' marker). Used by built-in mocks."""
    marker = "Document:"
    index = prompt.rfind(marker)
    if index < 0:
        return prompt
    return prompt[index + len(marker) :].strip()


def simple_mock_annotator() -> MockAnnotatorClient:
    """Built-in generation mock: links the first and last word of the
    document with a fixed relation, using character offsets."""
    import json

    def respond(prompt: str) -> str:
        text = extract_document_from_prompt(prompt)
        words = text.split()
        if len(words) < 2:
            return json.dumps({"entities": [], "relations": []})
        first = words[0]
        last = words[-1]
        first_start = text.find(first)
        last_start = text.rfind(last)
        annotation = {
            "entities": [
                {"id": 0, "mentions": [{"start": first_start, "end": first_start + len(first)}]},
                {"id": 1, "mentions": [{"start": last_start, "end": last_start + len(last)}]},
            ],
            "relations": [{"head": 0, "tail": 1, "label": "RELATED_TO"}],
        }
        return json.dumps(annotation)

    return MockAnnotatorClient(respond)


def empty_mock_annotator() -> MockAnnotatorClient:
    return MockAnnotatorClient(lambda prompt: "")


def client_from_endpoint(endpoint: str, model: str, **kwargs):
    """Endpoint factory: http(s):// URLs get the real client; ``mock://simple``
    and ``mock://empty`` map to the built-in deterministic mocks."""
    if endpoint.startswith("mock://"):
        kind = endpoint[len("mock://") :]
        if kind == "simple":
            return simple_mock_annotator()
        if kind == "empty":
            return empty_mock_annotator()
        raise ValueError(f"unknown mock client {endpoint!r}")
    return HttpAnnotatorClient(endpoint, model, **kwargs)
