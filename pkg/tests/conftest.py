"""Shared fixtures: toy corpora and test-side numerical oracles.

The finite-difference helper here is the independent gradient oracle; it
recomputes the forward pass around perturbed parameters and never touches
autograd.
"""

import numpy as np
import pytest
import torch

from docrex.data_model import Document, Entity, GoldFact, Mention, RelationLabelSet
from docrex.dataset_io import CorpusFile

PERSONS = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"]
ORGS = ["acme", "globex", "initech", "umbrella", "hooli", "stark"]
CITIES = ["paris", "london", "tokyo", "berlin", "oslo", "madrid"]

WORKS_FOR = "R1"
LOCATED_IN = "R2"


def toy_label_set() -> RelationLabelSet:
    return RelationLabelSet([(WORKS_FOR, "works for"), (LOCATED_IN, "located in")])


def make_toy_document(doc_id: str, person: str, org: str, city: str, visitor: str | None = None) -> Document:
    """Two facts per document: person works for org, org located in city.

    The optional visitor sentence adds a fourth, relation-free entity.
    """
    sentences = [
        (person, "works", "for", org, "."),
        ("the", org, "office", "is", "located", "in", city, "."),
    ]
    entities = [
        Entity(0, (Mention(0, 0, 1, person),), "PER"),
        Entity(1, (Mention(0, 3, 4, org), Mention(1, 1, 2, org)), "ORG"),
        Entity(2, (Mention(1, 6, 7, city),), "LOC"),
    ]
    if visitor is not None:
        sentences.append((visitor, "visited", city, "yesterday", "."))
        entities.append(Entity(3, (Mention(2, 0, 1, visitor),), "PER"))
    gold = (GoldFact(0, 1, WORKS_FOR), GoldFact(1, 2, LOCATED_IN))
    return Document(doc_id, doc_id, tuple(sentences), tuple(entities), gold)


def build_toy_corpus(num_docs: int, seed: int, split: str = "train", prefix: str = "doc") -> CorpusFile:
    rng = np.random.default_rng(seed)
    documents = []
    for i in range(num_docs):
        person = PERSONS[rng.integers(len(PERSONS))]
        org = ORGS[rng.integers(len(ORGS))]
        city = CITIES[rng.integers(len(CITIES))]
        visitor = None
        if rng.random() < 0.5:
            visitor = PERSONS[rng.integers(len(PERSONS))]
        documents.append(make_toy_document(f"{prefix}-{i}", person, org, city, visitor))
    return CorpusFile(path=f"<toy:{seed}>", split=split, documents=documents)


@pytest.fixture
def toy_labels() -> RelationLabelSet:
    return toy_label_set()


@pytest.fixture
def toy_corpus() -> CorpusFile:
    return build_toy_corpus(20, seed=11)


@pytest.fixture
def toy_test_corpus() -> CorpusFile:
    return build_toy_corpus(8, seed=23, split="test", prefix="test")


def finite_difference_grad(recompute, tensor: torch.Tensor, index, eps: float = 1e-6) -> float:
    """Central difference of a scalar-valued closure wrt one coordinate."""
    with torch.no_grad():
        original = tensor[index].item()
        tensor[index] = original + eps
        plus = recompute()
        tensor[index] = original - eps
        minus = recompute()
        tensor[index] = original
    return (plus - minus) / (2.0 * eps)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    recompute,
    named_params,
    max_coords_per_tensor: int = 4,
    eps: float = 1e-6,
    rtol: float = 1e-4,
    seed: int = 0,
):
    """Compare autograd gradients against central differences.

    ``recompute`` re-runs the forward pass and returns the loss as float;
    parameters must already hold .grad from a backward pass. A seeded sample
    of coordinates per tensor is checked.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_name = None
    for name, param in named_params:
        if param.grad is None:
            continue
        flat = param.view(-1)
        grads = param.grad.view(-1)
        n = flat.shape[0]
        coords = rng.choice(n, size=min(max_coords_per_tensor, n), replace=False)
        for c in coords:
            numeric = finite_difference_grad(recompute, flat, int(c), eps)
            err = relative_error(float(grads[int(c)]), numeric)
            if err > worst:
                worst, worst_name = err, f"{name}[{int(c)}]"
    assert worst <= rtol, f"gradient mismatch at {worst_name}: rel err {worst:.3g} > {rtol}"
    return worst
