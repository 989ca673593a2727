"""Tiny encoder backend: tokenization, attention, caching, projection."""

import logging

import pytest
import torch

from docrex.data_model import Document, Entity, Mention, RelationLabelSet
from docrex.encoders import (
    EncoderConfig,
    LabelEmbeddingCache,
    LabelProjection,
    TinyDocumentEncoder,
    TinyEncoder,
    TinyLabelEncoder,
    TinyTokenizer,
    mean_pool,
)

from conftest import check_gradients, make_toy_document


def word_doc(words: list[str], doc_id: str = "d") -> Document:
    entities = (Entity(0, (Mention(0, 0, 1, words[0]),)),)
    return Document(doc_id, doc_id, (tuple(words),), entities)


def build_doc_encoder(words, cfg: EncoderConfig, seed: int = 0) -> TinyDocumentEncoder:
    torch.manual_seed(seed)
    return TinyDocumentEncoder(TinyTokenizer.build([words]), cfg)


SMALL = EncoderConfig(max_length=16, hidden_size=8, num_heads=2, ffn_size=16)


class TestTokenizer:
    def test_vocab_is_sorted_and_reserved(self):
        tok = TinyTokenizer.build([["Banana", "apple"], ["cherry"]])
        assert tok.vocab["<pad>"] == 0 and tok.vocab["<unk>"] == 1
        assert tok.encode_words(["APPLE", "banana", "cherry"]) == [2, 3, 4]

    def test_unknown_word_maps_to_unk(self):
        tok = TinyTokenizer.build([["a"]])
        assert tok.encode_words(["zzz"]) == [1]

    def test_json_round_trip(self):
        tok = TinyTokenizer.build([["x", "y"]])
        again = TinyTokenizer.from_json(tok.to_json())
        assert again.vocab == tok.vocab


class TestDocumentEncoding:
    def test_one_word_document(self):
        enc = build_doc_encoder(["hello"], SMALL).encode_document(word_doc(["hello"]))
        assert enc.num_tokens >= 1
        assert torch.allclose(enc.attention.sum(dim=-1), torch.ones(enc.num_tokens), atol=1e-5)

    def test_attention_rows_stochastic(self):
        words = ["the", "cat", "sat", "on", "the", "mat"]
        enc = build_doc_encoder(words, SMALL).encode_document(word_doc(words))
        sums = enc.attention.sum(dim=-1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
        assert torch.all(enc.attention >= 0)

    def test_word_map_matches_surviving_words(self):
        words = [f"w{i}" for i in range(30)]
        encoder = build_doc_encoder(words, SMALL)  # max_length 16
        enc = encoder.encode_document(word_doc(words))
        assert enc.num_words == 16
        assert enc.word_map == list(range(16))
        # Strictly increasing map.
        assert all(a < b for a, b in zip(enc.word_map, enc.word_map[1:]))

    def test_determinism_same_seed(self):
        words = ["alpha", "beta", "gamma"]
        doc = word_doc(words)
        enc_a = build_doc_encoder(words, SMALL, seed=9).encode_document(doc)
        enc_b = build_doc_encoder(words, SMALL, seed=9).encode_document(doc)
        assert torch.equal(enc_a.token_embeddings, enc_b.token_embeddings)
        assert torch.equal(enc_a.attention, enc_b.attention)

    def test_same_doc_twice_identical(self):
        words = ["a", "b", "c"]
        encoder = build_doc_encoder(words, SMALL)
        doc = word_doc(words)
        enc_a = encoder.encode_document(doc)
        enc_b = encoder.encode_document(doc)
        assert torch.equal(enc_a.token_embeddings, enc_b.token_embeddings)

    def test_empty_document_rejected(self):
        encoder = build_doc_encoder(["x"], SMALL)
        empty = Document("e", "e", ((),), (), ())
        with pytest.raises(ValueError, match="empty"):
            encoder.encode_document(empty)

    def test_truncation_warning_lists_dropped_entities(self, caplog):
        doc = make_toy_document("d", "alice", "acme", "paris")
        cfg = EncoderConfig(max_length=5, hidden_size=8, num_heads=2, ffn_size=16)
        encoder = build_doc_encoder(list(doc.words), cfg)
        with caplog.at_level(logging.WARNING):
            enc = encoder.encode_document(doc)
        assert enc.num_words == 5
        assert any("dropped entities [2]" in message for message in caplog.messages)


class TestLabelEncoding:
    def make(self, names, seed=0) -> TinyLabelEncoder:
        torch.manual_seed(seed)
        return TinyLabelEncoder(TinyTokenizer.build([n.split() for n in names]), SMALL)

    def test_single_token_label_is_token_embedding(self):
        encoder = self.make(["country"])
        labels = RelationLabelSet([("P17", "country")])
        matrix = encoder.encode_labels(labels)
        ids = torch.tensor(encoder.tokenizer.encode_words(["country"]))
        token_embeddings, _ = encoder.encoder(ids)
        assert torch.equal(matrix[0], token_embeddings[0])

    def test_mean_pool_of_identical_rows(self):
        row = torch.tensor([1.0, 2.0, 3.0])
        assert torch.allclose(mean_pool(torch.stack([row] * 5)), row)

    def test_one_row_per_label(self):
        encoder = self.make(["works for", "located in", "part of"])
        labels = RelationLabelSet([("R1", "works for"), ("R2", "located in"), ("R3", "part of")])
        assert encoder.encode_labels(labels).shape == (3, SMALL.hidden_size)

    def test_empty_label_name_rejected(self):
        encoder = self.make(["ok"])
        with pytest.raises(ValueError, match="empty name"):
            encoder.encode_labels(RelationLabelSet([("R1", "  ")]))


class TestLabelCache:
    def test_hit_is_bit_identical(self):
        names = ["works for", "located in"]
        torch.manual_seed(1)
        encoder = TinyLabelEncoder(TinyTokenizer.build([n.split() for n in names]), SMALL)
        labels = RelationLabelSet([("R1", names[0]), ("R2", names[1])])
        cache = LabelEmbeddingCache()
        first = cache.get(labels, encoder)
        second = cache.get(labels, encoder)
        fresh = encoder.encode_labels(labels).detach()
        assert cache.misses == 1 and cache.hits == 1
        assert torch.equal(first, second)
        assert torch.equal(first, fresh)

    def test_invalidates_on_weight_change(self):
        names = ["works for"]
        torch.manual_seed(2)
        encoder = TinyLabelEncoder(TinyTokenizer.build([n.split() for n in names]), SMALL)
        labels = RelationLabelSet([("R1", names[0])])
        cache = LabelEmbeddingCache()
        before = cache.get(labels, encoder)
        with torch.no_grad():
            encoder.encoder.token_emb.weight += 0.5
        after = cache.get(labels, encoder)
        assert cache.misses == 2
        assert not torch.equal(before, after)

    def test_invalidates_on_label_set_change(self):
        torch.manual_seed(3)
        encoder = TinyLabelEncoder(TinyTokenizer.build([["works", "for"]]), SMALL)
        cache = LabelEmbeddingCache()
        cache.get(RelationLabelSet([("R1", "works for")]), encoder)
        cache.get(RelationLabelSet([("R1", "works")]), encoder)
        assert cache.misses == 2


class TestLabelProjection:
    def test_identity_when_dimensions_agree(self):
        torch.manual_seed(0)
        projection = LabelProjection(8, 8)
        x = torch.randn(3, 8)
        assert projection(x) is x

    def test_projects_when_dimensions_differ(self):
        torch.manual_seed(0)
        projection = LabelProjection(8, 5)
        assert projection(torch.randn(4, 8)).shape == (4, 5)

    def test_gradient_vs_finite_differences(self):
        torch.manual_seed(1)
        projection = LabelProjection(6, 3).to(torch.float64)
        x = torch.randn(2, 6, dtype=torch.float64)
        probe = torch.randn(2, 3, dtype=torch.float64)

        def forward() -> float:
            return float((projection(x) * probe).sum())

        (projection(x) * probe).sum().backward()
        check_gradients(
            forward, list(projection.named_parameters()), max_coords_per_tensor=5, rtol=1e-4
        )


class TestTinyGradientIntegrity:
    def test_full_backward_vs_finite_differences_four_tokens(self):
        # Scalar readout over embeddings and attention; checks every
        # parameter tensor of the two-layer encoder in float64.
        torch.manual_seed(4)
        cfg = EncoderConfig(max_length=8, hidden_size=8, num_heads=2, ffn_size=12)
        encoder = TinyEncoder(vocab_size=7, cfg=cfg).to(torch.float64)
        token_ids = torch.tensor([2, 5, 3, 6])
        g = torch.Generator().manual_seed(0)
        probe_emb = torch.randn(4, 8, generator=g, dtype=torch.float64)
        probe_attn = torch.randn(4, 4, generator=g, dtype=torch.float64)

        def forward() -> float:
            embeddings, attention = encoder(token_ids)
            return float((embeddings * probe_emb).sum() + (attention * probe_attn).sum())

        embeddings, attention = encoder(token_ids)
        loss = (embeddings * probe_emb).sum() + (attention * probe_attn).sum()
        loss.backward()
        worst = check_gradients(
            forward,
            list(encoder.named_parameters()),
            max_coords_per_tensor=3,
            rtol=1e-3,
        )
        assert worst < 1e-3
