"""Mention and entity aggregation."""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from docrex.data_model import Mention
from docrex.encoders import EncoderOutput
from docrex.pooling import (
    LOGSUMEXP,
    MEAN,
    MentionDropped,
    pool_entity,
    pool_mention,
)


def fake_encoding(embeddings: torch.Tensor) -> EncoderOutput:
    n = embeddings.shape[0]
    attention = torch.full((n, n), 1.0 / n)
    return EncoderOutput(embeddings, attention, list(range(n)))


class TestMentionPooling:
    def test_single_word_identity(self):
        emb = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        enc = fake_encoding(emb)
        out = pool_mention(enc, Mention(0, 1, 2), sentence_offset=0)
        assert torch.equal(out, emb[1])

    def test_opposite_vectors_cancel(self):
        v = torch.tensor([2.0, -3.0, 1.0])
        enc = fake_encoding(torch.stack([v, -v]))
        out = pool_mention(enc, Mention(0, 0, 2), sentence_offset=0)
        assert torch.allclose(out, torch.zeros(3))

    def test_equal_vectors_idempotent(self):
        v = torch.tensor([0.5, 1.5])
        enc = fake_encoding(torch.stack([v, v, v, v]))
        out = pool_mention(enc, Mention(0, 0, 4), sentence_offset=0)
        assert torch.allclose(out, v)

    def test_sentence_offset_applies(self):
        emb = torch.arange(8.0).reshape(4, 2)
        enc = fake_encoding(emb)
        out = pool_mention(enc, Mention(1, 0, 1), sentence_offset=2)
        assert torch.equal(out, emb[2])

    def test_fully_truncated_mention_signals(self):
        enc = fake_encoding(torch.zeros(2, 3))
        with pytest.raises(MentionDropped):
            pool_mention(enc, Mention(0, 5, 7), sentence_offset=0)

    def test_partial_truncation_pools_survivors(self):
        emb = torch.tensor([[1.0], [3.0]])
        enc = fake_encoding(emb)
        out = pool_mention(enc, Mention(0, 1, 4), sentence_offset=0)
        assert torch.equal(out, emb[1])


class TestEntityPooling:
    def test_single_mention_identity_both_strategies(self):
        v = torch.tensor([1.0, -2.0, 0.5])
        assert torch.equal(pool_entity([v], MEAN), v)
        assert torch.allclose(pool_entity([v], LOGSUMEXP), v)

    def test_lse_of_zeros_is_ln2(self):
        z = torch.zeros(4)
        out = pool_entity([z, z], LOGSUMEXP)
        assert torch.allclose(out, torch.full((4,), math.log(2.0)), atol=1e-7)

    def test_lse_bounds_random(self):
        # Oracle: the analytic max <= LSE <= max + ln n bound, checked
        # coordinate-wise on sampled inputs.
        rng = torch.Generator().manual_seed(7)
        for _ in range(50):
            n = int(torch.randint(1, 6, (1,), generator=rng))
            vecs = [torch.randn(8, generator=rng) * 10 for _ in range(n)]
            out = pool_entity(vecs, LOGSUMEXP)
            stacked = torch.stack(vecs)
            maxima = stacked.max(dim=0).values
            assert torch.all(out >= maxima - 1e-6)
            assert torch.all(out <= maxima + math.log(n) + 1e-6)

    def test_empty_list_error(self):
        with pytest.raises(ValueError):
            pool_entity([], MEAN)

    def test_unknown_strategy_error(self):
        with pytest.raises(ValueError, match="unknown pooling"):
            pool_entity([torch.zeros(2)], "median")


class TestPoolingProperties:
    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=20, deadline=None)
    def test_lse_permutation_invariant(self, seed):
        rng = torch.Generator().manual_seed(seed)
        vecs = [torch.randn(5, generator=rng) for _ in range(4)]
        forward = pool_entity(vecs, LOGSUMEXP)
        backward = pool_entity(list(reversed(vecs)), LOGSUMEXP)
        assert torch.allclose(forward, backward, atol=1e-6)

    @given(st.floats(min_value=-50, max_value=50))
    @settings(max_examples=20, deadline=None)
    def test_lse_translation_equivariant(self, shift):
        rng = torch.Generator().manual_seed(3)
        vecs = [torch.randn(6, generator=rng) for _ in range(3)]
        base = pool_entity(vecs, LOGSUMEXP)
        shifted = pool_entity([v + shift for v in vecs], LOGSUMEXP)
        assert torch.allclose(shifted, base + shift, atol=1e-4)

    def test_mean_permutation_invariant_and_linear(self):
        rng = torch.Generator().manual_seed(5)
        vecs = [torch.randn(4, generator=rng) for _ in range(3)]
        assert torch.allclose(
            pool_entity(vecs, MEAN), pool_entity(list(reversed(vecs)), MEAN)
        )
        scaled = pool_entity([2.0 * v for v in vecs], MEAN)
        assert torch.allclose(scaled, 2.0 * pool_entity(vecs, MEAN), atol=1e-6)

    def test_lse_finite_at_large_magnitude(self):
        big = torch.full((3,), 1e4)
        out = pool_entity([big, big, -big], LOGSUMEXP)
        assert torch.isfinite(out).all()
