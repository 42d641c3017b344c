import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from relevance_rag.model import (
    ModelConfig,
    SequenceLengthError,
    assessment_prefix,
    build_model,
    guided_layout,
    truncate_document,
)

from conftest import TINY, scripted_chain, uniform_head

Q = [10, 11]
D = [20, 21, 22, 23]


class TestConfig:
    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            ModelConfig(d_model=30, n_heads=4)

    def test_special_ids_distinct_and_in_vocab(self):
        with pytest.raises(ValueError):
            ModelConfig(eos_id=1)
        with pytest.raises(ValueError):
            ModelConfig(vocab_size=6)

    def test_round_trip(self):
        assert ModelConfig.from_dict(TINY.to_dict()) == TINY

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig.from_dict({**TINY.to_dict(), "dropout": 0.1})


class TestLayout:
    def test_prefix_and_guided(self):
        c = TINY
        assert assessment_prefix(c, Q, D) == [c.bos_id, c.sep_doc_id, *D, c.sep_query_id, *Q, c.assess_id]
        assert guided_layout(c, Q, D) == assessment_prefix(c, Q, D) + [c.guide_id]
        assert guided_layout(c, Q, D, [30])[-2:] == [30, c.eos_id]

    def test_truncation_keeps_left_part(self):
        d = list(range(7, 100))
        kept = truncate_document(TINY, Q, d, reserve=8)
        assert kept == d[: len(kept)]
        assert len(guided_layout(TINY, Q, kept)) + 8 == TINY.max_seq_len

    def test_truncation_impossible(self):
        with pytest.raises(SequenceLengthError):
            truncate_document(TINY, list(range(7, 70)), D, reserve=1)


class TestForward:
    def test_single_bos_shape(self, tiny_model):
        hidden, logits, _ = tiny_model([TINY.bos_id])
        assert hidden.shape == (1, TINY.d_model)
        assert logits.shape == (1, TINY.vocab_size)

    def test_causal_prefix(self, tiny_model):
        a = [1, 3, 9, 10, 11, 4, 12]
        b = a[:4] + [40, 41, 42, 43]
        ha, _, _ = tiny_model(a)
        hb, _, _ = tiny_model(b)
        torch.testing.assert_close(ha[:4], hb[:4], atol=1e-6, rtol=0)

    def test_bitwise_deterministic(self):
        m1, m2 = build_model(TINY, seed=5), build_model(TINY, seed=5)
        x = [1, 3, 20, 21, 4, 10, 5]
        assert torch.equal(m1(x)[0], m1(x)[0])
        assert torch.equal(m1(x)[1], m2(x)[1])

    def test_seed_leaves_global_rng(self):
        torch.manual_seed(0)
        expected = torch.rand(3)
        torch.manual_seed(0)
        build_model(TINY, seed=11)
        assert torch.equal(torch.rand(3), expected)

    def test_too_long(self, tiny_model):
        with pytest.raises(SequenceLengthError):
            tiny_model([7] * (TINY.max_seq_len + 1))

    def test_injection_replaces_embedding(self, tiny_model):
        x = [1, 3, 20, 4, 10, 5, 6]
        vec = torch.randn(TINY.d_model)
        h_inj, _, _ = tiny_model(x, {6: vec})
        h_plain, _, _ = tiny_model(x)
        torch.testing.assert_close(h_inj[:6], h_plain[:6])
        assert not torch.allclose(h_inj[6], h_plain[6])
        # the token id at the injected slot is irrelevant
        h_other, _, _ = tiny_model(x[:6] + [30], {6: vec})
        torch.testing.assert_close(h_inj, h_other)

    def test_injection_out_of_range(self, tiny_model):
        with pytest.raises(IndexError):
            tiny_model([1, 3, 4], {3: torch.zeros(TINY.d_model)})

    def test_batched_injection_matches_single(self, tiny_model):
        x = torch.tensor([[1, 3, 20, 21, 4, 10, 5, 6], [1, 3, 22, 23, 4, 11, 5, 6]])
        vecs = torch.randn(2, TINY.d_model)
        hb, _, _ = tiny_model(x, (torch.tensor([7, 7]), vecs))
        for row in range(2):
            hs, _, _ = tiny_model(x[row].tolist(), {7: vecs[row]})
            torch.testing.assert_close(hb[row], hs, atol=1e-5, rtol=1e-5)

    def test_cache_continuation_matches_full_pass(self, tiny_model):
        x = [1, 3, 20, 21, 4, 10, 5, 6, 30, 31]
        _, full, _ = tiny_model(x)
        _, _, cache = tiny_model(x[:6])
        _, part, cache = tiny_model(x[6:8], cache=cache)
        _, last, _ = tiny_model(x[8:], cache=cache)
        torch.testing.assert_close(torch.cat([part, last]), full[6:], atol=1e-5, rtol=1e-5)


class TestRelevanceEmbedding:
    def test_equals_last_prefix_hidden(self, tiny_model):
        v = tiny_model.encode_relevance(Q, D)
        hidden, _, _ = tiny_model(assessment_prefix(TINY, Q, D))
        assert torch.equal(v, hidden[-1])
        assert v.shape == (TINY.d_model,)

    def test_document_sensitive(self, tiny_model):
        assert not torch.equal(tiny_model.encode_relevance(Q, D), tiny_model.encode_relevance(Q, [30, 31, 32, 33]))

    def test_order_sensitive(self, tiny_model):
        assert not torch.equal(tiny_model.encode_relevance(Q, D), tiny_model.encode_relevance(Q, D[::-1]))


class TestGuidance:
    def test_endpoints_exact(self, tiny_model):
        e0, e1 = tiny_model.guidance_table
        assert torch.equal(tiny_model.guidance_embed(0.0), e0)
        assert torch.equal(tiny_model.guidance_embed(1.0), e1)

    def test_midpoint(self, tiny_model):
        e0, e1 = tiny_model.guidance_table
        torch.testing.assert_close(tiny_model.guidance_embed(0.5), (e0 + e1) / 2)

    @pytest.mark.parametrize("bad", [-0.01, 1.01, float("nan")])
    def test_out_of_range(self, tiny_model, bad):
        with pytest.raises(ValueError):
            tiny_model.guidance_embed(bad)

    def test_differentiable_in_s_and_table(self, tiny_model):
        s = torch.tensor(0.3, requires_grad=True)
        tiny_model.guidance_embed(s).sum().backward()
        assert s.grad is not None
        assert tiny_model.guidance_table.grad is not None

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.0, 1.0))
    def test_interpolation(self, s):
        model = build_model(TINY, seed=0)
        e0, e1 = model.guidance_table.detach()
        torch.testing.assert_close(model.guidance_embed(s).detach(), (1 - s) * e0 + s * e1)


class TestGenerate:
    def test_eos_favoring_head_gives_empty_answer(self, tiny_model):
        with torch.no_grad():
            tiny_model.lm_head.weight.zero_()
            tiny_model.lm_head.bias.zero_()
            tiny_model.lm_head.bias[TINY.eos_id] = 10.0
        assert tiny_model.generate(Q, D, 0.5, max_new_tokens=5) == []

    def test_deterministic(self, tiny_model):
        a = tiny_model.generate(Q, D, 0.7, max_new_tokens=6)
        assert a == tiny_model.generate(Q, D, 0.7, max_new_tokens=6)

    def test_incremental_matches_recompute(self, tiny_model):
        for s in (0.0, 0.4, 1.0):
            a = tiny_model.generate(Q, D, s, max_new_tokens=6)
            assert a == tiny_model.generate(Q, D, s, max_new_tokens=6, incremental=False)

    def test_never_emits_layout_tokens(self, tiny_model):
        with torch.no_grad():
            tiny_model.lm_head.weight.zero_()
            tiny_model.lm_head.bias.zero_()
            tiny_model.lm_head.bias[TINY.sep_doc_id] = 10.0
            tiny_model.lm_head.bias[30] = 5.0
        assert tiny_model.generate(Q, D, 0.5, max_new_tokens=4) == [30] * 4

    def test_scripted_answer(self):
        model = scripted_chain(TINY, [30, 31, 32])
        assert model.generate(Q, D, 1.0, max_new_tokens=8) == [30, 31, 32]
        assert model.generate(Q, D, 1.0, max_new_tokens=2) == [30, 31]

    def test_headroom(self, tiny_model):
        with pytest.raises(SequenceLengthError):
            tiny_model.generate(Q, list(range(7, 60)), 0.5, max_new_tokens=8)
        with pytest.raises(ValueError):
            tiny_model.generate(Q, D, 0.5, max_new_tokens=0)


class TestSequenceLogProb:
    def test_uniform_head(self, tiny_model):
        uniform_head(tiny_model)
        a = [30, 31, 32]
        total, length = tiny_model.sequence_log_prob(a, Q, D, 0.5)
        assert length == len(a) + 1  # EOS is scored too
        assert total == pytest.approx(-length * math.log(TINY.vocab_size), rel=1e-6)

    def test_certain_model(self):
        model = scripted_chain(TINY, [30, 31])
        total, _ = model.sequence_log_prob([30, 31], Q, D, 0.0)
        assert total == pytest.approx(0.0, abs=1e-6)

    def test_empty_answer_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.sequence_log_prob([], Q, D, 0.5)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(7, TINY.vocab_size - 1), min_size=1, max_size=5), st.floats(0, 1))
    def test_non_positive(self, a, s):
        model = build_model(TINY, seed=1)
        total, _ = model.sequence_log_prob(a, Q, D, s)
        assert total <= 0.0
