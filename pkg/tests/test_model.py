"""Transformer and full-pipeline tests.

The micro pipeline gradcheck at the bottom is the expensive one; it drives
finite differences through every parameter of an end-to-end configuration.
"""

import numpy as np
import pytest

from gvmt import tensor as T
from gvmt.bifusion import bifuse
from gvmt.dataio import BOS_ID, EOS_ID, PAD_ID
from gvmt.errors import ConfigError, DataError
from gvmt.model import (
    ModelConfig,
    PipelineMode,
    TrainSample,
    Translator,
    sinusoidal_positions,
)
from gvmt.regionattn import region_attend, stack_selected
from gvmt.retrieval import GlobalContextSet
from gvmt.selector import (
    SelectorConfig,
    apply_soft_weighting,
    fuse_unselected,
    score_segments,
    select_top_k,
)

from gradcheck import check_grads_live

FULL = PipelineMode()
TEXT_ONLY = PipelineMode(text_only=True)


def micro_model(seed=0, soft=True, dropout=0.0, heads=1, layers=1):
    cfg = ModelConfig(
        layers=layers,
        d_h=8,
        ffn=12,
        heads=heads,
        dropout=dropout,
        max_src_len=16,
        max_tgt_len=16,
        src_vocab=9,
        tgt_vocab=9,
    )
    sel = SelectorConfig(k=2, lam=0.1, soft_weighting=soft)
    return Translator(cfg, sel, ev=8, rattn_heads=1, rng=np.random.default_rng(seed))


def make_context(rng, p=3, r=2, ev=8, query=0):
    feats = [rng.normal(size=(r, ev)) for _ in range(p)]
    return GlobalContextSet(query_idx=query, indices=list(range(p)), features=feats)


def make_sample(rng, src=(4, 5, 6, 7), tgt=(4, 5, 6), p=3, r=2, ev=8):
    return TrainSample(
        video_id="v",
        seg_idx=0,
        src_ids=list(src),
        tgt_ids=list(tgt),
        context=make_context(rng, p=p, r=r, ev=ev),
    )


def softmax_np(row):
    e = np.exp(row - row.max())
    return e / e.sum()


class TestPositions:
    def test_oracle_values(self):
        pe = sinusoidal_positions(4, 6)
        for pos in range(4):
            for i in range(6):
                angle = pos / 10000.0 ** ((2 * (i // 2)) / 6.0)
                want = np.sin(angle) if i % 2 == 0 else np.cos(angle)
                assert pe[pos, i] == pytest.approx(want, abs=1e-12)

    def test_first_row_alternates_zero_one(self):
        pe = sinusoidal_positions(3, 8)
        assert np.allclose(pe[0], [0, 1] * 4)

    def test_bounded(self):
        pe = sinusoidal_positions(50, 16)
        assert np.all(np.abs(pe) <= 1.0 + 1e-12)


class TestEncoder:
    def test_single_token_shape(self):
        m = micro_model()
        out = m.encode_source([4])
        assert out.shape == (1, 8)

    def test_length_errors(self):
        m = micro_model()
        with pytest.raises(DataError):
            m.encode_source([])
        with pytest.raises(DataError):
            m.encode_source([4] * 17)

    def test_pad_invariance(self):
        # trailing pads are masked out of attention, so the states at real
        # positions must not move at all
        m = micro_model(seed=3)
        plain = m.encode_source([4, 5, 6])
        padded = m.encode_source([4, 5, 6], pad_to=7)
        assert padded.shape == (7, 8)
        assert np.allclose(plain.data, padded.data[:3], atol=1e-12, rtol=0)

    def test_pad_to_beyond_cap_rejected(self):
        m = micro_model()
        with pytest.raises(DataError):
            m.encode_source([4], pad_to=17)


class TestDecoder:
    def test_causality_under_teacher_forcing(self):
        m = micro_model(seed=5)
        memory = T.constant(np.random.default_rng(1).normal(size=(4, 8)))
        a = m.decode_logits([BOS_ID, 4, 5, 6, 7], memory)
        b = m.decode_logits([BOS_ID, 4, 5, 8, 7], memory)
        # inputs agree at positions 0..2, so distributions there must match
        for j in range(3):
            assert np.allclose(
                softmax_np(a.data[j]), softmax_np(b.data[j]), atol=1e-12, rtol=0
            )
        assert not np.allclose(softmax_np(a.data[3]), softmax_np(b.data[3]))

    def test_decode_step_uniform_when_projection_zero(self):
        m = micro_model()
        m.params["out.w"].data[...] = 0.0
        m.params["out.b"].data[...] = 0.0
        memory = T.constant(np.zeros((2, 8)))
        probs, h = m.decode_step([BOS_ID], memory)
        assert probs.shape == (9,)
        assert np.allclose(probs, 1.0 / 9.0, atol=1e-12)
        assert h.shape == (8,)

    def test_decode_step_distribution_sums_to_one(self):
        m = micro_model(seed=9)
        memory = T.constant(np.random.default_rng(2).normal(size=(3, 8)))
        probs, _ = m.decode_step([BOS_ID, 4, 5], memory)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(probs > 0)

    def test_decode_step_requires_bos(self):
        m = micro_model()
        memory = T.constant(np.zeros((1, 8)))
        with pytest.raises(DataError):
            m.decode_step([4, 5], memory)
        with pytest.raises(DataError):
            m.decode_step([], memory)


class TestGreedy:
    def rigged(self, winner):
        m = micro_model()
        m.params["out.w"].data[...] = 0.0
        m.params["out.b"].data[...] = 0.0
        m.params["out.b"].data[winner] = 5.0
        return m

    def test_eos_first_gives_length_one(self):
        m = self.rigged(EOS_ID)
        out = m.greedy_decode(T.constant(np.zeros((2, 8))), max_len=10)
        assert out == [EOS_ID]

    def test_never_eos_truncates_at_max_len(self):
        m = self.rigged(4)
        out = m.greedy_decode(T.constant(np.zeros((2, 8))), max_len=6)
        assert out == [4] * 6

    def test_tie_breaks_to_lowest_id(self):
        m = self.rigged(4)
        m.params["out.b"].data[...] = 0.0  # all logits equal now
        out = m.greedy_decode(T.constant(np.zeros((2, 8))), max_len=3)
        assert out == [PAD_ID] * 3

    def test_bad_max_len(self):
        m = micro_model()
        with pytest.raises(ConfigError):
            m.greedy_decode(T.constant(np.zeros((1, 8))), max_len=0)


class TestMemory:
    def test_text_only_returns_encoding_itself(self):
        m = micro_model()
        t_enc = m.encode_source([4, 5])
        out = m.build_memory(t_enc, None, TEXT_ONLY)
        assert out is t_enc

    def test_missing_context_rejected_outside_text_only(self):
        m = micro_model()
        t_enc = m.encode_source([4, 5])
        with pytest.raises(DataError):
            m.build_memory(t_enc, None, FULL)

    def test_soft_path_matches_numpy_reference(self):
        # the on-tape weighting must agree with the detached reference chain
        rng = np.random.default_rng(7)
        m = micro_model(seed=11)
        ctx = make_context(rng, p=5, r=2, ev=8)
        t_enc = m.encode_source([4, 5, 6])
        got = m.build_memory(t_enc, ctx, FULL)

        alpha = score_segments(t_enc, ctx, m.selector).data.ravel()
        sel = select_top_k(alpha, ctx, m.sel_cfg.k)
        selected = fuse_unselected(ctx, sel, m.sel_cfg)
        weighted = apply_soft_weighting(selected, alpha)
        o = region_attend(t_enc, stack_selected(weighted), 2, m.rattn)
        want = bifuse(t_enc, o, m.gate)
        assert np.allclose(got.data, want.data, atol=1e-12, rtol=0)

    def test_no_tvss_feeds_every_candidate(self):
        rng = np.random.default_rng(8)
        m = micro_model(seed=12)
        ctx = make_context(rng, p=4, r=2, ev=8)
        t_enc = m.encode_source([4, 5])
        got = m.build_memory(t_enc, ctx, PipelineMode(use_tvss=False))

        flat = np.stack([f.ravel() for f in ctx.features])
        o = region_attend(t_enc, T.constant(flat), 2, m.rattn)
        want = bifuse(t_enc, o, m.gate)
        assert np.allclose(got.data, want.data, atol=1e-12, rtol=0)

    def test_k_clamps_to_candidate_count(self):
        rng = np.random.default_rng(9)
        m = micro_model()  # k=2
        ctx = make_context(rng, p=1, r=2, ev=8)
        t_enc = m.encode_source([4])
        out = m.build_memory(t_enc, ctx, FULL)
        assert out.shape == (1, 8)


class TestLoss:
    def test_matches_manual_cross_entropy(self):
        rng = np.random.default_rng(13)
        m = micro_model(seed=14)
        s = make_sample(rng)
        loss, n = m.sample_loss(s, FULL, label_smoothing=0.0)
        assert n == 4

        t_enc = m.encode_source(s.src_ids)
        memory = m.build_memory(t_enc, s.context, FULL)
        logits = m.decode_logits([BOS_ID] + s.tgt_ids, memory)
        targets = s.tgt_ids + [EOS_ID]
        manual = -np.mean(
            [np.log(softmax_np(logits.data[j])[t]) for j, t in enumerate(targets)]
        )
        assert loss.item() == pytest.approx(manual, abs=1e-12)

    def test_duplicating_a_sample_keeps_the_mean(self):
        rng = np.random.default_rng(15)
        m = micro_model(seed=16)
        s = make_sample(rng)
        one = m.forward_loss([s], FULL, 0.1).item()
        two = m.forward_loss([s, s], FULL, 0.1).item()
        assert two == pytest.approx(one, abs=1e-12)

    def test_batch_mean_is_token_weighted(self):
        rng = np.random.default_rng(17)
        m = micro_model(seed=18)
        s1 = make_sample(rng, tgt=(4, 5))
        s2 = make_sample(rng, tgt=(4, 5, 6, 7, 8))
        l1, n1 = m.sample_loss(s1, FULL, 0.1)
        l2, n2 = m.sample_loss(s2, FULL, 0.1)
        want = (l1.item() * n1 + l2.item() * n2) / (n1 + n2)
        got = m.forward_loss([s1, s2], FULL, 0.1).item()
        assert got == pytest.approx(want, abs=1e-12)

    def test_target_over_cap_rejected(self):
        rng = np.random.default_rng(19)
        m = micro_model()
        s = make_sample(rng, tgt=tuple([4] * 17))
        with pytest.raises(DataError):
            m.sample_loss(s, FULL, 0.1)

    def test_empty_batch_rejected(self):
        m = micro_model()
        with pytest.raises(DataError):
            m.forward_loss([], FULL, 0.1)


class TestGradientRouting:
    def run_backward(self, soft):
        rng = np.random.default_rng(21)
        m = micro_model(seed=22, soft=soft)
        s = make_sample(rng)
        loss, _ = m.sample_loss(s, FULL, 0.1)
        T.backward(loss)
        return m

    def test_soft_weighting_trains_the_scorer(self):
        m = self.run_backward(soft=True)
        assert m.selector.w.grad is not None
        assert np.any(m.selector.w.grad != 0)
        for name, t in m.params.items():
            assert t.grad is not None, name

    def test_hard_selection_leaves_scorer_untouched(self):
        m = self.run_backward(soft=False)
        assert m.selector.w.grad is None
        assert m.selector.b.grad is None
        assert m.params["out.w"].grad is not None

    def test_dropout_is_seed_deterministic(self):
        rng = np.random.default_rng(23)
        m = micro_model(seed=24, dropout=0.3)
        s = make_sample(rng)
        a = m.sample_loss(s, FULL, 0.1, train=True, rng=np.random.default_rng(5))[0]
        b = m.sample_loss(s, FULL, 0.1, train=True, rng=np.random.default_rng(5))[0]
        c = m.sample_loss(s, FULL, 0.1, train=True, rng=np.random.default_rng(6))[0]
        assert a.item() == b.item()
        assert a.item() != c.item()


class TestState:
    def test_round_trip(self):
        m = micro_model(seed=30)
        saved = {k: v.copy() for k, v in m.state_arrays().items()}
        for t in m.params.values():
            t.data += 1.0
        m.load_state(saved)
        for name, arr in saved.items():
            assert np.array_equal(m.params[name].data, arr)

    def test_shape_mismatch_rejected(self):
        m = micro_model()
        bad = {k: v.copy() for k, v in m.state_arrays().items()}
        bad["out.b"] = np.zeros(4)
        with pytest.raises(DataError):
            m.load_state(bad)

    def test_missing_name_rejected(self):
        m = micro_model()
        partial = {k: v.copy() for k, v in m.state_arrays().items()}
        del partial["out.w"]
        with pytest.raises(DataError):
            m.load_state(partial)

    def test_config_dict_round_trip(self):
        m = micro_model(soft=False)
        clone = Translator.from_config_dict(m.config_dict())
        assert clone.cfg == m.cfg
        assert clone.sel_cfg == m.sel_cfg
        assert set(clone.params) == set(m.params)
        for name in m.params:
            assert clone.params[name].shape == m.params[name].shape


class TestPipelineGradcheck:
    def test_every_parameter_micro_config(self):
        # end-to-end finite differences: encoder, selector soft weights,
        # region attention, gated fusion, decoder, loss
        rng = np.random.default_rng(41)
        m = micro_model(seed=40, soft=True)
        s = make_sample(rng, src=(4, 5, 6), tgt=(4, 5))

        def make_loss():
            return m.sample_loss(s, FULL, label_smoothing=0.1)[0]

        worst_err, worst_name = check_grads_live(make_loss, m.params, h=1e-5, tol=1e-3)
        assert worst_name is not None and worst_err < 1e-3
