"""Gated fusion and both attention directions against direct evaluation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

import gvmt.tensor as T
from gradcheck import check_grads
from gvmt.bifusion import GateParams, bifuse, gated_fuse, t2v_attention, v2t_attention

RNG = np.random.default_rng(31)


def attn_oracle(q, k, v):
    d = q.shape[1]
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        s = q[i] @ k.T / math.sqrt(d)
        e = np.exp(s - s.max())
        out[i] = (e / e.sum()) @ v
    return out


def gate_of(raw):
    return GateParams(raw_gate=T.Tensor(np.asarray(raw, dtype=np.float64), requires_grad=True))


class TestT2V:
    def test_single_video_position(self):
        video = RNG.normal(size=(1, 4))
        text = RNG.normal(size=(3, 4))
        out = t2v_attention(T.Tensor(text), T.Tensor(video)).data
        for row in out:
            assert_allclose(row, video[0], atol=1e-12)

    def test_orthogonal_text_uniform_attention(self):
        # scores all zero: output is the plain mean of video rows
        video = np.array([[1.0, 0.0, 0.0, 0.0], [3.0, 0.0, 0.0, 0.0]])
        text = np.array([[0.0, 0.0, 1.0, 0.0]])
        # rows of video differ only in dim 0; text orthogonal to both
        out = t2v_attention(T.Tensor(text), T.Tensor(video)).data
        assert_allclose(out[0], video.mean(axis=0), atol=1e-12)

    def test_random_matches_oracle(self):
        text = RNG.normal(size=(2, 6))
        video = RNG.normal(size=(2, 6))
        got = t2v_attention(T.Tensor(text), T.Tensor(video)).data
        assert_allclose(got, attn_oracle(text, video, video), atol=1e-12)


class TestV2T:
    def test_single_text_position(self):
        text = RNG.normal(size=(1, 4))
        video = RNG.normal(size=(3, 4))
        out = v2t_attention(T.Tensor(video), T.Tensor(text)).data
        for row in out:
            assert_allclose(row, text[0], atol=1e-12)

    def test_equal_inputs_symmetry(self):
        x = RNG.normal(size=(3, 4))
        a = t2v_attention(T.Tensor(x), T.Tensor(x)).data
        b = v2t_attention(T.Tensor(x), T.Tensor(x)).data
        assert_allclose(a, b, atol=0)

    def test_random_matches_oracle(self):
        text = RNG.normal(size=(3, 6))
        video = RNG.normal(size=(3, 6))
        got = v2t_attention(T.Tensor(video), T.Tensor(text)).data
        assert_allclose(got, attn_oracle(video, text, text), atol=1e-12)


class TestGatedFuse:
    def rows(self, l=3, d=4):
        return RNG.normal(size=(l, d))

    def test_gate_saturated_high(self):
        h_t2v, h_v2t, text = self.rows(), self.rows(), self.rows()
        out = gated_fuse(T.Tensor(h_t2v), T.Tensor(h_v2t), T.Tensor(text), gate_of([100.0] * 4))
        assert_allclose(out.data, h_t2v, atol=1e-12)

    def test_gate_saturated_low(self):
        h_t2v, h_v2t, text = self.rows(), self.rows(), self.rows()
        out = gated_fuse(T.Tensor(h_t2v), T.Tensor(h_v2t), T.Tensor(text), gate_of([-100.0] * 4))
        assert_allclose(out.data, h_v2t + text, atol=1e-12)

    def test_even_gate(self):
        h_t2v, h_v2t, text = self.rows(), self.rows(), self.rows()
        out = gated_fuse(T.Tensor(h_t2v), T.Tensor(h_v2t), T.Tensor(text), gate_of([0.0] * 4))
        assert_allclose(out.data, 0.5 * (h_t2v + h_v2t + text), atol=1e-12)

    def test_per_dimension_gate(self):
        # one saturated-high dim, one saturated-low dim
        h_t2v = np.array([[1.0, 10.0]])
        h_v2t = np.array([[2.0, 20.0]])
        text = np.array([[4.0, 40.0]])
        out = gated_fuse(T.Tensor(h_t2v), T.Tensor(h_v2t), T.Tensor(text), gate_of([100.0, -100.0]))
        assert_allclose(out.data, [[1.0, 60.0]], atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(
        seed=st.integers(min_value=0, max_value=9999),
        a=st.floats(min_value=-3, max_value=3, allow_nan=False),
        b=st.floats(min_value=-3, max_value=3, allow_nan=False),
    )
    def test_linearity_for_fixed_gate(self, seed, a, b):
        rng = np.random.default_rng(seed)
        raw = rng.normal(size=4)
        x1 = [rng.normal(size=(2, 4)) for _ in range(3)]
        x2 = [rng.normal(size=(2, 4)) for _ in range(3)]
        f = lambda xs: gated_fuse(T.Tensor(xs[0]), T.Tensor(xs[1]), T.Tensor(xs[2]), gate_of(raw)).data
        combo = f([a * p + b * q for p, q in zip(x1, x2)])
        assert_allclose(combo, a * f(x1) + b * f(x2), atol=1e-9)

    def test_coefficients_bounded_and_complementary(self):
        for raw in (-5.0, -0.3, 0.0, 2.0, 9.0):
            g = 1.0 / (1.0 + math.exp(-raw))
            assert 0.0 < g < 1.0
            # attention coefficients mix to exactly 1; text residual rides on (1-g)
            assert_allclose(g + (1.0 - g), 1.0, atol=0)

    def test_gradient_through_gate(self):
        probe = RNG.normal(size=(2, 3))

        def loss(raw, h_t2v, h_v2t, text):
            out = gated_fuse(h_t2v, h_v2t, text, GateParams(raw_gate=raw))
            return T.sum_all(T.mul(out, T.Tensor(probe)))

        check_grads(
            loss,
            {
                "raw": RNG.normal(size=3),
                "h_t2v": RNG.normal(size=(2, 3)),
                "h_v2t": RNG.normal(size=(2, 3)),
                "text": RNG.normal(size=(2, 3)),
            },
        )


class TestBifuse:
    def test_matches_composed_oracle(self):
        text = RNG.normal(size=(3, 4))
        video = RNG.normal(size=(3, 4))
        raw = RNG.normal(size=4)
        got = bifuse(T.Tensor(text), T.Tensor(video), gate_of(raw)).data
        g = 1.0 / (1.0 + np.exp(-raw))
        h_t2v = attn_oracle(text, video, video)
        h_v2t = attn_oracle(video, text, text)
        expect = (1 - g) * h_v2t + g * h_t2v + (1 - g) * text
        assert_allclose(got, expect, atol=1e-12)

    def test_full_gradcheck(self):
        probe = RNG.normal(size=(2, 4))

        def loss(text, video, raw):
            out = bifuse(text, video, GateParams(raw_gate=raw))
            return T.sum_all(T.mul(out, T.Tensor(probe)))

        check_grads(
            loss,
            {
                "text": RNG.normal(size=(2, 4)),
                "video": RNG.normal(size=(2, 4)),
                "raw": RNG.normal(size=4),
            },
        )
