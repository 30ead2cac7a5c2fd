"""Bidirectional text/video attention and gated fusion.

Text queries video (t2v) and video queries text (v2t), both single-head at
scale 1/sqrt(d_h); a learnable per-dimension gate g = logistic(raw_gate)
mixes the two attention outputs with the raw text encoding:

    F = (1 - g) * H_v2t + g * H_t2v + (1 - g) * T

The three coefficients deliberately sum to 2 - g per dimension; the text
residual shares the v2t coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class GateParams:
    raw_gate: T.Tensor  # [d_h], squashed through a logistic to (0,1)

    @classmethod
    def init(cls, d_h: int) -> "GateParams":
        # zero start: g = 0.5, an even mix
        return cls(raw_gate=T.Tensor(np.zeros(d_h), requires_grad=True))

    def named(self) -> dict:
        return {"bifusion.raw_gate": self.raw_gate}


def t2v_attention(text: T.Tensor, video: T.Tensor) -> T.Tensor:
    """softmax(T V^T / sqrt(d_h)) V, one head."""
    return T.attention(text, video, video, n_heads=1)


def v2t_attention(video: T.Tensor, text: T.Tensor) -> T.Tensor:
    """softmax(V T^T / sqrt(d_h)) T, one head."""
    return T.attention(video, text, text, n_heads=1)


def gated_fuse(h_t2v: T.Tensor, h_v2t: T.Tensor, text: T.Tensor, gate: GateParams) -> T.Tensor:
    g = T.sigmoid(gate.raw_gate)
    one_minus_g = T.sub(T.Tensor(np.ones_like(g.data)), g)
    out = T.add(T.mul_rowvec(h_v2t, one_minus_g), T.mul_rowvec(h_t2v, g))
    return T.add(out, T.mul_rowvec(text, one_minus_g))


def bifuse(text: T.Tensor, video: T.Tensor, gate: GateParams) -> T.Tensor:
    """Full chain: both attention directions, then the gated mix."""
    return gated_fuse(t2v_attention(text, video), v2t_attention(video, text), text, gate)
