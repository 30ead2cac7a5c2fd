"""Region-wise cross-modal attention between text and selected segments.

Text positions (projected into the visual space) query each spatial region
independently; the K selected segments supply that region's keys and values.
Region outputs are mean-pooled and projected to the model width.

The selected features travel as one tensor of shape [K x R*Ev], each row a
flattened region grid, so upstream soft weighting stays on the tape; region
r lives in the column block r*Ev:(r+1)*Ev.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .selector import SelectedContextSet


@dataclass
class RegionAttnParams:
    w_t: T.Tensor  # [E_t x Ev] text-to-visual projection
    b_t: T.Tensor  # [Ev]
    w_q: T.Tensor  # [Ev x Ev]
    w_k: T.Tensor  # [Ev x Ev]
    w_v: T.Tensor  # [Ev x Ev]
    w_o: T.Tensor  # [Ev x E_o] post-pooling output projection
    b_o: T.Tensor  # [E_o]
    n_heads: int

    def __post_init__(self):
        ev = self.w_q.data.shape[0]
        if ev % self.n_heads != 0:
            raise ConfigError(f"Ev={ev} not divisible by {self.n_heads} heads")

    @classmethod
    def init(cls, e_t: int, ev: int, e_o: int, n_heads: int, rng: np.random.Generator) -> "RegionAttnParams":
        return cls(
            w_t=T.param((e_t, ev), rng),
            b_t=T.Tensor(np.zeros(ev), requires_grad=True),
            w_q=T.param((ev, ev), rng),
            w_k=T.param((ev, ev), rng),
            w_v=T.param((ev, ev), rng),
            w_o=T.param((ev, e_o), rng),
            b_o=T.Tensor(np.zeros(e_o), requires_grad=True),
            n_heads=n_heads,
        )

    def named(self) -> dict:
        return {
            "regionattn.w_t": self.w_t,
            "regionattn.b_t": self.b_t,
            "regionattn.w_q": self.w_q,
            "regionattn.w_k": self.w_k,
            "regionattn.w_v": self.w_v,
            "regionattn.w_o": self.w_o,
            "regionattn.b_o": self.b_o,
        }


def stack_selected(selected: SelectedContextSet) -> T.Tensor:
    """Constant [K x R*Ev] tensor of flattened selected grids."""
    if not selected.features:
        raise ConfigError("empty selected context set")
    return T.Tensor(np.stack([np.asarray(f).ravel() for f in selected.features]))


def project_text(text_enc: T.Tensor, params: RegionAttnParams) -> T.Tensor:
    """Per-position affine map of the encoded text into the visual space."""
    return T.linear(text_enc, params.w_t, params.b_t)


def region_cross_attention(
    text_proj: T.Tensor,
    stacked: T.Tensor,
    n_regions: int,
    params: RegionAttnParams,
) -> list:
    """One [L x Ev] attention output per region.

    Queries are shared across regions (the text is replicated logically, never
    materialized); keys and values come from region r's column block of the
    stacked selected features.
    """
    k_count, width = stacked.data.shape
    if k_count < 1:
        raise ConfigError("attention over zero selected segments")
    ev = params.w_q.data.shape[0]
    if width != n_regions * ev:
        raise ConfigError(f"stacked width {width} != R*Ev = {n_regions}*{ev}")
    q = T.matmul(text_proj, params.w_q)
    outs = []
    for r in range(n_regions):
        v_r = T.cols(stacked, r * ev, (r + 1) * ev)
        k_r = T.matmul(v_r, params.w_k)
        val_r = T.matmul(v_r, params.w_v)
        outs.append(T.attention(q, k_r, val_r, n_heads=params.n_heads))
    return outs


def pool_and_project(z_regions: list, params: RegionAttnParams) -> T.Tensor:
    """Mean over regions, then the output projection: [L x E_o]."""
    if not z_regions:
        raise ConfigError("no region outputs to pool")
    acc = z_regions[0]
    for z in z_regions[1:]:
        acc = T.add(acc, z)
    pooled = T.scale(acc, 1.0 / len(z_regions))
    return T.linear(pooled, params.w_o, params.b_o)


def region_attend(
    text_enc: T.Tensor,
    stacked: T.Tensor,
    n_regions: int,
    params: RegionAttnParams,
) -> T.Tensor:
    """Full chain: project text, attend per region, pool, project out."""
    proj = project_text(text_enc, params)
    z = region_cross_attention(proj, stacked, n_regions, params)
    return pool_and_project(z, params)
