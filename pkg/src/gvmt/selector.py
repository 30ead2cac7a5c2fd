"""Text-aware segment selection over the global context set.

Each candidate segment is scored by the mean scaled dot product between the
projected text positions and the segment's region-mean vector; softmax gives
weights alpha over all P candidates.  The K highest-scoring segments survive
(hard selection), unselected segments lying between consecutive survivors are
folded in at weight lambda/2 per side, and (optionally) the survivors are
rescaled by their renormalized alpha so the scorer keeps a gradient path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .retrieval import GlobalContextSet


@dataclass
class SelectorConfig:
    k: int = 5
    lam: float = 0.1
    soft_weighting: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class SelectorParams:
    """Projection of text into the visual space used for scoring."""

    w: T.Tensor  # [E_t x Ev]
    b: T.Tensor  # [Ev]

    @classmethod
    def init(cls, e_t: int, ev: int, rng: np.random.Generator) -> "SelectorParams":
        return cls(
            w=T.param((e_t, ev), rng),
            b=T.Tensor(np.zeros(ev), requires_grad=True),
        )

    def named(self) -> dict:
        return {"selector.w": self.w, "selector.b": self.b}


@dataclass
class SelectedContextSet:
    indices: list  # positions within I_global, ascending, len min(K, P)
    alpha: Optional[np.ndarray]  # weights over all P candidates
    features: list  # fused grids, parallel to indices


def pooled_candidates(global_set: GlobalContextSet) -> np.ndarray:
    """Region-mean vector per candidate: [P x Ev]."""
    return np.stack([f.mean(axis=0) for f in global_set.features])


def score_segments(
    text_enc: T.Tensor, global_set: GlobalContextSet, params: SelectorParams
) -> T.Tensor:
    """Alpha over the P candidates as a [1 x P] tensor (softmax of scores)."""
    pooled = pooled_candidates(global_set)  # [P x Ev]
    ev = pooled.shape[1]
    proj = T.linear(text_enc, params.w, params.b)  # [L x Ev]
    scores = T.matmul(proj, T.Tensor(pooled.T))  # [L x P]
    scores = T.scale(scores, 1.0 / math.sqrt(ev))
    mean_scores = T.reshape(T.mean0(scores), (1, pooled.shape[0]))
    return T.softmax_rows(mean_scores)


def select_top_k(alpha, global_set: GlobalContextSet, k: int) -> list:
    """Positions of the K largest weights, ties to the lower position, ascending."""
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    a = np.asarray(alpha.data if isinstance(alpha, T.Tensor) else alpha, dtype=np.float64).ravel()
    order = np.argsort(-a, kind="stable")
    return sorted(int(i) for i in order[: min(k, a.size)])


def fuse_unselected(
    global_set: GlobalContextSet,
    i_sel: Sequence[int],
    cfg: SelectorConfig,
    alpha: Optional[np.ndarray] = None,
) -> SelectedContextSet:
    """Absorb unselected candidates into their flanking selected segments.

    A selected segment at position j takes lambda/2 times every unselected
    position strictly between its previous and next selected neighbors; the
    first and last selected segments extend their reach to the ends of
    I_global, so no unselected candidate is ever dropped entirely.
    """
    p = len(global_set.indices)
    sel = sorted(int(i) for i in i_sel)
    if sel and not (0 <= sel[0] and sel[-1] < p):
        raise ConfigError(f"selected positions {sel} outside candidate range 0..{p - 1}")
    if len(set(sel)) != len(sel):
        raise ConfigError(f"duplicate selected positions: {sel}")
    selset = set(sel)
    half = 0.5 * cfg.lam
    feats = []
    for si, j in enumerate(sel):
        prev_sel = sel[si - 1] if si > 0 else -1
        next_sel = sel[si + 1] if si + 1 < len(sel) else p
        f = np.array(global_set.features[j], dtype=np.float64)
        if cfg.lam != 0.0:
            for k in range(prev_sel + 1, next_sel):
                if k not in selset:
                    f = f + half * global_set.features[k]
        feats.append(f)
    a = None if alpha is None else np.asarray(alpha, dtype=np.float64).ravel()
    return SelectedContextSet(indices=sel, alpha=a, features=feats)


def apply_soft_weighting(selected: SelectedContextSet, alpha) -> SelectedContextSet:
    """Rescale each survivor by its alpha renormalized over the selected set.

    Scales are K * alpha_j / sum(selected alphas), so a uniform alpha leaves
    features untouched and the mean scale is always exactly 1.
    """
    a = np.asarray(alpha.data if isinstance(alpha, T.Tensor) else alpha, dtype=np.float64).ravel()
    sel_a = a[selected.indices]
    total = sel_a.sum()
    if total <= 0:
        raise ConfigError("selected alphas sum to zero; cannot renormalize")
    scales = len(selected.indices) * sel_a / total
    feats = [s * f for s, f in zip(scales, selected.features)]
    return SelectedContextSet(indices=list(selected.indices), alpha=a, features=feats)


def run_selector(
    text_enc: T.Tensor,
    global_set: GlobalContextSet,
    params: SelectorParams,
    cfg: SelectorConfig,
) -> SelectedContextSet:
    """Full scoring/selection/fusion chain on detached values."""
    alpha = score_segments(text_enc, global_set, params).data.ravel()
    sel = select_top_k(alpha, global_set, cfg.k)
    selected = fuse_unselected(global_set, sel, cfg, alpha=alpha)
    if cfg.soft_weighting:
        selected = apply_soft_weighting(selected, alpha)
    return selected
