"""Video-wide semantic retrieval and temporal neighbor fusion.

For a query segment, the P segments of the same video with the highest cosine
similarity between subtitle embeddings form the global context; each retrieved
segment's region grid absorbs its temporal neighbors within a +-w window,
scaled by gamma.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataio import EmbeddingRecord, SegmentFeature
from .errors import DataError


@dataclass
class FusionConfig:
    w: int = 2
    gamma: float = 0.1

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"window half-width must be >= 0, got {self.w}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class VideoIndex:
    """Flat exact-search index: one unit-norm row per segment, in seg order."""

    video_id: str
    vectors: np.ndarray  # [n x dim]

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class GlobalContextSet:
    query_idx: int
    indices: list  # ascending seg indices, len min(P, N)
    features: list  # parallel fused region grids, each [R x Ev]


def build_index(embeddings: Sequence[EmbeddingRecord]) -> VideoIndex:
    """Stack one video's embeddings into a searchable matrix.

    Rows are re-normalized defensively; seg indices must run 0..n-1.
    """
    if not embeddings:
        raise DataError("cannot build an index from zero embeddings")
    embs = sorted(embeddings, key=lambda e: e.seg_idx)
    if [e.seg_idx for e in embs] != list(range(len(embs))):
        raise DataError(
            f"video {embs[0].video_id}: embedding seg_idx not contiguous from 0"
        )
    dim = embs[0].vector.shape[0]
    for e in embs:
        if e.vector.shape != (dim,):
            raise DataError(
                f"video {e.video_id} seg {e.seg_idx}: dim {e.vector.shape[0]} != {dim}"
            )
    mat = np.stack([e.vector for e in embs]).astype(np.float64)
    norms = np.linalg.norm(mat, axis=1)
    if (norms < 1e-9).any():
        bad = int(np.flatnonzero(norms < 1e-9)[0])
        raise DataError(f"zero-norm embedding at seg_idx {bad}")
    return VideoIndex(embs[0].video_id, mat / norms[:, None])


def _cosine_row(index: VideoIndex, query_idx: int) -> np.ndarray:
    # row-wise multiply-then-sum, not a matvec: BLAS accumulates in a
    # position-dependent order, so two bit-identical rows could come back
    # with different scores and dodge the documented tie-break
    return (index.vectors * index.vectors[query_idx]).sum(axis=1)


def retrieve_top_p(index: VideoIndex, query_idx: int, p: int) -> list:
    """Indices of the P most cosine-similar segments, ascending.

    Ties break toward the lower seg_idx (stable sort on descending
    similarity); P larger than the video clamps to all segments.
    """
    if not 0 <= query_idx < index.n:
        raise DataError(f"query seg_idx {query_idx} outside video of {index.n} segments")
    if p < 1:
        raise ValueError(f"P must be >= 1, got {p}")
    sims = _cosine_row(index, query_idx)
    order = np.argsort(-sims, kind="stable")
    chosen = order[: min(p, index.n)]
    return sorted(int(i) for i in chosen)


def similarity_row(index: VideoIndex, query_idx: int) -> np.ndarray:
    """Cosine of the query against every segment (for reporting)."""
    if not 0 <= query_idx < index.n:
        raise DataError(f"query seg_idx {query_idx} outside video of {index.n} segments")
    return _cosine_row(index, query_idx)


def grids_from_features(features: Sequence[SegmentFeature]) -> list:
    """Region grids ordered 0..n-1, validated for contiguity and shape."""
    feats = sorted(features, key=lambda f: f.seg_idx)
    if not feats:
        raise DataError("no segment features given")
    if [f.seg_idx for f in feats] != list(range(len(feats))):
        raise DataError(f"video {feats[0].video_id}: feature seg_idx not contiguous from 0")
    shape = feats[0].regions.shape
    for f in feats:
        if f.regions.shape != shape:
            raise DataError(f"seg {f.seg_idx}: region grid {f.regions.shape} != {shape}")
    return [np.asarray(f.regions, dtype=np.float64) for f in feats]


def fuse_neighbors(grids: Sequence[np.ndarray], j: int, cfg: FusionConfig) -> np.ndarray:
    """Segment j's grid plus gamma times the sum of grids within the window.

    The window covers indices within distance w of j, excluding j itself,
    clamped to the video bounds.
    """
    n = len(grids)
    if not 0 <= j < n:
        raise DataError(f"segment {j} outside video of {n} segments")
    base = np.array(grids[j], dtype=np.float64)
    if cfg.gamma == 0.0 or cfg.w == 0:
        return base
    acc = np.zeros_like(base)
    for k in range(max(0, j - cfg.w), min(n - 1, j + cfg.w) + 1):
        if k != j:
            acc += grids[k]
    return base + cfg.gamma * acc


def build_global_set(
    index: VideoIndex,
    grids: Sequence[np.ndarray],
    query_idx: int,
    p: int,
    cfg: FusionConfig,
) -> GlobalContextSet:
    """Retrieve top-P then fuse neighbors per retrieved segment."""
    indices = retrieve_top_p(index, query_idx, p)
    for j in indices:
        if j >= len(grids) or grids[j] is None:
            raise DataError(f"missing region features for retrieved segment {j}")
    feats = [fuse_neighbors(grids, j, cfg) for j in indices]
    return GlobalContextSet(query_idx, indices, feats)
