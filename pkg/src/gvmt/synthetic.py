"""Synthetic corpus generator with a planted retrieval-dependent ambiguity.

Ambiguous segments come in mutual pairs. Both members carry the ambiguous
source token; each member's grid holds the evidence for its PARTNER: an
unsigned beacon on the partner's topic channel and the partner's signed
sense next to it. Pairs sit farther apart than the neighbor-fusion window,
and the two members share a planted retrieval embedding prototype, so only
video-wide retrieval can connect a query to its evidence.

Channel layout on the Ev axis: topic t owns dims (2t, 2t+1). Topics inside
one video are all distinct, so the channels a query needs are written by
exactly one segment: its partner. The query's own grid is silent there,
which leaves a local-context model with nothing better than guessing.

At ambiguity_rate=1 every segment of every video is one half of a pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .dataio import (
    EmbeddingRecord,
    SegmentFeature,
    SubtitleRecord,
    write_corpus,
    write_embeddings,
    write_features,
)
from .errors import ConfigError, DataError


@dataclass
class GenConfig:
    n_videos: int = 24
    segs_per_video: int = 12
    ambiguity_rate: float = 1.0 / 3.0
    topics: int = 6
    ev: int = 16
    regions: int = 4
    emb_dim: int = 16
    fillers: int = 12
    beacon: float = 1.0
    sense: float = 1.0
    grid_noise: float = 0.05
    emb_noise: float = 0.05
    min_marker_distance: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_videos < 1:
            raise ConfigError(f"n_videos must be positive, got {self.n_videos}")
        if self.topics < 2:
            raise ConfigError("need at least two topics")
        if self.ev < 2 * self.topics:
            raise ConfigError(
                f"ev must be at least 2*topics to hold the channel layout, "
                f"got ev={self.ev} topics={self.topics}"
            )
        if self.fillers < 3:
            raise ConfigError("need at least three filler words")
        if self.min_marker_distance < 1:
            raise ConfigError("min_marker_distance must be positive")
        if not 0.0 <= self.ambiguity_rate <= 1.0:
            raise ConfigError(
                f"ambiguity_rate must be in [0, 1], got {self.ambiguity_rate}"
            )
        if self.emb_dim < 4:
            raise ConfigError("emb_dim must be at least 4")
        pairs = self.pairs_per_video
        if 2 * pairs > self.topics:
            raise ConfigError(
                f"{2 * pairs} ambiguous segments per video need distinct topics "
                f"but only {self.topics} exist"
            )
        # a matching with |q - m| >= d can hold at most min(n//2, n-d) pairs
        n, d = self.segs_per_video, self.min_marker_distance
        if pairs > min(n // 2, max(0, n - d)):
            raise ConfigError(
                f"cannot place {pairs} pairs at distance {d} in {n} segments"
            )

    @property
    def pairs_per_video(self) -> int:
        return int(round(self.ambiguity_rate * self.segs_per_video / 2.0))


@dataclass
class AmbiguityLabel:
    video_id: str
    seg_idx: int
    gold: str
    distractor: str


@dataclass
class GeneratedData:
    cfg: GenConfig
    records: List[SubtitleRecord]
    features: Dict[str, List[SegmentFeature]]
    embeddings: Dict[str, List[EmbeddingRecord]]
    labels: List[AmbiguityLabel]


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DataError("degenerate zero vector while generating embeddings")
    return v / n


def _plain_sentence(rng, cfg: GenConfig, topic: int) -> Tuple[List[str], List[str]]:
    picks = rng.choice(cfg.fillers, size=3, replace=False)
    src = ["the", f"topic{topic}"] + [f"w{i}" for i in picks]
    tgt = ["le", f"ttopic{topic}"] + [f"tw{i}" for i in picks]
    return src, tgt


def _query_sentence(
    rng, cfg: GenConfig, topic: int, sense: int
) -> Tuple[List[str], List[str], str, str]:
    picks = rng.choice(cfg.fillers, size=2, replace=False)
    form_a, form_b = f"form{topic}a", f"form{topic}b"
    gold, distractor = (form_a, form_b) if sense > 0 else (form_b, form_a)
    src = ["the", f"topic{topic}", "amb"] + [f"w{i}" for i in picks]
    tgt = ["le", f"ttopic{topic}", gold] + [f"tw{i}" for i in picks]
    return src, tgt, gold, distractor


def _place_pairs(rng, n: int, k: int, d: int) -> List[Tuple[int, int]]:
    """Pick k disjoint position pairs, each at least d apart.
    Deterministic rejection sampling."""
    if k == 0:
        return []
    for _ in range(10000):
        slots = rng.choice(n, size=2 * k, replace=False)
        pairs = [(int(slots[2 * i]), int(slots[2 * i + 1])) for i in range(k)]
        if all(abs(q - m) >= d for q, m in pairs):
            return pairs
    raise DataError(f"could not place {k} marker pairs at distance {d} in {n} segments")


def generate(cfg: GenConfig) -> GeneratedData:
    """Build the full corpus, grids, retrieval embeddings, and labels."""
    rng = np.random.default_rng(cfg.seed)
    records: List[SubtitleRecord] = []
    features: Dict[str, List[SegmentFeature]] = {}
    embeddings: Dict[str, List[EmbeddingRecord]] = {}
    labels: List[AmbiguityLabel] = []

    for v in range(cfg.n_videos):
        vid = f"v{v:03d}"
        n = cfg.segs_per_video
        pairs = _place_pairs(rng, n, cfg.pairs_per_video, cfg.min_marker_distance)

        # every pair member is a query; partner lookup is symmetric
        partner: Dict[int, int] = {}
        for q, m in pairs:
            partner[q] = m
            partner[m] = q

        # distinct topics across the whole video keep the channel blocks
        # of different pairs from colliding
        perm = rng.permutation(cfg.topics)
        topic_of: Dict[int, int] = {}
        for pi, (q, m) in enumerate(pairs):
            topic_of[q] = int(perm[2 * pi])
            topic_of[m] = int(perm[2 * pi + 1])
        sense_of: Dict[int, int] = {
            s: (1 if rng.integers(2) == 0 else -1) for s in sorted(partner)
        }

        grids = rng.normal(0.0, cfg.grid_noise, size=(n, cfg.regions, cfg.ev))
        vecs = np.empty((n, cfg.emb_dim))
        for s in range(n):
            vecs[s] = _unit(rng.normal(size=cfg.emb_dim))
        for q, m in pairs:
            proto = _unit(rng.normal(size=cfg.emb_dim))
            vecs[q] = _unit(proto + cfg.emb_noise * rng.normal(size=cfg.emb_dim))
            vecs[m] = _unit(proto + cfg.emb_noise * rng.normal(size=cfg.emb_dim))
        # each member writes its partner's evidence into its own grid
        for s, p in partner.items():
            t = topic_of[p]
            grids[s, :, 2 * t] += cfg.beacon
            grids[s, :, 2 * t + 1] += sense_of[p] * cfg.sense

        vrecs: List[SubtitleRecord] = []
        vfeats: List[SegmentFeature] = []
        vembs: List[EmbeddingRecord] = []
        for s in range(n):
            if s in partner:
                src, tgt, gold, distractor = _query_sentence(
                    rng, cfg, topic_of[s], sense_of[s]
                )
                labels.append(AmbiguityLabel(vid, s, gold, distractor))
            else:
                topic = int(rng.integers(cfg.topics))
                src, tgt = _plain_sentence(rng, cfg, topic)
            vrecs.append(SubtitleRecord(vid, s, src, tgt))
            vfeats.append(SegmentFeature(vid, s, grids[s].copy()))
            vembs.append(EmbeddingRecord(vid, s, vecs[s].copy()))

        records.extend(vrecs)
        features[vid] = vfeats
        embeddings[vid] = vembs

    data = GeneratedData(cfg, records, features, embeddings, labels)
    _audit(data)
    return data


def _audit(data: GeneratedData) -> None:
    """Internal consistency checks on the planted structure.

    For every labelled segment: its nearest in-video neighbor by embedding
    carries the beacon and the correct signed sense on the label's topic
    channels, sits beyond the fusion-window distance, and the query's own
    grid stays quiet on those channels. A failure means the generator
    itself is broken.
    """
    cfg = data.cfg
    by_key = {(r.video_id, r.seg_idx): r for r in data.records}
    for lab in data.labels:
        rec = by_key[(lab.video_id, lab.seg_idx)]
        topic = int(rec.source[1][len("topic"):])
        vecs = np.stack([e.vector for e in data.embeddings[lab.video_id]])
        sims = vecs @ vecs[lab.seg_idx]
        sims[lab.seg_idx] = -np.inf
        nearest = int(np.argmax(sims))
        if abs(nearest - lab.seg_idx) < cfg.min_marker_distance:
            raise DataError(
                f"marker {nearest} is within the fusion window of query "
                f"{lab.video_id}:{lab.seg_idx}"
            )
        marker_grid = data.features[lab.video_id][nearest].regions
        if marker_grid[:, 2 * topic].mean() < cfg.beacon / 2.0:
            raise DataError(
                f"planted structure broken for {lab.video_id}:{lab.seg_idx}: "
                f"nearest segment {nearest} has no beacon for topic {topic}"
            )
        sense_level = marker_grid[:, 2 * topic + 1].mean()
        want_gold = f"form{topic}a" if sense_level > 0 else f"form{topic}b"
        if want_gold != lab.gold:
            raise DataError(
                f"label {lab.video_id}:{lab.seg_idx} disagrees with the "
                f"planted sense channel"
            )
        own = data.features[lab.video_id][lab.seg_idx].regions
        own_level = np.abs(own[:, 2 * topic: 2 * topic + 2].mean(axis=0)).max()
        if own_level > cfg.beacon / 2.0:
            raise DataError(f"query {lab.video_id}:{lab.seg_idx} leaks its own sense")


def audit_summary(data: GeneratedData) -> dict:
    """Counts reported by the generation command."""
    n_segments = len(data.records)
    return {
        "videos": data.cfg.n_videos,
        "segments": n_segments,
        "ambiguous_segments": len(data.labels),
        "ambiguity_rate": len(data.labels) / n_segments if n_segments else 0.0,
        "pairs_per_video": data.cfg.pairs_per_video,
        "topics": data.cfg.topics,
    }


def source_token_inventory(cfg: GenConfig) -> List[str]:
    toks = ["the", "amb"]
    toks += [f"topic{t}" for t in range(cfg.topics)]
    toks += [f"w{i}" for i in range(cfg.fillers)]
    return toks


def target_token_inventory(cfg: GenConfig) -> List[str]:
    toks = ["le"]
    toks += [f"ttopic{t}" for t in range(cfg.topics)]
    for t in range(cfg.topics):
        toks += [f"form{t}a", f"form{t}b"]
    toks += [f"tw{i}" for i in range(cfg.fillers)]
    return toks


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def write_labels(labels: Sequence[AmbiguityLabel], path) -> None:
    with open(path, "w") as fh:
        for lab in labels:
            fh.write(
                json.dumps(
                    {
                        "video_id": lab.video_id,
                        "seg_idx": lab.seg_idx,
                        "gold": lab.gold,
                        "distractor": lab.distractor,
                    }
                )
                + "\n"
            )


def load_labels(path) -> List[AmbiguityLabel]:
    labels = []
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                labels.append(
                    AmbiguityLabel(
                        str(d["video_id"]),
                        int(d["seg_idx"]),
                        str(d["gold"]),
                        str(d["distractor"]),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{ln}: bad label line: {exc}") from exc
    return labels


def write_dataset(data: GeneratedData, out_dir) -> None:
    """Standard directory layout: corpus.tsv, features/, embeddings/, labels.jsonl."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)
    write_corpus(data.records, out / "corpus.tsv")
    for vid, feats in data.features.items():
        write_features(feats, out / "features" / f"{vid}.feat")
    for vid, embs in data.embeddings.items():
        write_embeddings(embs, out / "embeddings" / f"{vid}.emb")
    write_labels(data.labels, out / "labels.jsonl")
    manifest = audit_summary(data)
    manifest.update(
        {
            "segs_per_video": data.cfg.segs_per_video,
            "ev": data.cfg.ev,
            "regions": data.cfg.regions,
            "emb_dim": data.cfg.emb_dim,
            "fillers": data.cfg.fillers,
            "seed": data.cfg.seed,
        }
    )
    with open(out / "dataset.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(root) -> Tuple[List[SubtitleRecord], Dict, Dict, List[AmbiguityLabel], dict]:
    """Read a directory produced by write_dataset.

    Returns (records, features by video, embeddings by video, labels,
    manifest). Labels may be an empty list when the file is absent.
    """
    from .dataio import load_corpus, read_embeddings, read_features

    root = Path(root)
    if not (root / "corpus.tsv").exists():
        raise DataError(f"no corpus.tsv under {root}")
    records = load_corpus(root / "corpus.tsv")
    features: Dict[str, List[SegmentFeature]] = {}
    embeddings: Dict[str, List[EmbeddingRecord]] = {}
    for p in sorted((root / "features").glob("*.feat")):
        feats = read_features(p)
        features[feats[0].video_id] = feats
    for p in sorted((root / "embeddings").glob("*.emb")):
        embs = read_embeddings(p)
        embeddings[embs[0].video_id] = embs
    labels = []
    if (root / "labels.jsonl").exists():
        labels = load_labels(root / "labels.jsonl")
    manifest = {}
    if (root / "dataset.json").exists():
        with open(root / "dataset.json") as fh:
            manifest = json.load(fh)
    return records, features, embeddings, labels, manifest
