"""Corpus, feature, embedding, and checkpoint persistence.

File formats (all little-endian):
  corpus      JSON Lines, one object per subtitle:
              {"video_id": str, "seg_idx": int, "src": str, "tgt": str}
  .feat       magic "GVMTFEAT", u32 version=1, u32 n_segments, u32 R, u32 Ev,
              then per segment u32 seg_idx + R*Ev float32 row-major
  .emb        magic "GVMTEMB1", u32 n, u32 dim,
              then per entry u32 seg_idx + dim float32
  checkpoint  magic "GVMTCKPT", u32 version, u32 json_len + config JSON,
              then named tensors: u32 name_len, name utf-8, u32 ndim,
              u32 dims..., float64 payload
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError

FEAT_MAGIC = b"GVMTFEAT"
EMB_MAGIC = b"GVMTEMB1"
CKPT_MAGIC = b"GVMTCKPT"
FEAT_VERSION = 1
CKPT_VERSION = 1

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


def tokenize(text: str) -> list[str]:
    """Whitespace split plus lowercasing; the only tokenization in the system."""
    return text.lower().split()


@dataclass
class SubtitleRecord:
    video_id: str
    seg_idx: int
    source: list
    target: list


@dataclass
class SegmentFeature:
    video_id: str
    seg_idx: int
    regions: np.ndarray  # [R x Ev] float64


@dataclass
class EmbeddingRecord:
    video_id: str
    seg_idx: int
    vector: np.ndarray  # unit-norm float64


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


def load_corpus(path) -> list[SubtitleRecord]:
    """Read a JSONL corpus, sorted by (video_id, seg_idx).

    Rejects malformed lines (with the 1-based line number), duplicate
    segment indices, and per-video index sequences that do not run 0..N-1.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    records: list[SubtitleRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            try:
                vid = obj["video_id"]
                seg = obj["seg_idx"]
                src = obj["src"]
                tgt = obj["tgt"]
            except KeyError as exc:
                raise DataError(f"{path}:{lineno}: missing field {exc.args[0]}") from exc
            if not isinstance(vid, str) or not isinstance(seg, int) or isinstance(seg, bool):
                raise DataError(f"{path}:{lineno}: video_id must be str, seg_idx int")
            if seg < 0:
                raise DataError(f"{path}:{lineno}: negative seg_idx {seg}")
            source = tokenize(str(src))
            target = tokenize(str(tgt))
            if not source or not target:
                raise DataError(f"{path}:{lineno}: empty source or target text")
            records.append(SubtitleRecord(vid, seg, source, target))

    records.sort(key=lambda r: (r.video_id, r.seg_idx))
    seen: dict[tuple, bool] = {}
    for r in records:
        key = (r.video_id, r.seg_idx)
        if key in seen:
            raise DataError(f"duplicate seg_idx {r.seg_idx} in video {r.video_id}")
        seen[key] = True
    for vid, group in group_by_video(records).items():
        indices = [r.seg_idx for r in group]
        if indices != list(range(len(group))):
            raise DataError(f"video {vid}: seg_idx not contiguous from 0, got {indices[:8]}...")
    return records


def write_corpus(records: Sequence[SubtitleRecord], path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "video_id": r.video_id,
                "seg_idx": r.seg_idx,
                "src": " ".join(r.source),
                "tgt": " ".join(r.target),
            }
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def group_by_video(records: Sequence[SubtitleRecord]) -> dict:
    groups: dict = {}
    for r in records:
        groups.setdefault(r.video_id, []).append(r)
    for group in groups.values():
        group.sort(key=lambda r: r.seg_idx)
    return groups


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass
class Vocabulary:
    """Token/id bijection with pad, bos, eos, unk pinned at ids 0..3."""

    id_to_token: list = field(default_factory=lambda: list(RESERVED_TOKENS))

    def __post_init__(self):
        if tuple(self.id_to_token[:4]) != RESERVED_TOKENS:
            raise DataError("vocabulary must start with the four reserved tokens")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, token_lists: Iterable[Sequence[str]]) -> "Vocabulary":
        seen = set()
        for toks in token_lists:
            seen.update(toks)
        seen.difference_update(RESERVED_TOKENS)
        return cls(list(RESERVED_TOKENS) + sorted(seen))

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> list:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list:
        out = []
        for i in ids:
            if not 0 <= i < len(self.id_to_token):
                raise DataError(f"token id {i} outside vocabulary of size {len(self)}")
            out.append(self.id_to_token[i])
        return out


# ---------------------------------------------------------------------------
# toy text embedder
# ---------------------------------------------------------------------------


@lru_cache(maxsize=1 << 16)
def _token_unit(seed: int, dim: int, token: str) -> np.ndarray:
    digest = hashlib.blake2b(f"{seed}\x1f{token}".encode("utf-8"), digest_size=8).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.flags.writeable = False
    return v


def toy_embed(tokens: Sequence[str], dim: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic bag-of-tokens embedding: per-token hashed unit vectors,
    summed in sorted order (multiset-invariant) and L2-normalized.
    """
    if not tokens:
        raise DataError("cannot embed empty text")
    if dim < 8:
        raise ValueError(f"embedding dim must be >= 8, got {dim}")
    acc = np.zeros(dim)
    for tok in sorted(tokens):
        acc = acc + _token_unit(seed, dim, tok)
    norm = np.linalg.norm(acc)
    if norm < 1e-9:
        raise DataError("degenerate embedding: token vectors cancelled")
    return acc / norm


# ---------------------------------------------------------------------------
# binary feature and embedding files
# ---------------------------------------------------------------------------


def _read_exact(fh, n: int, path, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"{path}: truncated while reading {what}")
    return buf


def write_features(features: Sequence[SegmentFeature], path) -> None:
    """One video's region grids; segments stored in seg_idx order."""
    if not features:
        raise DataError("refusing to write empty feature file")
    feats = sorted(features, key=lambda f: f.seg_idx)
    r, ev = feats[0].regions.shape
    vids = {f.video_id for f in feats}
    if len(vids) != 1:
        raise DataError(f"feature file must hold one video, got {sorted(vids)}")
    for f in feats:
        if f.regions.shape != (r, ev):
            raise DataError(
                f"segment {f.seg_idx}: region grid {f.regions.shape} != ({r}, {ev})"
            )
        if not np.isfinite(f.regions).all():
            raise DataError(f"segment {f.seg_idx}: non-finite region features")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<IIII", FEAT_VERSION, len(feats), r, ev))
        for f in feats:
            fh.write(struct.pack("<I", f.seg_idx))
            fh.write(np.ascontiguousarray(f.regions, dtype="<f4").tobytes())


def read_features(path, video_id: str = None) -> list[SegmentFeature]:
    path = Path(path)
    if video_id is None:
        video_id = path.stem
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, path, "magic") != FEAT_MAGIC:
            raise DataError(f"{path}: not a feature file (bad magic)")
        version, n, r, ev = struct.unpack("<IIII", _read_exact(fh, 16, path, "header"))
        if version != FEAT_VERSION:
            raise DataError(f"{path}: unsupported feature version {version}")
        if r < 1 or ev < 1:
            raise DataError(f"{path}: invalid grid {r}x{ev}")
        out = []
        for _ in range(n):
            (seg_idx,) = struct.unpack("<I", _read_exact(fh, 4, path, "segment index"))
            raw = _read_exact(fh, 4 * r * ev, path, f"segment {seg_idx} payload")
            grid = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(r, ev)
            out.append(SegmentFeature(video_id, seg_idx, grid))
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after {n} segments")
    return out


def write_embeddings(embeddings: Sequence[EmbeddingRecord], path) -> None:
    if not embeddings:
        raise DataError("refusing to write empty embedding file")
    embs = sorted(embeddings, key=lambda e: e.seg_idx)
    dim = embs[0].vector.shape[0]
    for e in embs:
        if e.vector.shape != (dim,):
            raise DataError(f"segment {e.seg_idx}: embedding dim {e.vector.shape} != ({dim},)")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<II", len(embs), dim))
        for e in embs:
            fh.write(struct.pack("<I", e.seg_idx))
            fh.write(np.ascontiguousarray(e.vector, dtype="<f4").tobytes())


def read_embeddings(path, video_id: str = None) -> list[EmbeddingRecord]:
    """Load and defensively re-normalize to unit length in float64."""
    path = Path(path)
    if video_id is None:
        video_id = path.stem
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, path, "magic") != EMB_MAGIC:
            raise DataError(f"{path}: not an embedding file (bad magic)")
        n, dim = struct.unpack("<II", _read_exact(fh, 8, path, "header"))
        if dim < 1:
            raise DataError(f"{path}: invalid dim {dim}")
        out = []
        for _ in range(n):
            (seg_idx,) = struct.unpack("<I", _read_exact(fh, 4, path, "entry index"))
            raw = _read_exact(fh, 4 * dim, path, f"entry {seg_idx} payload")
            v = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            norm = np.linalg.norm(v)
            if norm < 1e-9:
                raise DataError(f"{path}: zero-norm embedding at seg_idx {seg_idx}")
            out.append(EmbeddingRecord(video_id, seg_idx, v / norm))
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after {n} entries")
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    """Atomic write (temp file + rename); tensor order fixed by sorted name."""
    path = Path(path)
    cfg_bytes = json.dumps(dict(config), sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", CKPT_VERSION))
            fh.write(struct.pack("<I", len(cfg_bytes)))
            fh.write(cfg_bytes)
            for name in sorted(tensors):
                # not ascontiguousarray: that would promote 0-d scalars to 1-d
                arr = np.asarray(tensors[name], dtype=np.float64)
                name_b = name.encode("utf-8")
                fh.write(struct.pack("<I", len(name_b)))
                fh.write(name_b)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype("<f8").tobytes())
        os.replace(tmp, path)
    except OSError as exc:
        if tmp.exists():
            tmp.unlink()
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Returns (config dict, name -> float64 array). Truncation leaves nothing half-loaded."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, 8, path, "magic") != CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path, "version"))
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, path, "config length"))
        try:
            config = json.loads(_read_exact(fh, cfg_len, path, "config block"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: corrupt config block") from exc
        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError(f"{path}: truncated tensor header")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, path, "tensor name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path, f"{name} ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path, f"{name} dims"))
            count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            raw = _read_exact(fh, 8 * count, path, f"{name} payload")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
    return config, tensors
