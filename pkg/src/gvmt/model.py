"""Transformer translation model with video-conditioned memory.

The encoder produces text states T. For each sample a global context set of
video segment grids is scored and pruned, the survivors feed region-level
cross-attention to produce a video summary O aligned to the text positions,
and a gated bidirectional fusion of T and O becomes the memory the decoder
cross-attends to. Ablation switches reduce the memory path to simpler
variants without touching the decoder.

Everything runs per sample on the shared tape; batching is a weighted sum
of per-sample losses, so no padding is ever introduced by the batcher.
Padding support in ``encode_source`` exists only to honour the masking
contract (outputs at real positions must not depend on trailing pads).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .bifusion import GateParams, bifuse
from .dataio import BOS_ID, EOS_ID, PAD_ID
from .errors import ConfigError, DataError
from .regionattn import RegionAttnParams, region_attend, stack_selected
from .retrieval import GlobalContextSet
from .selector import (
    SelectorConfig,
    SelectorParams,
    fuse_unselected,
    score_segments,
    select_top_k,
)
from .tensor import Tensor


@dataclass
class ModelConfig:
    """Transformer dimensions. Vocab sizes are set once the vocabularies exist."""

    layers: int = 4
    d_h: int = 128
    ffn: int = 256
    heads: int = 8
    dropout: float = 0.35
    max_src_len: int = 64
    max_tgt_len: int = 64
    src_vocab: int = 0
    tgt_vocab: int = 0

    def __post_init__(self) -> None:
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.d_h < 1 or self.ffn < 1:
            raise ConfigError("d_h and ffn must be positive")
        if self.heads < 1 or self.d_h % self.heads != 0:
            raise ConfigError(
                f"heads must divide d_h, got heads={self.heads} d_h={self.d_h}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.max_src_len < 1 or self.max_tgt_len < 1:
            raise ConfigError("sequence length caps must be positive")


@dataclass(frozen=True)
class PipelineMode:
    """Ablation switches.

    use_gr=False replaces the retrieved context with the sample's own raw
    segment (the batch builder decides that; the flag also names the run).
    use_tvss=False feeds every context segment to region attention with no
    selection and no soft weighting. text_only=True drops the video memory
    entirely: the decoder sees the text encoding alone.
    """

    use_gr: bool = True
    use_tvss: bool = True
    text_only: bool = False

    @property
    def name(self) -> str:
        if self.text_only:
            return "text_only"
        if self.use_gr and self.use_tvss:
            return "full"
        if not self.use_gr and self.use_tvss:
            return "no_gr"
        if self.use_gr and not self.use_tvss:
            return "no_tvss"
        return "no_both"


@dataclass
class TrainSample:
    """One parallel sentence pair plus its video context.

    ``context`` may be None only when the model runs text-only.
    """

    video_id: str
    seg_idx: int
    src_ids: List[int]
    tgt_ids: List[int]
    context: Optional[GlobalContextSet] = None


def sinusoidal_positions(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position table, [n_positions x dim] float64."""
    if n_positions < 1 or dim < 1:
        raise ConfigError("position table needs positive dimensions")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2.0 * np.floor(idx / 2.0)) / dim)
    table = np.where(np.arange(dim)[None, :] % 2 == 0, np.sin(angle), np.cos(angle))
    return table


def _zeros(shape) -> Tensor:
    return T.param(np.zeros(shape, dtype=np.float64))


class Translator:
    """Owns every trainable tensor and runs the end-to-end pipeline.

    Parameters live in a flat ``name -> Tensor`` dict so the optimizer and
    the checkpoint format see one namespace. The selector, region attention
    and gate parameter objects alias tensors in that same dict.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        sel_cfg: SelectorConfig,
        ev: int,
        rattn_heads: int = 0,
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        if cfg.src_vocab < 5 or cfg.tgt_vocab < 5:
            raise ConfigError(
                "vocab sizes must cover the reserved tokens plus at least one word"
            )
        if ev < 1:
            raise ConfigError(f"ev must be positive, got {ev}")
        if rattn_heads == 0:
            rattn_heads = 1
        if ev % rattn_heads != 0:
            raise ConfigError(
                f"region attention heads must divide ev, got {rattn_heads} vs {ev}"
            )
        self.cfg = cfg
        self.sel_cfg = sel_cfg
        self.ev = ev
        self.rattn_heads = rattn_heads
        if rng is None:
            rng = np.random.default_rng(0)

        d = cfg.d_h
        self.params: Dict[str, Tensor] = {}
        self._pos_src = sinusoidal_positions(cfg.max_src_len, d)
        # +1: the decoder input is BOS plus the target, one longer than the cap
        self._pos_tgt = sinusoidal_positions(cfg.max_tgt_len + 1, d)

        self._add("src_embed", T.param((cfg.src_vocab, d), rng, std=1.0 / math.sqrt(d)))
        self._add("tgt_embed", T.param((cfg.tgt_vocab, d), rng, std=1.0 / math.sqrt(d)))
        for i in range(cfg.layers):
            self._add_attn(f"enc.{i}.attn", d, rng)
            self._add_ln(f"enc.{i}.ln1", d)
            self._add_ffn(f"enc.{i}.ffn", d, cfg.ffn, rng)
            self._add_ln(f"enc.{i}.ln2", d)
        for i in range(cfg.layers):
            self._add_attn(f"dec.{i}.self", d, rng)
            self._add_ln(f"dec.{i}.ln1", d)
            self._add_attn(f"dec.{i}.cross", d, rng)
            self._add_ln(f"dec.{i}.ln2", d)
            self._add_ffn(f"dec.{i}.ffn", d, cfg.ffn, rng)
            self._add_ln(f"dec.{i}.ln3", d)
        self._add("out.w", T.param((d, cfg.tgt_vocab), rng, std=1.0 / math.sqrt(d)))
        self._add("out.b", _zeros((cfg.tgt_vocab,)))

        self.selector = SelectorParams.init(d, ev, rng)
        self.rattn = RegionAttnParams.init(d, ev, d, rattn_heads, rng)
        self.gate = GateParams.init(d)
        for name, t in self.selector.named().items():
            self._add(name, t)
        for name, t in self.rattn.named().items():
            self._add(name, t)
        for name, t in self.gate.named().items():
            self._add(name, t)

    # -- parameter bookkeeping ------------------------------------------------

    def _add(self, name: str, t: Tensor) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = t

    def _add_attn(self, prefix: str, d: int, rng) -> None:
        std = 1.0 / math.sqrt(d)
        for w in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{w}", T.param((d, d), rng, std=std))
        # no key bias: a constant added to every key shifts each score row
        # uniformly, which softmax cancels, so its gradient is identically zero
        for b in ("bq", "bv", "bo"):
            self._add(f"{prefix}.{b}", _zeros((d,)))

    def _add_ffn(self, prefix: str, d: int, ffn: int, rng) -> None:
        self._add(f"{prefix}.w1", T.param((d, ffn), rng, std=1.0 / math.sqrt(d)))
        self._add(f"{prefix}.b1", _zeros((ffn,)))
        self._add(f"{prefix}.w2", T.param((ffn, d), rng, std=1.0 / math.sqrt(ffn)))
        self._add(f"{prefix}.b2", _zeros((d,)))

    def _add_ln(self, prefix: str, d: int) -> None:
        self._add(f"{prefix}.g", T.param(np.ones(d, dtype=np.float64)))
        self._add(f"{prefix}.b", _zeros((d,)))

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}

    def load_state(self, tensors: Dict[str, np.ndarray]) -> None:
        """Copy arrays into the live parameters. Names and shapes must match."""
        missing = sorted(set(self.params) - set(tensors))
        if missing:
            raise DataError(f"checkpoint is missing parameters: {missing[:4]}")
        for name, t in self.params.items():
            arr = np.asarray(tensors[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise DataError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, "
                    f"model {t.data.shape}"
                )
            t.data[...] = arr

    # -- transformer blocks ---------------------------------------------------

    def _attn_block(
        self,
        prefix: str,
        query: Tensor,
        keyval: Tensor,
        causal: bool,
        key_mask: Optional[np.ndarray],
    ) -> Tensor:
        p = self.params
        q = T.linear(query, p[f"{prefix}.wq"], p[f"{prefix}.bq"])
        k = T.linear(keyval, p[f"{prefix}.wk"])
        v = T.linear(keyval, p[f"{prefix}.wv"], p[f"{prefix}.bv"])
        a = T.attention(q, k, v, self.cfg.heads, causal=causal, key_mask=key_mask)
        return T.linear(a, p[f"{prefix}.wo"], p[f"{prefix}.bo"])

    def _ffn_block(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = T.relu(T.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
        return T.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def _sublayer(
        self,
        x: Tensor,
        sub: Tensor,
        ln_prefix: str,
        train: bool,
        rng: Optional[np.random.Generator],
    ) -> Tensor:
        if train and self.cfg.dropout > 0.0:
            sub = T.dropout(sub, self.cfg.dropout, rng)
        p = self.params
        return T.layer_norm(T.add(x, sub), p[f"{ln_prefix}.g"], p[f"{ln_prefix}.b"])

    def _embed(
        self,
        ids: Sequence[int],
        table: Tensor,
        pos_table: np.ndarray,
        train: bool,
        rng: Optional[np.random.Generator],
    ) -> Tensor:
        e = T.embedding_lookup(table, list(ids))
        e = T.scale(e, math.sqrt(float(self.cfg.d_h)))
        x = T.add(e, T.constant(pos_table[: len(ids)]))
        if train and self.cfg.dropout > 0.0:
            x = T.dropout(x, self.cfg.dropout, rng)
        return x

    def encode_source(
        self,
        src_ids: Sequence[int],
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        pad_to: Optional[int] = None,
    ) -> Tensor:
        """Encode source tokens to [L x d_h] states.

        ``pad_to`` appends PAD ids and masks them out of self-attention;
        rows at the real positions are then identical to the unpadded run.
        """
        n_real = len(src_ids)
        if n_real < 1:
            raise DataError("source sentence is empty")
        if n_real > self.cfg.max_src_len:
            raise DataError(
                f"source length {n_real} exceeds cap {self.cfg.max_src_len}"
            )
        ids = list(src_ids)
        key_mask = None
        if pad_to is not None and pad_to > n_real:
            if pad_to > self.cfg.max_src_len:
                raise DataError(f"padded length {pad_to} exceeds cap")
            ids = ids + [PAD_ID] * (pad_to - n_real)
            key_mask = np.arange(pad_to) < n_real
        x = self._embed(ids, self.params["src_embed"], self._pos_src, train, rng)
        for i in range(self.cfg.layers):
            a = self._attn_block(f"enc.{i}.attn", x, x, causal=False, key_mask=key_mask)
            x = self._sublayer(x, a, f"enc.{i}.ln1", train, rng)
            f = self._ffn_block(f"enc.{i}.ffn", x)
            x = self._sublayer(x, f, f"enc.{i}.ln2", train, rng)
        return x

    def _decode_hidden(
        self,
        input_ids: Sequence[int],
        memory: Tensor,
        train: bool,
        rng: Optional[np.random.Generator],
    ) -> Tensor:
        if len(input_ids) < 1:
            raise DataError("decoder input is empty")
        if len(input_ids) > self.cfg.max_tgt_len + 1:
            raise DataError(
                f"decoder input length {len(input_ids)} exceeds cap "
                f"{self.cfg.max_tgt_len + 1}"
            )
        y = self._embed(input_ids, self.params["tgt_embed"], self._pos_tgt, train, rng)
        for i in range(self.cfg.layers):
            a = self._attn_block(f"dec.{i}.self", y, y, causal=True, key_mask=None)
            y = self._sublayer(y, a, f"dec.{i}.ln1", train, rng)
            c = self._attn_block(f"dec.{i}.cross", y, memory, causal=False, key_mask=None)
            y = self._sublayer(y, c, f"dec.{i}.ln2", train, rng)
            f = self._ffn_block(f"dec.{i}.ffn", y)
            y = self._sublayer(y, f, f"dec.{i}.ln3", train, rng)
        return y

    def decode_logits(
        self,
        input_ids: Sequence[int],
        memory: Tensor,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        h = self._decode_hidden(input_ids, memory, train, rng)
        return T.linear(h, self.params["out.w"], self.params["out.b"])

    def decode_step(
        self, prefix_ids: Sequence[int], memory: Tensor
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Next-token distribution given the prefix (which starts with BOS).

        Recomputes the whole prefix; there is no incremental cache. Returns
        (probabilities over the target vocab, final hidden state).
        """
        if len(prefix_ids) < 1 or prefix_ids[0] != BOS_ID:
            raise DataError("decode prefix must start with BOS")
        h = self._decode_hidden(prefix_ids, memory, train=False, rng=None)
        last = h.data[-1]
        logits = last @ self.params["out.w"].data + self.params["out.b"].data
        z = logits - logits.max()
        e = np.exp(z)
        return e / e.sum(), last.copy()

    def greedy_decode(self, memory: Tensor, max_len: int) -> List[int]:
        """Greedy argmax decoding; ties go to the lowest token id.

        Output excludes BOS, includes EOS when emitted, and is truncated at
        ``max_len`` tokens if EOS never wins the argmax.
        """
        if max_len < 1:
            raise ConfigError(f"max_len must be positive, got {max_len}")
        limit = min(max_len, self.cfg.max_tgt_len)
        prefix = [BOS_ID]
        out: List[int] = []
        while len(out) < limit:
            probs, _ = self.decode_step(prefix, memory)
            nxt = int(np.argmax(probs))
            out.append(nxt)
            prefix.append(nxt)
            if nxt == EOS_ID:
                break
        return out

    # -- video memory ---------------------------------------------------------

    def build_memory(
        self,
        t_enc: Tensor,
        context: Optional[GlobalContextSet],
        mode: PipelineMode,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Fuse the text encoding with the video context set into the decoder memory."""
        if mode.text_only:
            return t_enc
        if context is None:
            raise DataError("sample has no context set and the model is not text-only")
        if not context.features:
            raise DataError("context set is empty")
        n_regions = context.features[0].shape[0]
        if mode.use_tvss:
            alpha = score_segments(t_enc, context, self.selector)
            k = min(self.sel_cfg.k, len(context.indices))
            positions = select_top_k(alpha.data, context, k)
            selected = fuse_unselected(context, positions, self.sel_cfg)
            base = stack_selected(selected)
            if self.sel_cfg.soft_weighting:
                alpha_col = T.transpose(alpha)
                sel_alpha = T.embedding_lookup(alpha_col, positions)
                denom = T.sum_all(sel_alpha)
                weights = T.div_scalar(T.scale(sel_alpha, float(len(positions))), denom)
                stacked = T.mul_colvec(base, weights)
            else:
                stacked = base
        else:
            flat = np.stack([np.ascontiguousarray(f).ravel() for f in context.features])
            stacked = T.constant(flat)
        o = region_attend(t_enc, stacked, n_regions, self.rattn)
        if train and self.cfg.dropout > 0.0:
            o = T.dropout(o, self.cfg.dropout, rng)
        return bifuse(t_enc, o, self.gate)

    # -- losses and translation ----------------------------------------------

    def sample_loss(
        self,
        sample: TrainSample,
        mode: PipelineMode,
        label_smoothing: float,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[Tensor, int]:
        """Teacher-forced loss for one sample: (mean-per-token loss, token count)."""
        if len(sample.tgt_ids) > self.cfg.max_tgt_len:
            raise DataError(
                f"target length {len(sample.tgt_ids)} exceeds cap {self.cfg.max_tgt_len}"
            )
        t_enc = self.encode_source(sample.src_ids, train=train, rng=rng)
        memory = self.build_memory(t_enc, sample.context, mode, train=train, rng=rng)
        input_ids = [BOS_ID] + list(sample.tgt_ids)
        targets = list(sample.tgt_ids) + [EOS_ID]
        logits = self.decode_logits(input_ids, memory, train=train, rng=rng)
        loss = T.cross_entropy_label_smoothed(logits, targets, label_smoothing)
        return loss, len(targets)

    def forward_loss(
        self,
        batch: Sequence[TrainSample],
        mode: PipelineMode,
        label_smoothing: float,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """Mean per-token loss over the batch (token-weighted across samples)."""
        if not batch:
            raise DataError("empty batch")
        parts: List[Tuple[Tensor, int]] = []
        for sample in batch:
            parts.append(self.sample_loss(sample, mode, label_smoothing, train, rng))
        total_tokens = sum(n for _, n in parts)
        acc = T.scale(parts[0][0], parts[0][1] / total_tokens)
        for loss, n in parts[1:]:
            acc = T.add(acc, T.scale(loss, n / total_tokens))
        return acc

    def translate(
        self,
        sample: TrainSample,
        mode: PipelineMode,
        max_len: int,
    ) -> List[int]:
        t_enc = self.encode_source(sample.src_ids)
        memory = self.build_memory(t_enc, sample.context, mode)
        return self.greedy_decode(memory, max_len)

    # -- serialization --------------------------------------------------------

    def config_dict(self) -> dict:
        return {
            "layers": self.cfg.layers,
            "d_h": self.cfg.d_h,
            "ffn": self.cfg.ffn,
            "heads": self.cfg.heads,
            "dropout": self.cfg.dropout,
            "max_src_len": self.cfg.max_src_len,
            "max_tgt_len": self.cfg.max_tgt_len,
            "src_vocab": self.cfg.src_vocab,
            "tgt_vocab": self.cfg.tgt_vocab,
            "k": self.sel_cfg.k,
            "lambda": self.sel_cfg.lam,
            "soft_weighting": self.sel_cfg.soft_weighting,
            "ev": self.ev,
            "rattn_heads": self.rattn_heads,
        }

    @classmethod
    def from_config_dict(cls, d: dict) -> "Translator":
        try:
            cfg = ModelConfig(
                layers=int(d["layers"]),
                d_h=int(d["d_h"]),
                ffn=int(d["ffn"]),
                heads=int(d["heads"]),
                dropout=float(d["dropout"]),
                max_src_len=int(d["max_src_len"]),
                max_tgt_len=int(d["max_tgt_len"]),
                src_vocab=int(d["src_vocab"]),
                tgt_vocab=int(d["tgt_vocab"]),
            )
            sel_cfg = SelectorConfig(
                k=int(d["k"]),
                lam=float(d["lambda"]),
                soft_weighting=bool(d["soft_weighting"]),
            )
            ev = int(d["ev"])
            heads = int(d.get("rattn_heads", 1))
        except KeyError as exc:
            raise DataError(f"checkpoint config is missing field {exc}") from exc
        return cls(cfg, sel_cfg, ev, rattn_heads=heads)
