"""Training loop: token-budget batching, warmup schedule, early stopping.

Batches are packed once from length-sorted samples; every epoch visits the
same batches in a freshly permuted order. All randomness (batch order,
dropout) derives from the single seed in the config, so two runs with the
same seed produce bit-identical parameter trajectories.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .dataio import SubtitleRecord, Vocabulary, save_checkpoint
from .errors import ConfigError, DataError, NumericError
from .model import PipelineMode, TrainSample, Translator
from .optim import OptimizerState, ScheduleConfig, lr_at_step, optimizer_step
from .retrieval import (
    FusionConfig,
    GlobalContextSet,
    build_global_set,
    build_index,
    grids_from_features,
)


@dataclass
class TrainConfig:
    peak_lr: float = 0.001
    warmup_steps: int = 4000
    batch_tokens: int = 512
    max_steps: int = 20000
    eval_every: int = 200
    patience: int = 5
    label_smoothing: float = 0.1
    seed: int = 0
    log_path: Optional[str] = None
    checkpoint_path: Optional[str] = None
    checkpoint_extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.batch_tokens < 1:
            raise ConfigError(f"batch_tokens must be positive, got {self.batch_tokens}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be positive, got {self.max_steps}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be positive, got {self.eval_every}")
        if self.patience < 1:
            raise ConfigError(f"patience must be positive, got {self.patience}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(
                f"label_smoothing must be in [0, 1), got {self.label_smoothing}"
            )


@dataclass
class TrainResult:
    steps: int
    best_val_loss: float
    final_train_loss: float
    stopped_early: bool
    history: List[dict]


def build_samples(
    records: Sequence[SubtitleRecord],
    features_by_video: dict,
    embeddings_by_video: dict,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    fusion_cfg: FusionConfig,
    p: int,
    use_gr: bool = True,
) -> List[TrainSample]:
    """Attach a context set to every record.

    With retrieval on, each sample gets the top-P neighbor-fused segments of
    its own video. With it off, the context is the sample's own raw grid and
    nothing else.
    """
    prepared = {}
    for vid in sorted(features_by_video):
        grids = grids_from_features(features_by_video[vid])
        index = None
        if use_gr:
            if vid not in embeddings_by_video:
                raise DataError(f"no retrieval embeddings for video {vid!r}")
            index = build_index(embeddings_by_video[vid])
        prepared[vid] = (grids, index)

    samples = []
    for rec in records:
        if rec.video_id not in prepared:
            raise DataError(f"no features for video {rec.video_id!r}")
        grids, index = prepared[rec.video_id]
        if rec.seg_idx >= len(grids):
            raise DataError(
                f"segment {rec.video_id}:{rec.seg_idx} has no feature grid"
            )
        if use_gr:
            ctx = build_global_set(index, grids, rec.seg_idx, p, fusion_cfg)
        else:
            ctx = GlobalContextSet(
                rec.seg_idx, [rec.seg_idx], [np.array(grids[rec.seg_idx])]
            )
        samples.append(
            TrainSample(
                video_id=rec.video_id,
                seg_idx=rec.seg_idx,
                src_ids=src_vocab.encode(rec.source),
                tgt_ids=tgt_vocab.encode(rec.target),
                context=ctx,
            )
        )
    return samples


def sample_cost(s: TrainSample) -> int:
    # source plus target plus the EOS position the loss covers
    return len(s.src_ids) + len(s.tgt_ids) + 1


def pack_batches(
    samples: Sequence[TrainSample], budget: int
) -> List[List[TrainSample]]:
    """Greedy packing of length-sorted samples; a batch never exceeds the
    token budget unless a single sample is already over it."""
    if budget < 1:
        raise ConfigError(f"token budget must be positive, got {budget}")
    if not samples:
        raise DataError("no samples to batch")
    order = sorted(range(len(samples)), key=lambda i: (sample_cost(samples[i]), i))
    batches: List[List[TrainSample]] = []
    cur: List[TrainSample] = []
    cur_cost = 0
    for i in order:
        c = sample_cost(samples[i])
        if cur and cur_cost + c > budget:
            batches.append(cur)
            cur = []
            cur_cost = 0
        cur.append(samples[i])
        cur_cost += c
    if cur:
        batches.append(cur)
    return batches


def validation_loss(
    model: Translator,
    samples: Sequence[TrainSample],
    mode: PipelineMode,
    label_smoothing: float,
) -> float:
    """Token-weighted mean loss over the whole set, dropout off."""
    if not samples:
        raise DataError("empty validation set")
    total = 0.0
    tokens = 0
    for s in samples:
        loss, n = model.sample_loss(s, mode, label_smoothing, train=False)
        total += loss.item() * n
        tokens += n
    return total / tokens


def train(
    model: Translator,
    train_samples: Sequence[TrainSample],
    val_samples: Sequence[TrainSample],
    cfg: TrainConfig,
    mode: PipelineMode = PipelineMode(),
    opt_state: Optional[OptimizerState] = None,
) -> TrainResult:
    """Optimize in place; the model ends up holding the best-validation weights.

    Raises NumericError naming the step if the training loss ever goes
    non-finite. Writes one CSV row per step when ``cfg.log_path`` is set
    (``val_loss`` is blank except on validation steps) and a checkpoint with
    optimizer moments when ``cfg.checkpoint_path`` is set.
    """
    batches = pack_batches(train_samples, cfg.batch_tokens)
    schedule = ScheduleConfig(peak_lr=cfg.peak_lr, warmup_steps=cfg.warmup_steps)
    if opt_state is None:
        opt_state = OptimizerState()
    batch_rng = np.random.default_rng([cfg.seed, 0])
    drop_rng = np.random.default_rng([cfg.seed, 1])

    history: List[dict] = []
    best_val = float("inf")
    best_state: Optional[Dict[str, np.ndarray]] = None
    stale = 0
    stopped_early = False
    step = 0
    last_train = float("nan")

    while step < cfg.max_steps and not stopped_early:
        for bi in batch_rng.permutation(len(batches)):
            if step >= cfg.max_steps:
                break
            step += 1
            model.zero_grad()
            loss = model.forward_loss(
                batches[int(bi)], mode, cfg.label_smoothing, train=True, rng=drop_rng
            )
            last_train = loss.item()
            if not np.isfinite(last_train):
                raise NumericError(f"non-finite training loss at step {step}")
            T.backward(loss)
            lr = lr_at_step(schedule, step)
            grads = {
                name: t.grad for name, t in model.params.items() if t.grad is not None
            }
            optimizer_step(model.params, grads, opt_state, lr)

            row = {"step": step, "lr": lr, "train_loss": last_train, "val_loss": ""}
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                val = validation_loss(model, val_samples, mode, cfg.label_smoothing)
                row["val_loss"] = val
                if val < best_val:
                    best_val = val
                    best_state = {k: v.copy() for k, v in model.state_arrays().items()}
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        stopped_early = True
            history.append(row)
            if stopped_early:
                break

    if best_state is not None:
        model.load_state(best_state)
    if best_val == float("inf"):
        best_val = validation_loss(model, val_samples, mode, cfg.label_smoothing)

    if cfg.log_path is not None:
        with open(cfg.log_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["step", "lr", "train_loss", "val_loss"]
            )
            writer.writeheader()
            writer.writerows(history)

    if cfg.checkpoint_path is not None:
        save_model(cfg.checkpoint_path, model, cfg.checkpoint_extra, opt_state, step)

    return TrainResult(
        steps=step,
        best_val_loss=best_val,
        final_train_loss=last_train,
        stopped_early=stopped_early,
        history=history,
    )


def save_model(
    path: str,
    model: Translator,
    extra: dict,
    opt_state: Optional[OptimizerState] = None,
    step: int = 0,
) -> None:
    """Write a checkpoint: model config plus extras in the JSON block,
    parameters and (when given) optimizer moments as named tensors."""
    config = dict(model.config_dict())
    for k, v in extra.items():
        config[k] = v
    tensors = {name: t.data for name, t in model.params.items()}
    if opt_state is not None:
        config["opt_step"] = opt_state.step
        for name, m in opt_state.first_moment.items():
            tensors[f"opt.m.{name}"] = m
        for name, v in opt_state.second_moment.items():
            tensors[f"opt.v.{name}"] = v
    config["trained_steps"] = step
    save_checkpoint(path, config, tensors)


def load_model(path: str):
    """Rebuild a Translator from a checkpoint. Returns (model, config dict)."""
    from .dataio import load_checkpoint

    config, tensors = load_checkpoint(path)
    model = Translator.from_config_dict(config)
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    model.load_state(params)
    return model, config
