"""Command line front end for the whole pipeline.

Subcommands cover synthetic data generation, retrieval queries, training,
translation, evaluation, and the ablation/sweep harness.  Every command
resolves a single flat RunConfig (desk-scale defaults, ``--paper-config``
for the full-size values, ``--config file.json`` and individual flags to
override) and echoes it into whatever artifact it produces.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

import os


def _cap_threads() -> None:
    # GVMT_THREADS caps BLAS pools; must land in the environment before
    # numpy first loads, hence this runs at import time, pre-import.
    cap = os.environ.get("GVMT_THREADS")
    if cap and cap.strip().isdigit():
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, cap.strip())


_cap_threads()

import argparse
import csv
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataio import BOS_ID, EOS_ID, PAD_ID, Vocabulary, tokenize
from .errors import ConfigError, DataError, NumericError
from .metrics import bleu4, disambiguation_accuracy
from .model import ModelConfig, PipelineMode, Translator
from .retrieval import FusionConfig, build_index, retrieve_top_p, similarity_row
from .selector import SelectorConfig
from .synthetic import GenConfig, audit_summary, generate, load_dataset, write_dataset
from .train import TrainConfig, build_samples, load_model, train


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Every hyperparameter of a run, flat.  Defaults are the full-size
    values; ``desk()`` shrinks the model and schedule so a complete
    train/eval cycle fits in minutes on one core."""

    p: int = 10
    w: int = 2
    gamma: float = 0.1
    k: int = 5
    lam: float = 0.1  # serialized under the key "lambda"
    layers: int = 4
    d_h: int = 128
    ffn: int = 256
    heads: int = 8
    rattn_heads: int = 8
    dropout: float = 0.35
    label_smoothing: float = 0.1
    peak_lr: float = 0.001
    warmup: int = 4000
    batch_tokens: int = 4096
    max_steps: int = 20000
    eval_every: int = 1000
    patience: int = 10
    max_src_len: int = 64
    max_tgt_len: int = 64
    soft_weighting: bool = True
    seed: int = 0

    @classmethod
    def desk(cls) -> "RunConfig":
        return cls(
            layers=2,
            d_h=32,
            ffn=64,
            heads=4,
            rattn_heads=2,
            dropout=0.1,
            peak_lr=0.01,
            warmup=200,
            batch_tokens=512,
            max_steps=2000,
            eval_every=100,
            patience=10,
        )

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d


_RC_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}
_RC_JSON_KEYS = (_RC_FIELDS - {"lam"}) | {"lambda"}


def rc_from_dict(d: dict, base: RunConfig) -> RunConfig:
    """Overlay a flat JSON mapping onto ``base``; unknown keys are errors."""
    unknown = set(d) - _RC_JSON_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kv = {("lam" if k == "lambda" else k): v for k, v in d.items()}
    try:
        return replace(base, **kv)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


_OVERRIDE_FLAGS = ("p", "w", "gamma", "k", "lam", "seed")


def resolve_run_config(args: argparse.Namespace) -> RunConfig:
    """defaults < --paper-config < --config file < explicit flags."""
    rc = RunConfig() if getattr(args, "paper_config", False) else RunConfig.desk()
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a flat JSON object")
        rc = rc_from_dict(loaded, rc)
    overrides = {
        name: getattr(args, name)
        for name in _OVERRIDE_FLAGS
        if getattr(args, name, None) is not None
    }
    if overrides:
        rc = replace(rc, **overrides)
    return rc


def resolve_mode(args: argparse.Namespace) -> PipelineMode:
    flags = [
        name
        for name in ("no_gr", "no_tvss", "no_both")
        if getattr(args, name, False)
    ]
    if len(flags) > 1:
        pretty = ", ".join("--" + f.replace("_", "-") for f in flags)
        raise ConfigError(f"contradictory ablation flags: {pretty}")
    if not flags:
        return PipelineMode()
    name = flags[0]
    return PipelineMode(
        use_gr=name == "no_tvss",
        use_tvss=name == "no_gr",
    )


MODE_BY_NAME = {
    "full": PipelineMode(),
    "no_gr": PipelineMode(use_gr=False),
    "no_tvss": PipelineMode(use_tvss=False),
    "no_both": PipelineMode(use_gr=False, use_tvss=False),
    "text_only": PipelineMode(text_only=True),
}


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def strip_reserved(ids: Sequence[int]) -> List[int]:
    return [i for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID)]


def _load_split(root) -> tuple:
    records, features, embeddings, labels, manifest = load_dataset(root)
    if not features:
        raise DataError(f"dataset under {root} has no region features")
    return records, features, embeddings, labels, manifest


def _ev_of(features: Dict) -> int:
    first_video = next(iter(features.values()))
    return int(first_video[0].regions.shape[1])


def _vocabs(records) -> Tuple[Vocabulary, Vocabulary]:
    src = Vocabulary.build([r.source for r in records])
    tgt = Vocabulary.build([r.target for r in records])
    return src, tgt


def _make_model(rc: RunConfig, ev: int, n_src: int, n_tgt: int) -> Translator:
    mcfg = ModelConfig(
        layers=rc.layers,
        d_h=rc.d_h,
        ffn=rc.ffn,
        heads=rc.heads,
        dropout=rc.dropout,
        max_src_len=rc.max_src_len,
        max_tgt_len=rc.max_tgt_len,
        src_vocab=n_src,
        tgt_vocab=n_tgt,
    )
    sel = SelectorConfig(k=rc.k, lam=rc.lam, soft_weighting=rc.soft_weighting)
    return Translator(
        mcfg, sel, ev=ev, rattn_heads=rc.rattn_heads, rng=np.random.default_rng(rc.seed)
    )


def _train_config(rc: RunConfig, log_path=None, ckpt_path=None, extra=None) -> TrainConfig:
    return TrainConfig(
        peak_lr=rc.peak_lr,
        warmup_steps=rc.warmup,
        batch_tokens=rc.batch_tokens,
        max_steps=rc.max_steps,
        eval_every=rc.eval_every,
        patience=rc.patience,
        label_smoothing=rc.label_smoothing,
        seed=rc.seed,
        log_path=log_path,
        checkpoint_path=ckpt_path,
        checkpoint_extra=extra or {},
    )


def _samples_for(split, src_vocab, tgt_vocab, rc: RunConfig, use_gr: bool):
    records, features, embeddings = split[0], split[1], split[2]
    fusion = FusionConfig(w=rc.w, gamma=rc.gamma)
    return build_samples(
        records, features, embeddings, src_vocab, tgt_vocab, fusion, p=rc.p, use_gr=use_gr
    )


def _decode_split(model, samples, tgt_vocab, mode, max_len) -> Dict[tuple, List[str]]:
    out = {}
    for s in samples:
        ids = model.translate(s, mode, max_len=max_len)
        out[(s.video_id, s.seg_idx)] = tgt_vocab.decode(strip_reserved(ids))
    return out


def _references(samples, tgt_vocab) -> Dict[tuple, List[str]]:
    return {
        (s.video_id, s.seg_idx): tgt_vocab.decode(strip_reserved(s.tgt_ids))
        for s in samples
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = GenConfig(
        n_videos=args.videos,
        segs_per_video=args.segs,
        ambiguity_rate=args.ambiguity_rate,
        topics=args.topics,
        ev=args.ev,
        regions=args.regions,
        emb_dim=args.emb_dim,
        fillers=args.fillers,
        beacon=args.beacon,
        sense=args.sense,
        min_marker_distance=args.min_marker_distance,
        seed=args.seed if args.seed is not None else 0,
    )
    data = generate(cfg)
    write_dataset(data, args.out)
    report = dict(audit_summary(data))
    report["out"] = str(args.out)
    _emit(report)
    return 0


def cmd_retrieve(args) -> int:
    rc = resolve_run_config(args)
    _, features, embeddings, _, _ = _load_split(args.data)
    if args.video not in embeddings:
        raise DataError(f"unknown video {args.video!r}")
    index = build_index(embeddings[args.video])
    indices = retrieve_top_p(index, args.seg, rc.p)
    sims = similarity_row(index, args.seg)
    _emit(
        {
            "video": args.video,
            "seg": args.seg,
            "indices": indices,
            "scores": {str(i): float(sims[i]) for i in indices},
            "run_config": rc.to_json_dict(),
        }
    )
    return 0


def cmd_train(args) -> int:
    rc = resolve_run_config(args)
    mode = resolve_mode(args)
    train_split = _load_split(args.data)
    val_split = _load_split(args.val) if args.val else train_split
    src_vocab, tgt_vocab = _vocabs(train_split[0])
    tr = _samples_for(train_split, src_vocab, tgt_vocab, rc, mode.use_gr)
    va = _samples_for(val_split, src_vocab, tgt_vocab, rc, mode.use_gr)
    model = _make_model(rc, _ev_of(train_split[1]), len(src_vocab), len(tgt_vocab))
    extra = {
        "run_config": rc.to_json_dict(),
        "pipeline_mode": mode.name,
        "src_tokens": src_vocab.id_to_token,
        "tgt_tokens": tgt_vocab.id_to_token,
    }
    tcfg = _train_config(rc, log_path=args.log, ckpt_path=args.ckpt, extra=extra)
    result = train(model, tr, va, tcfg, mode=mode)
    _emit(
        {
            "checkpoint": str(args.ckpt),
            "steps": result.steps,
            "best_val_loss": result.best_val_loss,
            "final_train_loss": result.final_train_loss,
            "stopped_early": result.stopped_early,
            "mode": mode.name,
            "run_config": rc.to_json_dict(),
        }
    )
    return 0


def _restore(ckpt_path) -> tuple:
    model, cfg = load_model(ckpt_path)
    try:
        rc = rc_from_dict(cfg["run_config"], RunConfig())
        mode = MODE_BY_NAME[cfg["pipeline_mode"]]
        src_vocab = Vocabulary(list(cfg["src_tokens"]))
        tgt_vocab = Vocabulary(list(cfg["tgt_tokens"]))
    except KeyError as exc:
        raise DataError(f"checkpoint {ckpt_path} lacks field {exc}") from exc
    return model, rc, mode, src_vocab, tgt_vocab


def cmd_translate(args) -> int:
    model, rc, mode, src_vocab, tgt_vocab = _restore(args.ckpt)
    split = _load_split(args.data)
    samples = _samples_for(split, src_vocab, tgt_vocab, rc, mode.use_gr)
    max_len = args.max_len if args.max_len is not None else rc.max_tgt_len
    decodes = _decode_split(model, samples, tgt_vocab, mode, max_len)
    payload = {
        "run_config": rc.to_json_dict(),
        "mode": mode.name,
        "decodes": [
            {"video": v, "seg": s, "text": " ".join(toks)}
            for (v, s), toks in sorted(decodes.items())
        ],
    }
    with open(args.out, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    _emit({"out": str(args.out), "n_decodes": len(decodes), "mode": mode.name})
    return 0


def _read_lines(path) -> List[List[str]]:
    try:
        with open(path) as fh:
            return [tokenize(line) for line in fh.read().splitlines()]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def cmd_eval(args) -> int:
    file_mode = args.cand is not None or args.ref is not None
    ckpt_mode = args.ckpt is not None or args.data is not None
    if file_mode and ckpt_mode:
        raise ConfigError("--cand/--ref and --ckpt/--data are mutually exclusive")
    if file_mode:
        if args.cand is None or args.ref is None:
            raise ConfigError("file evaluation needs both --cand and --ref")
        report = bleu4(_read_lines(args.cand), _read_lines(args.ref))
        _emit({"bleu": report.as_dict()})
        return 0
    if args.ckpt is None or args.data is None:
        raise ConfigError("checkpoint evaluation needs both --ckpt and --data")
    model, rc, mode, src_vocab, tgt_vocab = _restore(args.ckpt)
    split = _load_split(args.data)
    labels = split[3]
    samples = _samples_for(split, src_vocab, tgt_vocab, rc, mode.use_gr)
    max_len = args.max_len if args.max_len is not None else rc.max_tgt_len
    decodes = _decode_split(model, samples, tgt_vocab, mode, max_len)
    refs = _references(samples, tgt_vocab)
    keys = sorted(decodes)
    report = bleu4([decodes[k] for k in keys], [refs[k] for k in keys])
    acc = disambiguation_accuracy(decodes, labels) if labels else None
    _emit(
        {
            "bleu": report.as_dict(),
            "disambiguation_accuracy": acc,
            "n_samples": len(samples),
            "mode": mode.name,
            "run_config": rc.to_json_dict(),
        }
    )
    return 0


# ---------------------------------------------------------------------------
# ablation / sweep harness
# ---------------------------------------------------------------------------

SWEEP_GRID = {"p": [5, 10, 20], "w": [1, 2, 3, 4, 5], "k": [3, 4, 5, 6, 7, 10]}

ABLATION_MODES = ("full", "no_gr", "no_tvss", "no_both")


def run_setting(
    splits: dict,
    rc: RunConfig,
    mode: PipelineMode,
    setting: str,
) -> dict:
    """Train one model from scratch and score it on the test split."""
    began = time.time()
    src_vocab, tgt_vocab = _vocabs(splits["train"][0])
    tr = _samples_for(splits["train"], src_vocab, tgt_vocab, rc, mode.use_gr)
    va = _samples_for(splits["val"], src_vocab, tgt_vocab, rc, mode.use_gr)
    te = _samples_for(splits["test"], src_vocab, tgt_vocab, rc, mode.use_gr)
    model = _make_model(rc, _ev_of(splits["train"][1]), len(src_vocab), len(tgt_vocab))
    result = train(model, tr, va, _train_config(rc), mode=mode)
    decodes = _decode_split(model, te, tgt_vocab, mode, rc.max_tgt_len)
    refs = _references(te, tgt_vocab)
    keys = sorted(decodes)
    report = bleu4([decodes[k] for k in keys], [refs[k] for k in keys])
    labels = splits["test"][3]
    acc = disambiguation_accuracy(decodes, labels) if labels else None
    return {
        "setting": setting,
        "seed": rc.seed,
        "accuracy": acc,
        "bleu": report.bleu,
        "val_loss": result.best_val_loss,
        "steps": result.steps,
        "seconds": round(time.time() - began, 1),
    }


def _mean_rows(rows: List[dict]) -> List[dict]:
    by_setting: Dict[str, List[dict]] = {}
    for row in rows:
        by_setting.setdefault(row["setting"], []).append(row)
    out = []
    for setting, group in by_setting.items():
        if len(group) < 2:
            continue
        accs = [r["accuracy"] for r in group if r["accuracy"] is not None]
        out.append(
            {
                "setting": setting,
                "seed": "mean",
                "accuracy": sum(accs) / len(accs) if accs else None,
                "bleu": sum(r["bleu"] for r in group) / len(group),
                "val_loss": sum(r["val_loss"] for r in group) / len(group),
                "steps": max(r["steps"] for r in group),
                "seconds": round(sum(r["seconds"] for r in group), 1),
            }
        )
    return out


def _parse_sweep(text: str) -> List[str]:
    axes = []
    for raw in text.split(","):
        axis = raw.strip().lower()
        if axis not in SWEEP_GRID:
            raise ConfigError(
                f"unknown sweep axis {raw!r}; choose from {sorted(SWEEP_GRID)}"
            )
        if axis not in axes:
            axes.append(axis)
    if not axes:
        raise ConfigError("empty sweep axis list")
    return axes


def _write_rows(path, rows: List[dict]) -> None:
    columns = ["setting", "seed", "accuracy", "bleu", "val_loss", "steps", "seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            clean = dict(row)
            if clean["accuracy"] is None:
                clean["accuracy"] = ""
            writer.writerow(clean)


def cmd_ablate(args) -> int:
    rc = resolve_run_config(args)
    ablation_flags = [
        n for n in ("no_gr", "no_tvss", "no_both") if getattr(args, n, False)
    ]
    if len(ablation_flags) > 1:
        pretty = ", ".join("--" + f.replace("_", "-") for f in ablation_flags)
        raise ConfigError(f"contradictory ablation flags: {pretty}")
    if args.sweep and ablation_flags:
        raise ConfigError("--sweep cannot be combined with ablation flags")

    root = Path(args.data)
    splits = {}
    for name in ("train", "val", "test"):
        sub = root / name
        if not sub.is_dir():
            raise DataError(f"ablation data root needs a {name}/ split, missing {sub}")
        splits[name] = _load_split(sub)

    rows: List[dict] = []
    if args.sweep:
        axes = _parse_sweep(args.sweep)
        rows.append(run_setting(splits, rc, MODE_BY_NAME["full"], "full"))
        for axis in axes:
            for value in SWEEP_GRID[axis]:
                rc_v = replace(rc, **{axis: value})
                rows.append(
                    run_setting(splits, rc_v, MODE_BY_NAME["full"], f"{axis}={value}")
                )
    else:
        settings = (
            ("full",) + tuple(ablation_flags) if ablation_flags else ABLATION_MODES
        )
        for j in range(args.seeds):
            rc_j = replace(rc, seed=rc.seed + j)
            for setting in settings:
                rows.append(run_setting(splits, rc_j, MODE_BY_NAME[setting], setting))
        rows.extend(_mean_rows(rows))

    _write_rows(args.out, rows)
    _emit({"out": str(args.out), "rows": len(rows), "run_config": rc.to_json_dict()})
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--p", type=int, default=None, help="retrieval size P")
    sub.add_argument("--w", type=int, default=None, help="fusion window")
    sub.add_argument("--gamma", type=float, default=None, help="neighbor fusion weight")
    sub.add_argument("--k", type=int, default=None, help="selection count K")
    sub.add_argument("--lambda", dest="lam", type=float, default=None,
                     help="unselected absorption weight")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--config", default=None, metavar="FILE",
                     help="flat JSON overriding the profile defaults")
    sub.add_argument("--paper-config", action="store_true",
                     help="start from the full-size profile instead of desk scale")


def _add_mode_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--no-gr", action="store_true",
                     help="use only the locally aligned segment")
    sub.add_argument("--no-tvss", action="store_true",
                     help="skip selection, pass all retrieved segments")
    sub.add_argument("--no-both", action="store_true",
                     help="both reductions at once")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gvmt",
        description="video-guided translation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--videos", type=int, default=24)
    gen.add_argument("--segs", type=int, default=12)
    gen.add_argument("--ambiguity-rate", type=float, default=1.0 / 3.0)
    gen.add_argument("--topics", type=int, default=6)
    gen.add_argument("--ev", type=int, default=16)
    gen.add_argument("--regions", type=int, default=4)
    gen.add_argument("--emb-dim", type=int, default=16)
    gen.add_argument("--fillers", type=int, default=12)
    gen.add_argument("--beacon", type=float, default=1.0)
    gen.add_argument("--sense", type=float, default=1.0)
    gen.add_argument("--min-marker-distance", type=int, default=3)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_gen)

    ret = sub.add_parser("retrieve", help="query the per-video retrieval index")
    ret.add_argument("--data", required=True)
    ret.add_argument("--video", required=True)
    ret.add_argument("--seg", type=int, required=True)
    _add_config_flags(ret)
    ret.set_defaults(func=cmd_retrieve)

    tr = sub.add_parser("train", help="train a model, write a checkpoint")
    tr.add_argument("--data", required=True)
    tr.add_argument("--val", default=None)
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--log", default=None, help="CSV training log path")
    _add_config_flags(tr)
    _add_mode_flags(tr)
    tr.set_defaults(func=cmd_train)

    tl = sub.add_parser("translate", help="greedy-decode a split")
    tl.add_argument("--ckpt", required=True)
    tl.add_argument("--data", required=True)
    tl.add_argument("--out", required=True)
    tl.add_argument("--max-len", type=int, default=None)
    tl.set_defaults(func=cmd_translate)

    ev = sub.add_parser("eval", help="score decodes or a checkpoint")
    ev.add_argument("--cand", default=None, help="candidate text file")
    ev.add_argument("--ref", default=None, help="reference text file")
    ev.add_argument("--ckpt", default=None)
    ev.add_argument("--data", default=None)
    ev.add_argument("--max-len", type=int, default=None)
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="ablation table or hyperparameter sweep")
    ab.add_argument("--data", required=True,
                    help="root with train/ val/ test/ dataset splits")
    ab.add_argument("--out", required=True, help="CSV output path")
    ab.add_argument("--seeds", type=int, default=3)
    ab.add_argument("--sweep", default=None, metavar="AXES",
                    help="comma list from {p,w,k}; sweeps one axis at a time")
    _add_config_flags(ab)
    _add_mode_flags(ab)
    ab.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        # library range guards surface as ValueError; at the boundary both
        # mean the invocation was invalid
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
