"""Memorization probe: can the desk-size model drive a small corpus to
near-perfect BLEU? A quick end-to-end health check for the whole training
stack; if this stalls, nothing larger is worth running.

    python3 scripts/overfit_check.py --steps 1200 --samples 100
"""

import argparse
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

import numpy as np

from gvmt.dataio import BOS_ID, EOS_ID, PAD_ID, Vocabulary
from gvmt.metrics import bleu4
from gvmt.model import ModelConfig, PipelineMode, Translator
from gvmt.retrieval import FusionConfig
from gvmt.selector import SelectorConfig
from gvmt.synthetic import (
    GenConfig,
    generate,
    source_token_inventory,
    target_token_inventory,
)
from gvmt.train import TrainConfig, build_samples, train

RESERVED = (PAD_ID, BOS_ID, EOS_ID)


def main() -> int:
    ap = argparse.ArgumentParser(description="overfit a small synthetic corpus")
    ap.add_argument("--samples", type=int, default=100)
    ap.add_argument("--steps", type=int, default=1200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    t0 = time.time()
    g = generate(GenConfig(seed=500 + args.seed))
    sv = Vocabulary.build([source_token_inventory(g.cfg)])
    tv = Vocabulary.build([target_token_inventory(g.cfg)])
    samples = build_samples(
        g.records, g.features, g.embeddings, sv, tv,
        FusionConfig(w=2, gamma=0.1), p=10, use_gr=True,
    )[: args.samples]

    cfg = ModelConfig(
        layers=2, d_h=32, ffn=64, heads=4, dropout=0.1,
        max_src_len=16, max_tgt_len=16, src_vocab=len(sv), tgt_vocab=len(tv),
    )
    model = Translator(
        cfg,
        SelectorConfig(k=5, lam=0.1, soft_weighting=True),
        ev=16,
        rattn_heads=2,
        rng=np.random.default_rng(args.seed),
    )
    tcfg = TrainConfig(
        peak_lr=1e-2, warmup_steps=200, batch_tokens=512,
        max_steps=args.steps, eval_every=100, patience=1000,
        label_smoothing=0.1, seed=args.seed,
    )
    res = train(model, samples, samples, tcfg)

    mode = PipelineMode()
    strip = lambda ids: tv.decode([i for i in ids if i not in RESERVED])
    cands, refs, exact = [], [], 0
    for s in samples:
        out = strip(model.translate(s, mode, max_len=8))
        want = strip(s.tgt_ids)
        cands.append(out)
        refs.append(want)
        exact += int(out == want)
    rep = bleu4(cands, refs)

    print(
        f"seed={args.seed} steps={res.steps} "
        f"train_loss={res.final_train_loss:.4f} "
        f"bleu={rep.bleu:.4f} exact_match={exact / len(samples):.2f} "
        f"({time.time() - t0:.0f}s)"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
