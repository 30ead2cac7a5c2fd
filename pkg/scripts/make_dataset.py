"""Generate train/val/test splits of the synthetic disambiguation corpus.

Each split gets its own seed offset so the videos differ but share the
token inventories (the generator derives those from the config, not the
draw). Writes three subdirectories under --out and prints the audit line
for each.

Usage:
    python3 scripts/make_dataset.py --out data/run0 --seed 0
    python3 scripts/make_dataset.py --out data/hard --ambiguity-rate 1.0 --videos 24
"""

import argparse
import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from gvmt.synthetic import GenConfig, audit_summary, generate, write_dataset

SPLITS = (("train", 0, 1.0), ("val", 1000, 0.25), ("test", 2000, 0.5))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, help="directory for the three splits")
    ap.add_argument("--videos", type=int, default=24, help="train split size")
    ap.add_argument("--segs", type=int, default=12)
    ap.add_argument("--ambiguity-rate", type=float, default=1.0 / 3.0)
    ap.add_argument("--topics", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    root = pathlib.Path(args.out)
    for name, offset, frac in SPLITS:
        n = max(1, round(args.videos * frac))
        cfg = GenConfig(
            n_videos=n,
            segs_per_video=args.segs,
            ambiguity_rate=args.ambiguity_rate,
            topics=args.topics,
            seed=args.seed + offset,
        )
        data = generate(cfg)
        write_dataset(data, root / name)
        audit = audit_summary(data)
        print(f"{name}: {json.dumps(audit, sort_keys=True)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
