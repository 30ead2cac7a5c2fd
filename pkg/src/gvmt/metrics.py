"""Corpus-level 4-gram BLEU and the planted-ambiguity accuracy metric."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import DataError


@dataclass
class BleuReport:
    bleu: float
    precisions: list = field(default_factory=list)  # p1..p4
    brevity_penalty: float = 1.0
    candidate_len: int = 0
    reference_len: int = 0

    def as_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": list(self.precisions),
            "brevity_penalty": self.brevity_penalty,
            "candidate_len": self.candidate_len,
            "reference_len": self.reference_len,
        }


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> BleuReport:
    """Corpus BLEU with clipped modified precision and brevity penalty.

    No smoothing: any order with candidate n-grams but zero matches drives the
    score to 0.  Orders beyond the longest candidate (zero n-grams corpus-wide)
    are vacuous; they are reported as 0 and excluded from the geometric mean,
    which keeps bleu(c, c) = 1 even for candidates shorter than 4 tokens.
    """
    if not candidates:
        raise DataError("bleu4 of an empty candidate list")
    if len(candidates) != len(references):
        raise DataError(
            f"candidate/reference count mismatch: {len(candidates)} vs {len(references)}"
        )
    for i, ref in enumerate(references):
        if not ref:
            raise DataError(f"empty reference at position {i}")

    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, 5):
            cn = _ngrams(cand, n)
            rn = _ngrams(ref, n)
            totals[n - 1] += sum(cn.values())
            matches[n - 1] += sum(min(c, rn[g]) for g, c in cn.items())

    precisions = [m / t if t > 0 else 0.0 for m, t in zip(matches, totals)]
    if cand_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - ref_len / cand_len))

    active = [p for p, t in zip(precisions, totals) if t > 0]
    if not active or any(p == 0.0 for p in active):
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in active) / len(active))
    return BleuReport(
        bleu=score,
        precisions=precisions,
        brevity_penalty=bp,
        candidate_len=cand_len,
        reference_len=ref_len,
    )


def disambiguation_accuracy(decodes: Mapping, labels: Sequence) -> float:
    """Fraction of ambiguous samples whose decode realizes the gold form.

    ``decodes`` maps (video_id, seg_idx) to a token list; each label carries
    video_id, seg_idx, gold, and distractor attributes.  A decode counts as
    correct only when the gold form appears and the distractor does not.
    """
    if not labels:
        raise DataError("no labels: split contains no ambiguous samples")
    hits = 0
    for lab in labels:
        key = (lab.video_id, lab.seg_idx)
        if key not in decodes:
            raise DataError(f"no decode for labelled sample {key}")
        toks = list(decodes[key])
        hits += int(lab.gold in toks and lab.distractor not in toks)
    return hits / len(labels)
