"""Text-quality, explainability and recommendation metrics."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


def _check_pairs(candidates, references) -> None:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates but {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus BLEU with one reference per candidate.

    An order above 1 whose clipped match count is zero gets add-one smoothing
    on both numerator and denominator; unigram precision is never smoothed.
    """
    _check_pairs(candidates, references)
    if max_n < 1:
        raise ValueError("max_n must be at least 1")
    log_p = 0.0
    for n in range(1, max_n + 1):
        match = total = 0
        for c, r in zip(candidates, references):
            cc, rc = _ngrams(c, n), _ngrams(r, n)
            match += sum(min(v, rc[g]) for g, v in cc.items())
            total += sum(cc.values())
        if n > 1 and match == 0:
            match, total = match + 1, total + 1
        if match == 0:
            return 0.0
        log_p += math.log(match / total)
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return 0.0
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p / max_n)


def rouge_n(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
            n: int = 1) -> tuple[float, float, float]:
    """Mean per-pair clipped n-gram precision, recall and F1.

    A pair where neither side has any n-gram counts as a perfect match.
    """
    _check_pairs(candidates, references)
    ps, rs, fs = [], [], []
    for c, r in zip(candidates, references):
        cc, rc = _ngrams(c, n), _ngrams(r, n)
        nc, nr = sum(cc.values()), sum(rc.values())
        if nc == 0 and nr == 0:
            p = rec = 1.0
        else:
            overlap = sum(min(v, rc[g]) for g, v in cc.items())
            p = overlap / nc if nc else 0.0
            rec = overlap / nr if nr else 0.0
        ps.append(p)
        rs.append(rec)
        fs.append(2 * p * rec / (p + rec) if p + rec > 0 else 0.0)
    return float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs))


def usr(explanations: Sequence[Sequence[str]]) -> float:
    """Unique sentence ratio."""
    if not explanations:
        raise ValueError("empty list")
    return len({" ".join(e) for e in explanations}) / len(explanations)


def _features_in(tokens, features) -> set[str]:
    toks = {t.lower() for t in tokens}
    return {f.lower() for f in features if f.lower() in toks}


def fmr(explanations: Sequence[Sequence[str]], features: Sequence[Sequence[str]]) -> float:
    """Share of explanations mentioning at least one of their own features."""
    if not explanations:
        raise ValueError("empty input")
    if len(explanations) != len(features):
        raise ValueError("explanations and feature lists differ in length")
    return sum(bool(_features_in(e, f)) for e, f in zip(explanations, features)) / len(explanations)


def fcr(explanations: Sequence[Sequence[str]], feature_set) -> float:
    """Share of the global feature set mentioned anywhere in the generations."""
    feature_set = {f.lower() for f in feature_set}
    if not feature_set:
        raise ValueError("empty feature set")
    seen: set[str] = set()
    for e in explanations:
        seen |= _features_in(e, feature_set)
    return len(seen) / len(feature_set)


def div(feature_sets: Sequence[set], threshold: int = 5000, n_samples: int = 10**6,
        seed: int = 0) -> float:
    """Mean pairwise overlap between per-generation feature sets (lower is more diverse).

    Above ``threshold`` generations the mean is estimated from ``n_samples``
    seeded random pairs.
    """
    N = len(feature_sets)
    if N < 2:
        raise ValueError("need at least two feature sets")
    sets = [frozenset(s) for s in feature_sets]
    if N <= threshold:
        # count pairs per feature: sum_{i<j} |A_i & A_j| = sum_f C(n_f, 2)
        counts = Counter(f for s in sets for f in s)
        shared = sum(c * (c - 1) // 2 for c in counts.values())
        return shared / (N * (N - 1) / 2)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, N, n_samples)
    j = rng.integers(0, N - 1, n_samples)
    j = j + (j >= i)
    return float(np.mean([len(sets[a] & sets[b]) for a, b in zip(i, j)]))


def mae_rmse(predicted, gold) -> tuple[float, float]:
    p = np.asarray(predicted, dtype=np.float64)
    g = np.asarray(gold, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty input")
    if p.shape != g.shape:
        raise ValueError(f"{p.size} predictions but {g.size} gold ratings")
    err = p - g
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


@dataclass
class MetricReport:
    bleu1: float
    bleu4: float
    rouge1_p: float
    rouge1_r: float
    rouge1_f: float
    rouge2_p: float
    rouge2_r: float
    rouge2_f: float
    usr: float
    fmr: float
    fcr: float
    div: float
    mae: float
    rmse: float

    LABELS = {"bleu1": "BLEU-1", "bleu4": "BLEU-4", "rouge1_p": "R1-P", "rouge1_r": "R1-R",
              "rouge1_f": "R1-F", "rouge2_p": "R2-P", "rouge2_r": "R2-R", "rouge2_f": "R2-F",
              "usr": "USR", "fmr": "FMR", "fcr": "FCR", "div": "DIV", "mae": "MAE", "rmse": "RMSE"}
    # shown as percentages in the table
    PERCENT = ("bleu1", "bleu4", "rouge1_p", "rouge1_r", "rouge1_f", "rouge2_p", "rouge2_r", "rouge2_f")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**{k: float(d[k]) for k in cls.__dataclass_fields__})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        names = list(self.LABELS)
        heads = [self.LABELS[k] for k in names]
        vals = [getattr(self, k) * (100 if k in self.PERCENT else 1) for k in names]
        cells = [f"{v:.2f}" for v in vals]
        widths = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        line1 = " | ".join(h.rjust(w) for h, w in zip(heads, widths))
        line2 = " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{line1}\n{line2}"


def evaluate(generated: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
             features: Sequence[Sequence[str]], raw_ratings, gold_ratings,
             feature_set=None, div_seed: int = 0) -> MetricReport:
    """The full metric suite for one prediction file against its gold split."""
    _check_pairs(generated, references)
    if feature_set is None:
        feature_set = {f for fs in features for f in fs}
    r1 = rouge_n(generated, references, 1)
    r2 = rouge_n(generated, references, 2)
    mae, rmse = mae_rmse(raw_ratings, gold_ratings)
    per_gen = [_features_in(g, feature_set) for g in generated]
    return MetricReport(
        bleu1=bleu(generated, references, 1), bleu4=bleu(generated, references, 4),
        rouge1_p=r1[0], rouge1_r=r1[1], rouge1_f=r1[2],
        rouge2_p=r2[0], rouge2_r=r2[1], rouge2_f=r2[2],
        usr=usr(generated), fmr=fmr(generated, features), fcr=fcr(generated, feature_set),
        div=div(per_gen, seed=div_seed) if len(generated) >= 2 else 0.0,
        mae=mae, rmse=rmse)
