"""Trainable, reference-free coherence metric between a rating and its explanation.

A rating selects a sentence template, the explanation is appended, and a
small classifier decides whether the two agree. Scores are averaged over an
ensemble of classifiers trained with different seeds.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse

from cer import tensor as T
from cer.corpus import (InteractionRecord, Label, PolarityLexicon, rule_label_coherence,
                        tokenize)
from cer.model import ModelParams
from cer.tensor import Tape, Tensor
from cer.training import Adam

TEMPLATES = {
    1: "An example of very negative review is",
    2: "An example of slightly negative review is",
    3: "An example of neutral or mixed review is",
    4: "An example of slightly positive review is",
    5: "An example of very positive review is",
}
HIDDEN = 32
THRESHOLD = 0.5


def fill_template(rating: int, explanation: str, templates: dict[int, str] = TEMPLATES) -> str:
    if rating not in templates:
        raise ValueError(f"rating {rating!r} has no template")
    return templates[rating] + " " + explanation


@dataclass
class AnnotatedPair:
    rating: int
    explanation: str
    label: Label

    def __post_init__(self):
        if self.rating not in TEMPLATES:
            raise ValueError(f"rating {self.rating!r} out of range")
        self.label = Label(self.label)

    def to_json(self) -> dict:
        return {"rating": self.rating, "explanation": self.explanation, "label": self.label.value}


def save_pairs(pairs: Sequence[AnnotatedPair], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_pairs(path) -> list[AnnotatedPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(AnnotatedPair(int(d["rating"]), str(d["explanation"]), d["label"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad annotated pair ({exc})") from exc
    return out


def rule_annotate(records: Sequence[InteractionRecord], lexicon: PolarityLexicon, seed: int = 0,
                  extra: int = 1) -> list[AnnotatedPair]:
    """Label (rating, explanation) pairs with the rule labeler.

    Each record yields its own pair plus ``extra`` pairs that reuse the
    explanation with other ratings, preferring ratings whose label differs
    from the record's own. These minimal pairs differ only in the template,
    which is what the classifier has to learn to read.
    """
    rng = np.random.default_rng(seed)
    out = []
    for r in records:
        own = rule_label_coherence(r.rating, r.explanation, lexicon)
        out.append(AnnotatedPair(r.rating, r.text, own))
        others = [k for k in TEMPLATES if k != r.rating]
        rng.shuffle(others)
        labels = {k: rule_label_coherence(k, r.explanation, lexicon) for k in others}
        ranked = [k for k in others if labels[k] != own] + [k for k in others if labels[k] == own]
        out.extend(AnnotatedPair(k, r.text, labels[k]) for k in ranked[:extra])
    return out


# ----------------------------------------------------------------- encoder

class HashedNgramEncoder:
    """Term-frequency vector of hashed word unigrams and bigrams."""

    def __init__(self, dim: int = 4096):
        self.dim = dim

    def _slot(self, key: str) -> int:
        return zlib.crc32(key.encode("utf-8")) % self.dim

    def counts(self, text: str) -> dict[int, float]:
        toks = tokenize(text)
        grams = [f"1:{t}" for t in toks] + [f"2:{a} {b}" for a, b in zip(toks, toks[1:])]
        out: dict[int, float] = {}
        for g in grams:
            k = self._slot(g)
            out[k] = out.get(k, 0.0) + 1.0
        return out

    def encode(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for k, c in self.counts(text).items():
            v[k] = c
        return v

    def encode_many(self, texts: Sequence[str]) -> sparse.csr_matrix:
        rows, cols, vals = [], [], []
        for r, text in enumerate(texts):
            for k, c in self.counts(text).items():
                rows.append(r)
                cols.append(k)
                vals.append(c)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(len(texts), self.dim))


# -------------------------------------------------------------- classifier

def class_weights(labels: Sequence[Label]) -> dict[Label, float]:
    """Inverse-frequency weights ``N / (2 N_label)``."""
    n = len(labels)
    counts = {lab: sum(1 for x in labels if x == lab) for lab in Label}
    if any(c == 0 for c in counts.values()):
        raise ValueError("annotated pairs contain a single class")
    return {lab: n / (2 * c) for lab, c in counts.items()}


@dataclass
class CoherenceClassifier:
    params: ModelParams
    encoder: HashedNgramEncoder
    weights: dict
    history: list = field(default_factory=list)

    def _logits(self, X) -> Tensor:
        p = self.params
        h = T.tanh(T.add(T.sparse_matmul(X, p["W1"]), p["b1"]))
        out = T.add(h @ p["w2"], p["b2"])
        return T.reshape(out, out.shape[:-1])

    def probabilities(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros(0)
        return T.sigmoid(self._logits(self.encoder.encode_many(texts))).data

    def classify(self, rating: int, explanation: str) -> tuple[Label, float]:
        prob = float(self.probabilities([fill_template(rating, explanation)])[0])
        return (Label.COHERENT if prob >= THRESHOLD else Label.INCOHERENT), prob


def _bce(clf: CoherenceClassifier, X, y, w) -> Tensor:
    return T.scale(T.bce_with_logits(clf._logits(X), y, w), 1.0 / len(y))


def train_classifier(pairs: Sequence[AnnotatedPair], seed: int = 0, encoder: HashedNgramEncoder | None = None,
                     lr: float = 3e-3, max_epochs: int = 1000, patience: int = 50,
                     plateau_tol: float = 2e-3, holdout: float = 0.1, weight_decay: float = 1.0,
                     init_scale: float = 0.01) -> CoherenceClassifier:
    """Full-batch Adam on class-weighted binary cross-entropy.

    Training stops when the loss on a seeded ``holdout`` share of the pairs
    has plateaued: its last ``patience`` values span less than
    ``plateau_tol``. The held-out loss typically rises for a while as the
    model grows confident before it settles, so a best-so-far rule would
    stop almost immediately.
    """
    labels = [p.label for p in pairs]
    cw = class_weights(labels)
    encoder = encoder or HashedNgramEncoder()
    rng = np.random.default_rng(seed)
    X = encoder.encode_many([fill_template(p.rating, p.explanation) for p in pairs])
    y = np.array([lab == Label.COHERENT for lab in labels], dtype=np.float64)
    w = np.array([cw[lab] for lab in labels])
    order = rng.permutation(len(pairs))
    n_val = int(round(holdout * len(pairs))) if len(pairs) >= 10 else 0
    val, tr = order[:n_val], order[n_val:]

    params = ModelParams({
        "W1": Tensor(rng.normal(0, init_scale, (encoder.dim, HIDDEN)), requires_grad=True),
        "b1": Tensor(np.zeros(HIDDEN), requires_grad=True),
        "w2": Tensor(rng.normal(0, 1 / np.sqrt(HIDDEN), (HIDDEN, 1)), requires_grad=True),
        "b2": Tensor(np.zeros(1), requires_grad=True),
    })
    clf = CoherenceClassifier(params, encoder, cw)
    opt = Adam(params, lr=lr, weight_decay=weight_decay)
    Xtr, Xval = X[tr], X[val]
    for _ in range(max_epochs):
        with Tape() as tape:
            loss = _bce(clf, Xtr, y[tr], w[tr])
        tape.backward(loss)
        opt.step()
        score = float(_bce(clf, Xval, y[val], w[val]).data) if n_val else float(loss.data)
        clf.history.append(score)
        window = clf.history[-patience:]
        if len(clf.history) > patience and max(window) - min(window) < plateau_tol:
            break
    return clf


def classify_pair(rating: int, explanation: str, classifier: CoherenceClassifier) -> tuple[Label, float]:
    return classifier.classify(rating, explanation)


def accuracy(classifier: CoherenceClassifier, pairs: Sequence[AnnotatedPair]) -> float:
    probs = classifier.probabilities([fill_template(p.rating, p.explanation) for p in pairs])
    pred = probs >= THRESHOLD
    gold = np.array([p.label == Label.COHERENT for p in pairs])
    return float(np.mean(pred == gold))


def cross_validate(pairs: Sequence[AnnotatedPair], k: int = 10, seed: int = 0, **train_kw) -> list[float]:
    """Accuracy of each of ``k`` folds; not used by the default protocol."""
    order = np.random.default_rng(seed).permutation(len(pairs))
    folds = np.array_split(order, k)
    out = []
    for f in range(k):
        test = set(folds[f].tolist())
        train_pairs = [pairs[i] for i in order if i not in test]
        clf = train_classifier(train_pairs, seed=seed + f, **train_kw)
        out.append(accuracy(clf, [pairs[i] for i in folds[f]]))
    return out


# ---------------------------------------------------------------- ensemble

@dataclass
class CoherenceReport:
    """Percentage of coherent predictions per classifier, plus their mean."""
    columns: list[float]
    mean: float
    name: str = "model"

    def to_dict(self) -> dict:
        return {"name": self.name, "columns": self.columns, "mean": self.mean}

    @classmethod
    def from_dict(cls, d: dict) -> "CoherenceReport":
        return cls([float(c) for c in d["columns"]], float(d["mean"]), d.get("name", "model"))


def train_ensemble(pairs: Sequence[AnnotatedPair], n_models: int = 10, workers: int = 1,
                   **train_kw) -> list[CoherenceClassifier]:
    """Classifiers with seeds ``1..n_models``."""
    if n_models < 1:
        raise ValueError("n_models must be at least 1")
    seeds = range(1, n_models + 1)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda s: train_classifier(pairs, seed=s, **train_kw), seeds))
    return [train_classifier(pairs, seed=s, **train_kw) for s in seeds]


def score_predictions(ratings: Sequence[int], explanations: Sequence[str],
                      classifiers: Sequence[CoherenceClassifier], name: str = "model") -> CoherenceReport:
    texts = [fill_template(r, e) for r, e in zip(ratings, explanations)]
    cols = []
    for clf in classifiers:
        if texts:
            cols.append(100.0 * float(np.mean(clf.probabilities(texts) >= THRESHOLD)))
        else:
            cols.append(0.0)
    return CoherenceReport(cols, float(np.mean(cols)), name)


def coherence_score(predictions, pairs: Sequence[AnnotatedPair], n_models: int = 10,
                    name: str = "model", workers: int = 1) -> CoherenceReport:
    """Train ``n_models`` classifiers and report each one's coherent percentage.

    ``predictions`` are objects with a rounded ``rating`` and a token-list
    ``explanation``, such as decoding's prediction records.
    """
    classifiers = train_ensemble(pairs, n_models, workers)
    return score_predictions([p.rating for p in predictions],
                             [" ".join(p.explanation) for p in predictions], classifiers, name)


def rule_coherence(ratings: Sequence[int], explanations: Sequence[Sequence[str]],
                   lexicon: PolarityLexicon) -> float:
    """Percentage of pairs the rule labeler calls coherent."""
    if not ratings:
        raise ValueError("no predictions")
    ok = sum(rule_label_coherence(r, e, lexicon) == Label.COHERENT for r, e in zip(ratings, explanations))
    return 100.0 * ok / len(ratings)


def render_table(reports: Sequence[CoherenceReport]) -> str:
    """One row per system, one column per classifier, then the mean."""
    if not reports:
        return ""
    n = len(reports[0].columns)
    name_w = max(5, *(len(r.name) for r in reports))
    head = ["Model".ljust(name_w)] + [str(k + 1).rjust(6) for k in range(n)] + ["Mean".rjust(6)]
    lines = [" | ".join(head)]
    for r in reports:
        cells = [r.name.ljust(name_w)] + [f"{c:6.2f}" for c in r.columns] + [f"{r.mean:6.2f}"]
        lines.append(" | ".join(cells))
    return "\n".join(lines)

