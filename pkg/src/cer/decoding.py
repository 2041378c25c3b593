"""Greedy explanation generation and rating post-processing."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from cer import tensor as T
from cer.corpus import BOS, EOS, PAD, UNK, InteractionRecord, Vocabulary
from cer.model import ModelConfig, ModelParams, _mlp_rating, encode, pad_token_rows

# never produced by the argmax
BANNED = (BOS, UNK, PAD)


@dataclass
class PredictionRecord:
    user: str
    item: str
    raw_rating: float
    rating: int
    explanation: list[str]
    aux_rating: float

    def to_json(self) -> dict:
        d = asdict(self)
        d["explanation"] = " ".join(self.explanation)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PredictionRecord":
        expl = d["explanation"]
        return cls(d["user"], d["item"], float(d["raw_rating"]), int(d["rating"]),
                   expl.split() if isinstance(expl, str) else list(expl), float(d["aux_rating"]))


def round_rating(raw: float) -> int:
    """Nearest integer with halves away from zero, clamped to 1..5."""
    raw = float(raw)
    if not math.isfinite(raw):
        raise ValueError(f"cannot round non-finite rating {raw}")
    r = math.floor(abs(raw) + 0.5)
    r = r if raw >= 0 else -r
    return int(min(5, max(1, r)))


@dataclass
class _Query:
    user: int
    item: int
    features: list[int]


def _greedy(params: ModelParams, config: ModelConfig, queries: Sequence[_Query]) -> list[list[int]]:
    """Batched greedy decoding; returns generated word ids without ``<eos>``."""
    n = len(queries)
    users = np.array([q.user for q in queries], dtype=np.int64)
    items = np.array([q.item for q in queries], dtype=np.int64)
    generated: list[list[int]] = [[] for _ in range(n)]
    active = list(range(n))
    for _ in range(config.max_expl_len):
        if not active:
            break
        rows = [queries[k].features + [BOS] + generated[k] for k in active]
        X = encode(params, config, users[active], items[active], pad_token_rows(rows))
        slots = np.array([len(r) + 1 for r in rows])  # row of the last input token
        hidden = X.data[np.arange(len(active)), slots]
        logits = hidden @ params["expl.W"].data + params["expl.b"].data
        logits[:, BANNED] = -np.inf
        nxt = np.argmax(logits, axis=1)  # first maximum wins ties
        still = []
        for k, tok in zip(active, nxt):
            if tok == EOS:
                continue
            generated[k].append(int(tok))
            if len(generated[k]) < config.max_expl_len:
                still.append(k)
        active = still
    return generated


def _query(vocab: Vocabulary, config: ModelConfig, user: str, item: str, features) -> _Query:
    return _Query(vocab.user_id(user), vocab.item_id(item),
                  vocab.encode(list(features)[:config.max_features]))


def greedy_generate(user: str, item: str, features, params: ModelParams, config: ModelConfig,
                    vocab: Vocabulary) -> list[str]:
    """Greedy explanation for one (user, item, features) triple."""
    ids = _greedy(params, config, [_query(vocab, config, user, item, features)])[0]
    return vocab.decode(ids)


def predict_batch(records: Sequence[InteractionRecord], params: ModelParams, config: ModelConfig,
                  vocab: Vocabulary, batch_size: int = 256) -> list[PredictionRecord]:
    """Ratings, greedy explanations and the explanation-based rating per record.

    The explanation-based rating pools over the generated text re-fed through
    the model, covering the same rows as at training time (one per word plus
    the row that emits ``<eos>``).
    """
    out: list[PredictionRecord] = []
    for s in range(0, len(records), batch_size):
        chunk = records[s:s + batch_size]
        queries = [_query(vocab, config, r.user, r.item, r.features) for r in chunk]
        gen = _greedy(params, config, queries)
        users = np.array([q.user for q in queries], dtype=np.int64)
        items = np.array([q.item for q in queries], dtype=np.int64)
        X = encode(params, config, users, items,
                   pad_token_rows([q.features + [BOS] + g for q, g in zip(queries, gen)]))
        B = len(chunk)
        raw = _mlp_rating(T.gather_rows(X, np.arange(B), np.zeros(B, dtype=np.int64)), params, "rating")
        starts = np.array([len(q.features) + 2 for q in queries])
        lengths = np.array([len(g) + 1 for g in gen])
        aux = _mlp_rating(T.segment_max(X, starts, lengths), params, "coh")
        for k, r in enumerate(chunk):
            out.append(PredictionRecord(r.user, r.item, float(raw.data[k]), round_rating(raw.data[k]),
                                        vocab.decode(gen[k]), float(aux.data[k])))
    return out


def save_predictions(preds: Sequence[PredictionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_json()) + "\n")


def load_predictions(path) -> list[PredictionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PredictionRecord.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction record ({exc})") from exc
    return out
