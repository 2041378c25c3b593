"""Losses, joint objective and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from cer import tensor as T
from cer.corpus import BOS, EOS, DatasetSplit, InteractionRecord, Vocabulary, build_vocab
from cer.model import (ModelConfig, ModelParams, _mlp_rating, config_for_vocab, encode,
                       init_params, pad_token_rows)
from cer.tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOSS_KEYS = ("rating", "explanation", "context", "coherence")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 64
    max_epochs: int = 20
    max_steps: int | None = None
    clip_norm: float | None = 1.0
    weight_decay: float = 0.0
    patience: int | None = 5
    seed: int = 0
    coh_stop_gradient: bool = False
    loss_weights: dict = field(default_factory=lambda: dict.fromkeys(LOSS_KEYS, 1.0))
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.loss_weights = {**dict.fromkeys(LOSS_KEYS, 1.0), **self.loss_weights}


@dataclass
class LossBreakdown:
    rating: float
    explanation: float
    context: float
    coherence: float
    total: float

    def to_log(self) -> dict:
        return {"L_r": self.rating, "L_e": self.explanation, "L_c": self.context,
                "L_coh": self.coherence, "L_total": self.total}


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    tokens: np.ndarray          # features, <bos>, words; padded
    n_features: np.ndarray
    expl_len: np.ndarray        # target tokens per example, <eos> included
    target_example: np.ndarray  # flattened targets: owning example
    target_slot: np.ndarray     # ... slot whose output predicts it
    target_token: np.ndarray    # ... gold token id
    ratings: np.ndarray

    def __len__(self):
        return len(self.users)


@dataclass
class EncodedRecord:
    user: int
    item: int
    features: list[int]
    words: list[int]
    rating: float


def encode_records(records: Sequence[InteractionRecord], vocab: Vocabulary,
                   config: ModelConfig) -> list[EncodedRecord]:
    out = []
    for r in records:
        out.append(EncodedRecord(
            vocab.user_id(r.user), vocab.item_id(r.item),
            vocab.encode(r.features[:config.max_features]),
            vocab.encode(r.explanation[:config.max_expl_len]),
            float(r.rating)))
    return out


def make_batch(encoded: Sequence[EncodedRecord]) -> Batch:
    rows, n_feat, lens = [], [], []
    ex, slot, tok = [], [], []
    for b, e in enumerate(encoded):
        rows.append(e.features + [BOS] + e.words)
        gold = e.words + [EOS]
        bos = len(e.features) + 2
        n_feat.append(len(e.features))
        lens.append(len(gold))
        ex.extend([b] * len(gold))
        slot.extend(range(bos, bos + len(gold)))
        tok.extend(gold)
    return Batch(
        users=np.array([e.user for e in encoded], dtype=np.int64),
        items=np.array([e.item for e in encoded], dtype=np.int64),
        tokens=pad_token_rows(rows),
        n_features=np.array(n_feat, dtype=np.int64),
        expl_len=np.array(lens, dtype=np.int64),
        target_example=np.array(ex, dtype=np.int64),
        target_slot=np.array(slot, dtype=np.int64),
        target_token=np.array(tok, dtype=np.int64),
        ratings=np.array([e.rating for e in encoded]),
    )


# ------------------------------------------------------------------ losses

def _check_targets(targets: np.ndarray, vocab_size: int) -> None:
    if targets.size == 0:
        raise ValueError("empty batch")
    bad = (targets < 0) | (targets >= vocab_size)
    if bad.any():
        raise IndexError(f"gold token {int(targets[bad][0])} outside vocabulary of size {vocab_size}")


def _per_example_weights(example_index: np.ndarray) -> np.ndarray:
    """Weights giving a per-example mean over tokens, then a batch mean."""
    example_index = np.asarray(example_index, dtype=np.int64)
    counts = np.bincount(example_index)
    n_examples = np.count_nonzero(counts)
    return 1.0 / (counts[example_index] * n_examples)


def loss_rating(pred: Tensor, gold) -> Tensor:
    """Mean squared error between predicted and gold ratings."""
    gold = np.asarray(gold, dtype=np.float64)
    if pred.size == 0:
        raise ValueError("empty batch")
    if pred.shape != gold.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match gold {gold.shape}")
    diff = pred - Tensor(gold)
    return T.mean_all(diff * diff)


def loss_explanation(logits: Tensor, targets, example_index) -> Tensor:
    """Token NLL averaged per example, then over the batch.

    ``logits`` has one row per target token (teacher forcing).
    """
    targets = np.asarray(targets, dtype=np.int64)
    _check_targets(targets, logits.shape[-1])
    return T.cross_entropy(logits, np.arange(len(targets)), targets,
                           _per_example_weights(example_index))


def loss_context(logits: Tensor, targets, example_index) -> Tensor:
    """Like :func:`loss_explanation`, but one logit row per example serves
    every token of that example's explanation."""
    targets = np.asarray(targets, dtype=np.int64)
    _check_targets(targets, logits.shape[-1])
    example_index = np.asarray(example_index, dtype=np.int64)
    return T.cross_entropy(logits, example_index, targets, _per_example_weights(example_index))


def loss_coherence(r_hat: Tensor, r_hat_expl: Tensor, stop_gradient: bool = False) -> Tensor:
    """Mean squared gap between the two model-internal rating predictions.

    Gold ratings never enter. With ``stop_gradient`` the recommendation head's
    prediction is treated as a constant target.
    """
    if r_hat.size == 0:
        raise ValueError("empty batch")
    if stop_gradient:
        r_hat = T.detach(r_hat)
    diff = r_hat - r_hat_expl
    return T.mean_all(diff * diff)


@dataclass
class ForwardOutputs:
    r_hat: Tensor
    word_logits: Tensor
    context_logits: Tensor
    r_hat_expl: Tensor


def forward_batch(params: ModelParams, config: ModelConfig, batch: Batch) -> ForwardOutputs:
    X = encode(params, config, batch.users, batch.items, batch.tokens)
    B = len(batch)
    zeros = np.zeros(B, dtype=np.int64)
    x1 = T.gather_rows(X, np.arange(B), zeros)
    x2 = T.gather_rows(X, np.arange(B), zeros + 1)
    r_hat = _mlp_rating(x1, params, "rating")
    rows = T.gather_rows(X, batch.target_example, batch.target_slot)
    words = T.add(rows @ params["expl.W"], params["expl.b"])
    ctx = T.add(x2 @ params["ctx.W"], params["ctx.b"])
    pooled = T.segment_max(X, batch.n_features + 2, batch.expl_len)
    r_hat_expl = _mlp_rating(pooled, params, "coh")
    return ForwardOutputs(r_hat, words, ctx, r_hat_expl)


def joint_loss(batch: Batch, params: ModelParams, config: ModelConfig,
               train_config: TrainConfig | None = None) -> tuple[LossBreakdown, Tensor]:
    """All four losses from one teacher-forced pass, plus their weighted sum.

    A component with weight 0 is left out of the summed graph entirely.
    """
    tc = train_config or TrainConfig()
    out = forward_batch(params, config, batch)
    parts = {
        "rating": loss_rating(out.r_hat, batch.ratings),
        "explanation": loss_explanation(out.word_logits, batch.target_token, batch.target_example),
        "context": loss_context(out.context_logits, batch.target_token, batch.target_example),
        "coherence": loss_coherence(out.r_hat, out.r_hat_expl, tc.coh_stop_gradient),
    }
    total = None
    for key in LOSS_KEYS:
        w = tc.loss_weights[key]
        if w == 0:
            continue
        term = parts[key] if w == 1 else T.scale(parts[key], w)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("all loss weights are zero")
    vals = {k: float(v.data) for k, v in parts.items()}
    return LossBreakdown(total=float(total.data), **vals), total


# --------------------------------------------------------------- optimizer

class Adam:
    """Adam with global-norm clipping and decoupled weight decay."""

    def __init__(self, params: ModelParams, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 clip_norm=None, weight_decay=0.0):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.clip_norm, self.weight_decay = clip_norm, weight_decay
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * factor
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update
            p.grad = None
        return norm


class SGD:
    def __init__(self, params: ModelParams, lr=1e-2, clip_norm=None, weight_decay=0.0):
        self.params, self.lr = params, lr
        self.clip_norm, self.weight_decay = clip_norm, weight_decay

    def step(self) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        factor = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / (norm + 1e-12)
        for k, p in self.params.items():
            p.data -= self.lr * (grads[k] * factor + self.weight_decay * p.data)
            p.grad = None
        return norm


def make_optimizer(params: ModelParams, tc: TrainConfig):
    if tc.optimizer == "sgd":
        return SGD(params, tc.lr, tc.clip_norm, tc.weight_decay)
    return Adam(params, tc.lr, tc.betas, tc.eps, tc.clip_norm, tc.weight_decay)


# -------------------------------------------------------------------- loop

@dataclass
class EpochLog:
    epoch: int
    steps: int
    train: LossBreakdown
    valid: LossBreakdown | None
    valid_rmse: float | None

    def to_json(self) -> dict:
        out = {"epoch": self.epoch, "steps": self.steps, **self.train.to_log()}
        if self.valid is not None:
            out.update({f"valid_{k}": v for k, v in self.valid.to_log().items()})
            out["valid_rmse"] = self.valid_rmse
        return out


@dataclass
class TrainResult:
    params: ModelParams
    config: ModelConfig
    vocab: Vocabulary
    history: list[EpochLog]
    best_epoch: int
    steps: int

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.history:
                fh.write(json.dumps(entry.to_json()) + "\n")


def _mean_breakdown(parts: list[tuple[LossBreakdown, int]]) -> LossBreakdown:
    n = sum(w for _, w in parts)
    vals = {k: sum(getattr(b, k) * w for b, w in parts) / n
            for k in ("rating", "explanation", "context", "coherence", "total")}
    return LossBreakdown(**vals)


def evaluate_loss(params: ModelParams, config: ModelConfig, encoded: Sequence[EncodedRecord],
                  tc: TrainConfig, batch_size: int = 256) -> tuple[LossBreakdown, float]:
    """Mean losses and rating RMSE over ``encoded``, without recording a tape."""
    parts, sq = [], 0.0
    for s in range(0, len(encoded), batch_size):
        batch = make_batch(encoded[s:s + batch_size])
        bd, _ = joint_loss(batch, params, config, tc)
        parts.append((bd, len(batch)))
        sq += bd.rating * len(batch)
    return _mean_breakdown(parts), float(np.sqrt(sq / len(encoded)))


def train(
    dataset: DatasetSplit,
    model_config: ModelConfig | dict | None = None,
    train_config: TrainConfig | None = None,
    vocab: Vocabulary | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Train from scratch; returns the parameters of the best validation epoch.

    Without a validation split, the training loss of each epoch is used for
    model selection and early stopping.
    """
    tc = train_config or TrainConfig()
    if not dataset.train:
        raise ValueError("training split is empty")
    vocab = vocab or build_vocab(dataset.train, id_records=dataset.valid + dataset.test)
    if model_config is None or isinstance(model_config, dict):
        config = config_for_vocab(vocab, **(model_config or {}))
    else:
        config = model_config
    rng = np.random.default_rng(tc.seed)
    params = init_params(config, tc.seed)
    opt = make_optimizer(params, tc)
    train_enc = encode_records(dataset.train, vocab, config)
    valid_enc = encode_records(dataset.valid, vocab, config)

    history: list[EpochLog] = []
    best_score, best_epoch, best_params = np.inf, 0, params.copy()
    bad_epochs, step = 0, 0
    for epoch in range(1, tc.max_epochs + 1):
        order = rng.permutation(len(train_enc))
        parts = []
        for b_idx, s in enumerate(range(0, len(order), tc.batch_size)):
            batch = make_batch([train_enc[k] for k in order[s:s + tc.batch_size]])
            try:
                with Tape() as tape:
                    bd, total = joint_loss(batch, params, config, tc)
                    if not np.isfinite(bd.total):
                        raise FloatingPointError("non-finite loss")
                tape.backward(total)
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(f"diverged at epoch {epoch}, batch {b_idx}: {exc}") from exc
            parts.append((bd, len(batch)))
            step += 1
            if tc.max_steps is not None and step >= tc.max_steps:
                break
        train_bd = _mean_breakdown(parts)
        valid_bd, valid_rmse = (None, None)
        if valid_enc:
            valid_bd, valid_rmse = evaluate_loss(params, config, valid_enc, tc)
        entry = EpochLog(epoch, step, train_bd, valid_bd, valid_rmse)
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.debug("epoch %d: %s", epoch, entry.to_json())
        score = (valid_bd or train_bd).total
        if score < best_score:
            best_score, best_epoch, best_params = score, epoch, params.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
        if tc.patience is not None and bad_epochs >= tc.patience:
            break
        if tc.max_steps is not None and step >= tc.max_steps:
            break
    return TrainResult(best_params, config, vocab, history, best_epoch, step)


def train_config_to_dict(tc: TrainConfig) -> dict:
    d = asdict(tc)
    d["betas"] = list(tc.betas)
    return d
