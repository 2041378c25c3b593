"""The coherent explainable recommender: sequence layout, masked transformer, heads.

A sequence is laid out as ``[u, i, f_1..f_F, <bos>, e_1..e_n]``. Positions in
this module are 0-based, so the user sits at 0, the item at 1 and ``<bos>`` at
``F + 2``. Under the autoregressive shift the output at slot ``F + 2 + j``
predicts explanation token ``j`` (0-based), so the ``<bos>`` slot predicts the
first word.

Attention is standard scaled dot-product attention, ``softmax(Q K^T / sqrt(d_h)
+ M) V`` with ``Q = S W_q`` and ``K = S W_k``; the written form ``S W_q W_k^T S``
is missing a transpose on the trailing ``S`` and is read as ``(S W_q)(S W_k)^T``.
The mask ``M`` is causal except that the user slot may also attend to the item.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from cer import tensor as T
from cer.corpus import BOS, PAD, Vocabulary
from cer.tensor import FORBIDDEN, Tensor

CHECKPOINT_FORMAT = 1

ROLE_USER, ROLE_ITEM, ROLE_FEATURE, ROLE_BOS, ROLE_WORD = "user", "item", "feature", "bos", "word"


@dataclass
class ModelConfig:
    n_users: int
    n_items: int
    vocab_size: int
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    hidden_dim: int = 64
    ffn_dim: int = 128
    max_expl_len: int = 20
    max_features: int = 4

    def __post_init__(self):
        for name in ("n_users", "n_items", "vocab_size", "embed_dim", "n_layers", "n_heads",
                     "hidden_dim", "ffn_dim", "max_expl_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_features < 0:
            raise ValueError("max_features must be non-negative")
        if self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be divisible by n_heads")

    @property
    def max_len(self) -> int:
        return 3 + self.max_features + self.max_expl_len


class ModelParams:
    """Named learnable tensors, iterated in a fixed order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def keys(self):
        return self.tensors.keys()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, h, V = config.embed_dim, config.hidden_dim, config.vocab_size

    def emb(n):
        return rng.uniform(-0.1, 0.1, (n, d))

    def lin(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))

    p = {"U": emb(config.n_users), "I": emb(config.n_items), "E": emb(V), "P": emb(config.max_len)}
    for layer in range(config.n_layers):
        pre = f"layers.{layer}."
        for w in ("W_q", "W_k", "W_v", "W_o"):
            p[pre + w] = lin(d, d)
        p[pre + "ln1.g"], p[pre + "ln1.b"] = np.ones(d), np.zeros(d)
        p[pre + "ffn.W1"], p[pre + "ffn.b1"] = lin(d, config.ffn_dim), np.zeros(config.ffn_dim)
        p[pre + "ffn.W2"], p[pre + "ffn.b2"] = lin(config.ffn_dim, d), np.zeros(d)
        p[pre + "ln2.g"], p[pre + "ln2.b"] = np.ones(d), np.zeros(d)
    # both rating heads start near the middle of the 1-5 scale: sigmoid ~ 0.5 per unit
    for head in ("rating", "coh"):
        p[head + ".W"], p[head + ".b"] = lin(d, h), np.zeros(h)
        p[head + ".w"] = 6.0 / h + rng.normal(0.0, 0.01, (h, 1))
    p["expl.W"], p["expl.b"] = lin(d, V) * 0.1, np.zeros(V)
    p["ctx.W"], p["ctx.b"] = lin(d, V) * 0.1, np.zeros(V)
    return ModelParams({k: Tensor(v, requires_grad=True) for k, v in p.items()})


# ----------------------------------------------------------------- inputs

@dataclass
class InputSequence:
    ids: list[int]
    roles: list[str]
    n_features: int

    def __len__(self):
        return len(self.ids)

    @property
    def bos_position(self) -> int:
        return self.n_features + 2

    def token_ids(self) -> list[int]:
        """Ids of every slot after user and item (features, ``<bos>``, words)."""
        return self.ids[2:]


def build_input_sequence(user: str, item: str, features, prefix, vocab: Vocabulary,
                         config: ModelConfig | None = None) -> InputSequence:
    """Lay out ``[u, i, f.., <bos>, prefix..]``. Unknown tokens map to ``<unk>``;
    unknown user or item ids raise ``KeyError``."""
    features = list(features)
    prefix = list(prefix)
    if config is not None:
        features = features[:config.max_features]
        if len(prefix) > config.max_expl_len:
            raise ValueError(f"explanation prefix longer than max_expl_len={config.max_expl_len}")
    ids = [vocab.user_id(user), vocab.item_id(item)] + vocab.encode(features) + [BOS] + vocab.encode(prefix)
    roles = ([ROLE_USER, ROLE_ITEM] + [ROLE_FEATURE] * len(features) + [ROLE_BOS]
             + [ROLE_WORD] * len(prefix))
    return InputSequence(ids, roles, len(features))


@lru_cache(maxsize=64)
def _mask(seq_len: int) -> np.ndarray:
    m = np.triu(np.full((seq_len, seq_len), FORBIDDEN), 1)
    m[0, 1] = 0.0
    m.setflags(write=False)
    return m


def build_mask(seq_len: int) -> np.ndarray:
    """Additive attention mask: 0 where attending is allowed, FORBIDDEN elsewhere."""
    if seq_len < 2:
        raise ValueError("sequence length must be at least 2")
    return _mask(seq_len)


# ---------------------------------------------------------------- forward

def embed(params: ModelParams, users, items, tokens) -> Tensor:
    """Input representations ``S`` of shape ``(B, L, d)`` including positions."""
    users = np.asarray(users, dtype=np.int64)[:, None]
    items = np.asarray(items, dtype=np.int64)[:, None]
    tokens = np.asarray(tokens, dtype=np.int64)
    L = tokens.shape[1] + 2
    if L > params["P"].shape[0]:
        raise ValueError(f"sequence length {L} exceeds the positional table ({params['P'].shape[0]})")
    S = T.concat([T.embedding(params["U"], users), T.embedding(params["I"], items),
                  T.embedding(params["E"], tokens)], axis=1)
    return T.add(S, T.embedding(params["P"], np.arange(L)))


def _attention(S: Tensor, params: ModelParams, pre: str, n_heads: int, mask: np.ndarray) -> Tensor:
    B, L, d = S.shape
    dh = d // n_heads

    def heads(w):
        return T.transpose(T.reshape(S @ params[pre + w], (B, L, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("W_q"), heads("W_k"), heads("W_v")
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    att = T.row_softmax(scores, mask)
    ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
    return ctx @ params[pre + "W_o"]


def transformer_stack(S: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Masked post-norm layers over input representations ``S`` of shape ``(B, L, d)``."""
    mask = build_mask(S.shape[1])
    for layer in range(config.n_layers):
        pre = f"layers.{layer}."
        h = T.layer_norm(S + _attention(S, params, pre, config.n_heads, mask),
                         params[pre + "ln1.g"], params[pre + "ln1.b"])
        f = T.relu(T.add(h @ params[pre + "ffn.W1"], params[pre + "ffn.b1"]))
        f = T.add(f @ params[pre + "ffn.W2"], params[pre + "ffn.b2"])
        S = T.layer_norm(h + f, params[pre + "ln2.g"], params[pre + "ln2.b"])
    return S


def encode(params: ModelParams, config: ModelConfig, users, items, tokens) -> Tensor:
    """Embed and run the transformer stack; returns ``X`` of shape ``(B, L, d)``."""
    return transformer_stack(embed(params, users, items, tokens), params, config)


def transformer_forward(seq: InputSequence, params: ModelParams, config: ModelConfig) -> Tensor:
    """Single-sequence forward pass; returns ``X`` of shape ``(len, d)``."""
    X = encode(params, config, [seq.ids[0]], [seq.ids[1]], [seq.token_ids()])
    return T.reshape(X, X.shape[1:])


# ------------------------------------------------------------------ heads

def _mlp_rating(x: Tensor, params: ModelParams, head: str) -> Tensor:
    hidden = T.sigmoid(T.add(x @ params[head + ".W"], params[head + ".b"]))
    out = hidden @ params[head + ".w"]
    return T.reshape(out, out.shape[:-1])


def _as_rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return T.reshape(x, (1, x.shape[0])), True
    return x, False


def rating_head(x1: Tensor, params: ModelParams) -> Tensor:
    """``w_r^T sigmoid(W_r x_1 + b_r)`` for one ``(d,)`` row or a ``(B, d)`` batch."""
    x, single = _as_rows(x1)
    r = _mlp_rating(x, params, "rating")
    return T.reshape(r, ()) if single else r


def word_logits(X: Tensor, t: int, params: ModelParams) -> Tensor:
    """Vocabulary logits from row ``t`` of a single-sequence ``X``."""
    if not 0 <= t < X.shape[0]:
        raise IndexError(f"position {t} out of range for sequence of length {X.shape[0]}")
    row = T.gather_rows(T.reshape(X, (1,) + X.shape), [0], [t])
    out = T.add(row @ params["expl.W"], params["expl.b"])
    return T.reshape(out, out.shape[1:])


def context_logits(x2: Tensor, params: ModelParams) -> Tensor:
    """Vocabulary logits from the item slot's representation ``x_2``."""
    x, single = _as_rows(x2)
    out = T.add(x @ params["ctx.W"], params["ctx.b"])
    return T.reshape(out, out.shape[1:]) if single else out


def explanation_rating_head(X: Tensor, n_features: int, expl_len: int, params: ModelParams) -> Tensor:
    """Max-pool the ``expl_len`` rows starting at the ``<bos>`` slot, then the MLP.

    Those rows are the ones whose outputs generate explanation tokens
    ``1..expl_len`` under the shift.
    """
    if expl_len < 1:
        raise ValueError("explanation length must be at least 1")
    Xb = T.reshape(X, (1,) + X.shape)
    pooled = T.segment_max(Xb, [n_features + 2], [expl_len])
    return T.reshape(_mlp_rating(pooled, params, "coh"), ())


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, params: ModelParams, config: ModelConfig, vocab: Vocabulary,
                    extra: dict | None = None) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "config": asdict(config), "vocab": vocab.to_dict(),
            "param_names": list(params.keys()), "extra": extra or {}}
    arrays = {f"param:{k}": v.data for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


@dataclass
class Checkpoint:
    params: ModelParams
    config: ModelConfig
    vocab: Vocabulary
    extra: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        params = ModelParams({k: Tensor(z[f"param:{k}"].copy(), requires_grad=True)
                              for k in meta["param_names"]})
    config = ModelConfig(**meta["config"])
    vocab = Vocabulary.from_dict(meta["vocab"])
    if (len(vocab), len(vocab.users), len(vocab.items)) != (config.vocab_size, config.n_users, config.n_items):
        raise ValueError(f"{path}: vocabulary does not match the model configuration")
    return Checkpoint(params, config, vocab, meta.get("extra", {}))


def config_for_vocab(vocab: Vocabulary, **kwargs) -> ModelConfig:
    return ModelConfig(n_users=len(vocab.users), n_items=len(vocab.items),
                       vocab_size=len(vocab), **kwargs)


def pad_token_rows(rows, pad: int = PAD) -> np.ndarray:
    width = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), width), pad, dtype=np.int64)
    for k, r in enumerate(rows):
        out[k, :len(r)] = r
    return out
