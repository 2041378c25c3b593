"""Records, tokenization, vocabulary, dataset files and the synthetic corpus.

The rule-based coherence labeler mechanizes the manual annotation protocol
for rating/explanation pairs:

* ratings 1 and 5 need purely negative / purely positive wording;
* ratings 2 and 4 also accept a minor opposite point, recognized by a hedge
  ("slightly", "a little bit") right before the opposite-polarity term;
* rating 3 accepts neutral text, text with both polarities, or text whose
  only polarized terms are hedged.

It is an approximation of human judgment, not an equivalent of it.
"""
from __future__ import annotations

import enum
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

BOS, EOS, UNK, PAD = 0, 1, 2, 3
SPECIALS = ("<bos>", "<eos>", "<unk>", "<pad>")
SPLITS = ("train", "valid", "test")

_TOKEN_RE = re.compile(r"\w+(?=n't\b)|n't\b|'\w+|\w+|[^\w\s]")


class DatasetError(ValueError):
    pass


class Label(str, enum.Enum):
    COHERENT = "coherent"
    INCOHERENT = "incoherent"


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, detaching punctuation and clitics.

    >>> tokenize("It's a fun movie")
    ['it', "'s", 'a', 'fun', 'movie']
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class InteractionRecord:
    user: str
    item: str
    rating: int
    features: list[str]
    explanation: list[str]

    def __post_init__(self):
        if isinstance(self.rating, bool) or int(self.rating) != self.rating or not 1 <= self.rating <= 5:
            raise DatasetError(f"rating must be an integer in 1..5, got {self.rating!r}")
        self.rating = int(self.rating)
        if not self.explanation:
            raise DatasetError("explanation must not be empty")
        if any(not tok.strip() for tok in self.explanation):
            raise DatasetError("explanation contains an empty token")

    @property
    def text(self) -> str:
        return " ".join(self.explanation)


@dataclass
class DatasetSplit:
    train: list[InteractionRecord] = field(default_factory=list)
    valid: list[InteractionRecord] = field(default_factory=list)
    test: list[InteractionRecord] = field(default_factory=list)

    def all_records(self) -> list[InteractionRecord]:
        return self.train + self.valid + self.test

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


class Vocabulary:
    """Token, user and item index maps. Token slots 0-3 are the specials."""

    def __init__(self, tokens, users, items):
        tokens = list(tokens)
        if tuple(tokens[:4]) != SPECIALS:
            tokens = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.tokens = tokens
        self.users = list(users)
        self.items = list(items)
        self.token_index = {t: k for k, t in enumerate(self.tokens)}
        self.user_index = {u: k for k, u in enumerate(self.users)}
        self.item_index = {i: k for k, i in enumerate(self.items)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return (isinstance(other, Vocabulary) and self.tokens == other.tokens
                and self.users == other.users and self.items == other.items)

    def encode(self, tokens) -> list[int]:
        get = self.token_index.get
        return [get(t, UNK) for t in tokens]

    def decode(self, ids, strip_specials: bool = True) -> list[str]:
        out = [self.tokens[k] for k in ids]
        if strip_specials:
            out = [t for t in out if t not in SPECIALS]
        return out

    def user_id(self, user: str) -> int:
        try:
            return self.user_index[user]
        except KeyError:
            raise KeyError(f"unknown user id {user!r}") from None

    def item_id(self, item: str) -> int:
        try:
            return self.item_index[item]
        except KeyError:
            raise KeyError(f"unknown item id {item!r}") from None

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "users": self.users, "items": self.items}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d["users"], d["items"])


def build_vocab(records, min_count: int = 1, id_records=()) -> Vocabulary:
    """Tokens come from ``records``; user and item ids from those plus ``id_records``.

    Passing the evaluation splits as ``id_records`` gives every user and item
    an embedding row without letting their text leak into the token list.
    """
    if not records:
        raise ValueError("build_vocab needs at least one record")
    counts: Counter[str] = Counter()
    users, items = {}, {}
    for r in records:
        counts.update(r.features)
        counts.update(r.explanation)
    for r in list(records) + list(id_records):
        users.setdefault(r.user, None)
        items.setdefault(r.item, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, sorted(users), sorted(items))


# ---------------------------------------------------------------- file I/O

def record_to_json(r: InteractionRecord, split: str) -> dict:
    return {"user": r.user, "item": r.item, "rating": r.rating,
            "features": list(r.features), "explanation": r.text, "split": split}


def save_dataset(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in SPLITS:
            for r in getattr(split, name):
                fh.write(json.dumps(record_to_json(r, name), ensure_ascii=False) + "\n")


def load_dataset(path) -> DatasetSplit:
    out = DatasetSplit()
    n = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                split = obj.get("split", "train")
                if split not in SPLITS:
                    raise DatasetError(f"unknown split {split!r}")
                rec = InteractionRecord(
                    user=str(obj["user"]),
                    item=str(obj["item"]),
                    rating=obj["rating"],
                    features=[f.lower() for f in obj.get("features", [])],
                    explanation=tokenize(obj["explanation"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, DatasetError) as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from exc
            getattr(out, split).append(rec)
            n += 1
    if n == 0:
        raise DatasetError(f"{path}: no records")
    return out


# ------------------------------------------------------------------ lexicon

@dataclass
class PolarityLexicon:
    positive: list[str]
    negative: list[str]
    neutral: list[str]
    hedges: list[str]
    features: list[str]
    negators: list[str] = field(default_factory=list)
    version: int = 1

    def __post_init__(self):
        groups = {"positive": self.positive, "negative": self.negative,
                  "neutral": self.neutral, "hedges": self.hedges, "features": self.features}
        seen: dict[str, str] = {}
        for name, terms in groups.items():
            for t in terms:
                if t in seen and seen[t] != name:
                    raise ValueError(f"lexicon term {t!r} is in both {seen[t]} and {name}")
                seen[t] = name
        self._table: dict[tuple[str, ...], str] = {}
        for name in ("positive", "negative", "neutral", "hedges", "negators"):
            for t in getattr(self, name):
                self._table[tuple(tokenize(t))] = name
        self._longest = max((len(k) for k in self._table), default=1)

    def to_dict(self) -> dict:
        return {"version": self.version, "positive": self.positive, "negative": self.negative,
                "neutral": self.neutral, "hedges": self.hedges, "negators": self.negators,
                "features": self.features}

    def match(self, tokens) -> list[tuple[str, int, int]]:
        """Greedy longest-match scan; returns ``(group, start, end)`` spans."""
        out = []
        i, n = 0, len(tokens)
        while i < n:
            for k in range(min(self._longest, n - i), 0, -1):
                group = self._table.get(tuple(tokens[i:i + k]))
                if group is not None:
                    out.append((group, i, i + k))
                    i += k
                    break
            else:
                i += 1
        return out


def load_lexicon(path=None) -> PolarityLexicon:
    if path is None:
        text = resources.files("cer").joinpath("data/lexicon.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    d = json.loads(text)
    return PolarityLexicon(
        positive=d["positive"], negative=d["negative"], neutral=d["neutral"],
        hedges=d["hedges"], features=d["features"], negators=d.get("negators", []),
        version=d.get("version", 1),
    )


def save_lexicon(lexicon: PolarityLexicon, path) -> None:
    Path(path).write_text(json.dumps(lexicon.to_dict(), indent=2) + "\n", encoding="utf-8")


# ----------------------------------------------------------- rule labeler

@dataclass(frozen=True)
class PolarityProfile:
    positive: int = 0
    negative: int = 0
    positive_hedged: int = 0
    negative_hedged: int = 0

    @property
    def positive_weight(self) -> float:
        return self.positive - 0.5 * self.positive_hedged

    @property
    def negative_weight(self) -> float:
        return self.negative - 0.5 * self.negative_hedged


def polarity_profile(tokens, lexicon: PolarityLexicon) -> PolarityProfile:
    spans = lexicon.match(list(tokens))
    hedge_ends = [e for g, _, e in spans if g == "hedges"]
    negator_ends = [e for g, _, e in spans if g == "negators"]
    counts = {"positive": 0, "negative": 0}
    hedged = {"positive": 0, "negative": 0}
    for group, start, _ in spans:
        if group not in counts:
            continue
        # a negator up to one token before flips the term ("is n't very funny")
        if any(start - 1 <= e <= start for e in negator_ends):
            group = "negative" if group == "positive" else "positive"
        counts[group] += 1
        if any(start - 1 <= e <= start for e in hedge_ends):
            hedged[group] += 1
    return PolarityProfile(counts["positive"], counts["negative"],
                           hedged["positive"], hedged["negative"])


def rule_label_coherence(rating: int, explanation, lexicon: PolarityLexicon) -> Label:
    if rating not in (1, 2, 3, 4, 5):
        raise ValueError(f"rating must be in 1..5, got {rating!r}")
    if isinstance(explanation, str):
        explanation = tokenize(explanation)
    p = polarity_profile(explanation, lexicon)
    if rating == 5:
        ok = p.positive >= 1 and p.negative == 0
    elif rating == 1:
        ok = p.negative >= 1 and p.positive == 0
    elif rating == 4:
        ok = (p.positive >= 1 and p.negative_hedged == p.negative
              and p.positive_weight > p.negative_weight)
    elif rating == 2:
        ok = (p.negative >= 1 and p.positive_hedged == p.positive
              and p.negative_weight > p.positive_weight)
    else:
        ok = ((p.positive == 0 and p.negative == 0)
              or (p.positive > 0 and p.negative > 0)
              or (p.positive_hedged == p.positive and p.negative_hedged == p.negative))
    return Label.COHERENT if ok else Label.INCOHERENT


# ------------------------------------------------------- synthetic corpus

# P positive, N negative, U neutral, H hedge, I intensifier, f record feature,
# g any other feature
TEMPLATES = {
    5: ("the {f} is {I} {P}", "this is a {P} {f}", "{P} {f} and {P} {g}",
        "the {f} is {P} and the {g} is {P}"),
    4: ("the {f} is {P} but {H} {N}", "the {f} is {P} , the {g} is {H} {N}",
        "a {P} {f} , {H} {N} though", "the {f} is {H} {P}"),
    3: ("the {f} is {U}", "the {f} is {P} but the {g} is {N}",
        "{U} {f} , nothing special", "the {f} is {U} and the {g} is {U}"),
    2: ("the {f} is {N} but {H} {P}", "the {f} is {N} , the {g} is {H} {P}",
        "a {N} {f} , {H} {P} though", "the {f} is {H} {N}"),
    1: ("the {f} is {I} {N}", "this is a {N} {f}", "{N} {f} and {N} {g}",
        "it is a waste of time , the {f} is {N}"),
}
INTENSIFIERS = ("very", "really", "so", "truly")


def _fill(template: str, rng: np.random.Generator, features, lexicon: PolarityLexicon) -> list[str]:
    def pick(seq):
        return seq[int(rng.integers(len(seq)))]

    out = []
    for tok in template.split():
        if tok == "{f}":
            out.append(pick(features))
        elif tok == "{g}":
            out.append(pick(lexicon.features))
        elif tok == "{P}":
            out.append(pick(lexicon.positive))
        elif tok == "{N}":
            out.append(pick(lexicon.negative))
        elif tok == "{U}":
            out.extend(tokenize(pick(lexicon.neutral)))
        elif tok == "{H}":
            out.extend(tokenize(pick(lexicon.hedges)))
        elif tok == "{I}":
            out.append(pick(INTENSIFIERS))
        else:
            out.append(tok)
    return out


def synthesize_corpus(
    seed: int,
    n_users: int,
    n_items: int,
    n_records: int,
    lexicon: PolarityLexicon,
    coherent_fraction: float = 0.75,
    bias_std: float = 0.8,
    noise_std: float = 0.3,
    features_per_item: int = 3,
    max_features: int = 2,
) -> list[InteractionRecord]:
    """Seeded synthetic interactions with rule-checkable explanations.

    Ratings come from ``3 + user bias + item bias + noise``. Exactly
    ``round(coherent_fraction * n_records)`` explanations are written from
    templates of the record's own rating (rule-labeled coherent); the rest use
    another rating's templates and are rule-labeled incoherent. Every
    explanation names at least one of the record's features.
    """
    if min(n_users, n_items, n_records) < 1:
        raise ValueError("sizes must be at least 1")
    if not 0.0 <= coherent_fraction <= 1.0:
        raise ValueError("coherent_fraction must be within [0, 1]")
    rng = np.random.default_rng(seed)
    user_bias = rng.normal(0.0, bias_std, n_users)
    item_bias = rng.normal(0.0, bias_std, n_items)
    n_feat = len(lexicon.features)
    k = min(features_per_item, n_feat)
    item_features = [rng.choice(n_feat, size=k, replace=False) for _ in range(n_items)]
    user_pref = [rng.permutation(n_feat) for _ in range(n_users)]
    user_nfeat = rng.integers(1, max_features + 1, n_users)

    if n_records <= n_users * n_items:
        flat = rng.choice(n_users * n_items, size=n_records, replace=False)
    else:
        flat = rng.integers(0, n_users * n_items, n_records)
    coherent = np.zeros(n_records, dtype=bool)
    coherent[rng.permutation(n_records)[:int(round(coherent_fraction * n_records))]] = True

    width_u = len(str(n_users - 1))
    width_i = len(str(n_items - 1))
    records = []
    for r_idx, pair in enumerate(flat):
        u, i = divmod(int(pair), n_items)
        raw = 3.0 + user_bias[u] + item_bias[i] + rng.normal(0.0, noise_std)
        rating = int(np.clip(np.rint(raw), 1, 5))
        rank = {f: pos for pos, f in enumerate(user_pref[u])}
        feats = sorted(item_features[i], key=lambda f: rank[f])[:user_nfeat[u]]
        features = [lexicon.features[f] for f in feats]
        if coherent[r_idx]:
            source = rating
        while True:
            if not coherent[r_idx]:
                source = int(rng.choice([x for x in range(1, 6) if x != rating]))
            template = TEMPLATES[source][int(rng.integers(len(TEMPLATES[source])))]
            words = _fill(template, rng, features, lexicon)
            label = rule_label_coherence(rating, words, lexicon)
            if (label is Label.COHERENT) == bool(coherent[r_idx]):
                break
        records.append(InteractionRecord(
            user=f"u{u:0{width_u}d}", item=f"i{i:0{width_i}d}", rating=rating,
            features=features, explanation=words))
    return records


def split_records(records, seed: int = 0, valid: float = 0.1, test: float = 0.1) -> DatasetSplit:
    """Seeded random train/valid/test partition."""
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(test * n))
    n_valid = int(round(valid * n))
    if n >= 3:
        n_test = max(n_test, 1) if test > 0 else 0
        n_valid = max(n_valid, 1) if valid > 0 else 0
    test_idx = sorted(order[:n_test])
    valid_idx = sorted(order[n_test:n_test + n_valid])
    train_idx = sorted(order[n_test + n_valid:])
    return DatasetSplit(
        train=[records[k] for k in train_idx],
        valid=[records[k] for k in valid_idx],
        test=[records[k] for k in test_idx],
    )


def coherent_fraction(records, lexicon: PolarityLexicon) -> float:
    if not records:
        return 0.0
    hits = sum(rule_label_coherence(r.rating, r.explanation, lexicon) is Label.COHERENT
               for r in records)
    return hits / len(records)
