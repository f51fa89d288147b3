"""Review corpus ingestion: tokenization, vocabulary, splits, examples.

The input format is newline-delimited JSON in the Amazon 5-core schema
(``reviewerID``, ``asin``, ``overall``, ``reviewText``, ``unixReviewTime``).
Ingestion lowercases, strips punctuation, drops stopwords, assigns
train/val/test splits, then builds the vocabulary and padding limits from
the training split only.  Training examples exclude the review the user
wrote about the target item from both review grids.
"""

from __future__ import annotations

import gzip
import io
import json
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

logger = logging.getLogger(__name__)

CORPUS_FORMAT_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9']+")


class DataError(Exception):
    """Raised for unusable input data (empty corpus, bad ids, bad files)."""


def default_stopwords():
    """Stopword set shipped with the package (one word per line)."""
    text = resources.files("hti.assets").joinpath("stopwords_en.txt").read_text()
    return frozenset(w for w in text.split() if w)


def load_stopwords(path):
    with open(path, "r", encoding="utf-8") as f:
        return frozenset(w.strip() for w in f if w.strip())


def tokenize(text, stopwords=frozenset()):
    """Lowercase, strip punctuation, split on whitespace, drop stopwords."""
    tokens = _TOKEN_RE.findall(text.lower())
    out = []
    for tok in tokens:
        tok = tok.strip("'")
        if tok and tok not in stopwords:
            out.append(tok)
    return out


def empirical_quantile(values, q):
    """Smallest value covering fraction ``q``: the ceil(q*n)-th order statistic."""
    if not values:
        raise ValueError("empirical_quantile of empty sequence")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


@dataclass
class RawRecord:
    user_id: str
    item_id: str
    rating: float
    review_text: str
    timestamp: int | None = None

    def validate(self):
        if not self.user_id or not self.item_id:
            raise ValueError("empty user or item id")
        if not (1.0 <= float(self.rating) <= 5.0):
            raise ValueError(f"rating {self.rating} outside [1, 5]")


def parse_record(obj):
    """Map one Amazon 5-core JSON object to a RawRecord."""
    rec = RawRecord(
        user_id=str(obj["reviewerID"]),
        item_id=str(obj["asin"]),
        rating=float(obj["overall"]),
        review_text=str(obj.get("reviewText", "")),
        timestamp=int(obj["unixReviewTime"]) if obj.get("unixReviewTime") is not None else None,
    )
    rec.validate()
    return rec


def iter_records(path):
    """Yield (line_number, RawRecord-or-None) from an NDJSON file (.gz ok)."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, parse_record(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                yield lineno, None


class Vocabulary:
    """Dense token ids in [1, V]; id 0 is reserved for padding."""

    def __init__(self, token_to_id):
        self.token_to_id = dict(token_to_id)
        if 0 in self.token_to_id.values():
            raise ValueError("id 0 is reserved for padding")
        ids = sorted(self.token_to_id.values())
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError("vocabulary ids must be a bijection onto [1, V]")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    def __len__(self):
        return len(self.token_to_id)

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens):
        """Token ids for in-vocabulary tokens; out-of-vocabulary are dropped."""
        t2i = self.token_to_id
        return [t2i[t] for t in tokens if t in t2i]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids if i != 0]

    @classmethod
    def build(cls, token_lists, max_size):
        """Top ``max_size`` tokens by frequency; ties broken alphabetically."""
        counts = {}
        for tokens in token_lists:
            for t in tokens:
                counts[t] = counts.get(t, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
        return cls({t: i + 1 for i, (t, _) in enumerate(ranked)})


@dataclass
class PaddingLimits:
    max_review_len: int  # tokens kept per review
    max_user_reviews: int
    max_item_reviews: int

    def validate(self):
        if min(self.max_review_len, self.max_user_reviews, self.max_item_reviews) < 1:
            raise ValueError("padding limits must be >= 1")


@dataclass
class Interaction:
    user_idx: int
    item_idx: int
    rating: float
    token_ids: list
    split: str  # train | val | test
    timestamp: int | None = None


@dataclass
class PreprocessConfig:
    vocab_size: int = 20000
    quantile: float = 0.90
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    stopwords: frozenset = field(default_factory=default_stopwords)

    def validate(self):
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if not (0.0 < self.quantile <= 1.0):
            raise ValueError("quantile must be in (0, 1]")
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError("ratios must be three positive numbers")
        if sum(self.ratios) > 1.0 + 1e-9:
            raise ValueError("ratios must sum to at most 1")


class Corpus:
    """Indexed users/items, interactions with splits, vocabulary, limits."""

    def __init__(self, users, items, interactions, vocabulary, padding_limits, meta=None):
        self.users = list(users)
        self.items = list(items)
        self.user_index = {u: i for i, u in enumerate(self.users)}
        self.item_index = {v: i for i, v in enumerate(self.items)}
        self.interactions = list(interactions)
        self.vocabulary = vocabulary
        self.padding_limits = padding_limits
        self.meta = dict(meta or {})
        self._review_index = None

    @property
    def n_users(self):
        return len(self.users)

    @property
    def n_items(self):
        return len(self.items)

    def split_indices(self, split):
        return [i for i, x in enumerate(self.interactions) if x.split == split]

    def summary(self):
        """Dataset statistics: counts, reviews per user/item, words per review, density."""
        n_u, n_v, n_r = self.n_users, self.n_items, len(self.interactions)
        words = [len(x.token_ids) for x in self.interactions]
        per_user = np.bincount([x.user_idx for x in self.interactions], minlength=n_u)
        per_item = np.bincount([x.item_idx for x in self.interactions], minlength=n_v)
        return {
            "n_users": n_u,
            "n_items": n_v,
            "n_ratings": n_r,
            "docs_per_user": float(per_user.mean()) if n_u else 0.0,
            "docs_per_item": float(per_item.mean()) if n_v else 0.0,
            "words_per_doc": float(np.mean(words)) if words else 0.0,
            "density": n_r / (n_u * n_v) if n_u and n_v else 0.0,
        }

    def validate(self):
        vocab_size = len(self.vocabulary)
        for x in self.interactions:
            if any(not (1 <= t <= vocab_size) for t in x.token_ids):
                raise DataError("token id outside [1, V]")
            if x.split not in ("train", "val", "test", "unused"):
                raise DataError(f"unknown split {x.split!r}")
        train_users = {x.user_idx for x in self.interactions if x.split == "train"}
        train_items = {x.item_idx for x in self.interactions if x.split == "train"}
        cold = sum(
            1
            for x in self.interactions
            if x.split != "train" and (x.user_idx not in train_users or x.item_idx not in train_items)
        )
        if cold:
            logger.warning("%d val/test interactions involve a user or item unseen in train", cold)
        return cold

    # -- review lookup for example assembly ------------------------------

    def _build_review_index(self):
        by_user = [[] for _ in range(self.n_users)]
        by_item = [[] for _ in range(self.n_items)]
        for idx, x in enumerate(self.interactions):
            if x.split != "train":
                continue
            by_user[x.user_idx].append(idx)
            by_item[x.item_idx].append(idx)
        # most recent first; timestamp may be missing, fall back to corpus order
        def order(ids):
            return sorted(
                ids,
                key=lambda i: (
                    -(self.interactions[i].timestamp if self.interactions[i].timestamp is not None else i),
                    i,
                ),
            )

        self._review_index = ([order(ids) for ids in by_user], [order(ids) for ids in by_item])

    def training_reviews_of_user(self, user_idx):
        if self._review_index is None:
            self._build_review_index()
        return self._review_index[0][user_idx]

    def training_reviews_of_item(self, item_idx):
        if self._review_index is None:
            self._build_review_index()
        return self._review_index[1][item_idx]

    # -- serialization ----------------------------------------------------

    def to_json_obj(self):
        return {
            "format_version": CORPUS_FORMAT_VERSION,
            "users": self.users,
            "items": self.items,
            "vocabulary": self.vocabulary.token_to_id,
            "padding_limits": {
                "max_review_len": self.padding_limits.max_review_len,
                "max_user_reviews": self.padding_limits.max_user_reviews,
                "max_item_reviews": self.padding_limits.max_item_reviews,
            },
            "interactions": [
                [x.user_idx, x.item_idx, x.rating, x.split, x.timestamp, x.token_ids]
                for x in self.interactions
            ],
            "meta": self.meta,
            "summary": self.summary(),
        }

    def save(self, path):
        payload = json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"))
        data = payload.encode("utf-8")
        if str(path).endswith(".gz"):
            buf = io.BytesIO()
            # mtime=0 keeps output byte-identical across runs
            with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
                gz.write(data)
            data = buf.getvalue()
        with open(path, "wb") as f:
            f.write(data)

    @classmethod
    def load(cls, path):
        opener = gzip.open if str(path).endswith(".gz") else open
        try:
            with opener(path, "rt", encoding="utf-8") as f:
                obj = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read corpus file {path}: {e}") from e
        if obj.get("format_version") != CORPUS_FORMAT_VERSION:
            raise DataError(f"unsupported corpus format version {obj.get('format_version')}")
        limits = PaddingLimits(**obj["padding_limits"])
        interactions = [
            Interaction(u, v, r, ids, split, ts) for u, v, r, split, ts, ids in obj["interactions"]
        ]
        return cls(obj["users"], obj["items"], interactions, Vocabulary(obj["vocabulary"]), limits, obj.get("meta"))


def assign_splits(n, ratios, seed):
    """Deterministic split labels with proportions within 1 of exact.

    Ratios may sum to less than 1 (training-ratio sweeps keep val/test
    fixed and shrink train); leftover interactions are labeled "unused".
    """
    if n < 3:
        raise DataError("need at least 3 interactions to split")
    n_val = max(1, round(ratios[1] * n))
    n_test = max(1, round(ratios[2] * n))
    if sum(ratios) >= 1.0 - 1e-9:
        n_train = n - n_val - n_test
    else:
        n_train = min(round(ratios[0] * n), n - n_val - n_test)
    if n_train < 1:
        raise DataError("split ratios leave no training data")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[perm] = "unused"
    labels[perm[:n_train]] = "train"
    labels[perm[n_train : n_train + n_val]] = "val"
    labels[perm[n_train + n_val : n_train + n_val + n_test]] = "test"
    return labels.tolist()


def split_dataset(corpus, ratios, seed):
    """Reassign train/val/test labels; deterministic given the seed.

    Vocabulary and padding limits are kept as built; re-ingesting from the
    raw file is the supported way to rebuild them for a new training split.
    """
    labels = assign_splits(len(corpus.interactions), ratios, seed)
    interactions = [
        Interaction(x.user_idx, x.item_idx, x.rating, x.token_ids, lab, x.timestamp)
        for x, lab in zip(corpus.interactions, labels)
    ]
    meta = dict(corpus.meta)
    meta.update({"ratios": list(ratios), "seed": seed})
    return Corpus(corpus.users, corpus.items, interactions, corpus.vocabulary, corpus.padding_limits, meta)


def ingest_reviews(records, config=None):
    """Build a Corpus from raw records (iterable of RawRecord or (lineno, rec))."""
    config = config or PreprocessConfig()
    config.validate()
    stopwords = config.stopwords

    users, items = [], []
    user_index, item_index = {}, {}
    rows = []  # (user_idx, item_idx, rating, tokens, timestamp)
    skipped = 0
    for entry in records:
        lineno, rec = entry if isinstance(entry, tuple) else (None, entry)
        if rec is None:
            skipped += 1
            continue
        try:
            rec.validate()
        except ValueError:
            skipped += 1
            continue
        if rec.user_id not in user_index:
            user_index[rec.user_id] = len(users)
            users.append(rec.user_id)
        if rec.item_id not in item_index:
            item_index[rec.item_id] = len(items)
            items.append(rec.item_id)
        tokens = tokenize(rec.review_text, stopwords)
        rows.append((user_index[rec.user_id], item_index[rec.item_id], float(rec.rating), tokens, rec.timestamp))
    if skipped:
        logger.warning("skipped %d malformed records", skipped)
    if not rows:
        raise DataError("empty corpus after ingestion")

    labels = assign_splits(len(rows), config.ratios, config.seed)

    train_rows = [r for r, lab in zip(rows, labels) if lab == "train"]
    vocab = Vocabulary.build((r[3] for r in train_rows), config.vocab_size)

    interactions = [
        Interaction(u, v, rating, vocab.encode(tokens), lab, ts)
        for (u, v, rating, tokens, ts), lab in zip(rows, labels)
    ]

    train = [x for x in interactions if x.split == "train"]
    lengths = [len(x.token_ids) for x in train]
    per_user = {}
    per_item = {}
    for x in train:
        per_user[x.user_idx] = per_user.get(x.user_idx, 0) + 1
        per_item[x.item_idx] = per_item.get(x.item_idx, 0) + 1
    limits = PaddingLimits(
        max_review_len=max(1, empirical_quantile(lengths, config.quantile)),
        max_user_reviews=max(1, empirical_quantile(list(per_user.values()), config.quantile)),
        max_item_reviews=max(1, empirical_quantile(list(per_item.values()), config.quantile)),
    )
    limits.validate()

    meta = {
        "vocab_size": config.vocab_size,
        "quantile": config.quantile,
        "ratios": list(config.ratios),
        "seed": config.seed,
        "skipped_records": skipped,
    }
    corpus = Corpus(users, items, interactions, vocab, limits, meta)
    corpus.validate()
    return corpus


def ingest_file(path, config=None):
    return ingest_reviews(iter_records(path), config)


@dataclass
class TrainingExample:
    """One (user, item, rating) with leave-target-review-out review grids."""

    user_idx: int
    item_idx: int
    rating: float
    user_tokens: np.ndarray  # (m, p) int32, 0 = pad
    user_token_mask: np.ndarray  # (m, p) bool
    user_review_mask: np.ndarray  # (m,) bool
    item_tokens: np.ndarray  # (n, p)
    item_token_mask: np.ndarray
    item_review_mask: np.ndarray


def _fill_grid(corpus, review_ids, exclude_user, exclude_item, capacity, max_len):
    tokens = np.zeros((capacity, max_len), dtype=np.int32)
    token_mask = np.zeros((capacity, max_len), dtype=bool)
    review_mask = np.zeros(capacity, dtype=bool)
    slot = 0
    for rid in review_ids:
        x = corpus.interactions[rid]
        if x.user_idx == exclude_user and x.item_idx == exclude_item:
            continue
        ids = x.token_ids[:max_len]
        tokens[slot, : len(ids)] = ids
        token_mask[slot, : len(ids)] = True
        review_mask[slot] = True
        slot += 1
        if slot == capacity:
            break
    return tokens, token_mask, review_mask


def assemble_example(corpus, user_idx, item_idx, rating):
    """Padded review grids for one pair, excluding the target review.

    A side with no remaining training reviews yields a fully masked grid.
    """
    lim = corpus.padding_limits
    u_tok, u_tm, u_rm = _fill_grid(
        corpus,
        corpus.training_reviews_of_user(user_idx),
        user_idx,
        item_idx,
        lim.max_user_reviews,
        lim.max_review_len,
    )
    v_tok, v_tm, v_rm = _fill_grid(
        corpus,
        corpus.training_reviews_of_item(item_idx),
        user_idx,
        item_idx,
        lim.max_item_reviews,
        lim.max_review_len,
    )
    return TrainingExample(user_idx, item_idx, rating, u_tok, u_tm, u_rm, v_tok, v_tm, v_rm)


@dataclass
class ExampleBatch:
    """Stacked array view of a list of TrainingExamples."""

    user_idx: np.ndarray  # (B,)
    item_idx: np.ndarray  # (B,)
    ratings: np.ndarray  # (B,)
    user_tokens: np.ndarray  # (B, m, p)
    user_token_mask: np.ndarray
    user_review_mask: np.ndarray  # (B, m)
    item_tokens: np.ndarray  # (B, n, p)
    item_token_mask: np.ndarray
    item_review_mask: np.ndarray

    def __len__(self):
        return len(self.ratings)


def assemble_batch(corpus, interaction_ids):
    examples = []
    for i in interaction_ids:
        x = corpus.interactions[i]
        examples.append(assemble_example(corpus, x.user_idx, x.item_idx, x.rating))
    return ExampleBatch(
        user_idx=np.array([e.user_idx for e in examples], dtype=np.int64),
        item_idx=np.array([e.item_idx for e in examples], dtype=np.int64),
        ratings=np.array([e.rating for e in examples], dtype=np.float64),
        user_tokens=np.stack([e.user_tokens for e in examples]),
        user_token_mask=np.stack([e.user_token_mask for e in examples]),
        user_review_mask=np.stack([e.user_review_mask for e in examples]),
        item_tokens=np.stack([e.item_tokens for e in examples]),
        item_token_mask=np.stack([e.item_token_mask for e in examples]),
        item_review_mask=np.stack([e.item_review_mask for e in examples]),
    )
