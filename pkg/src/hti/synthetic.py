"""Synthetic review corpora with a learnable text signal.

Ratings follow a classic bias structure (global mean, user bias, item
bias) plus an aspect-affinity term: every item belongs to one aspect,
every user prefers one aspect, and matching pairs rate higher.  Review
texts carry the signal: sentiment words tied to the review's own rating
and aspect words tied to the item.  Bias-only baselines cannot see the
affinity term, so a text model has genuine headroom here.  Used by the
test suite and handy for demos when no real dataset is around.
"""

from __future__ import annotations

import json

import numpy as np

from .corpus import PreprocessConfig, RawRecord, ingest_reviews

POSITIVE = ("great solid dependable durable fantastic excellent love perfect wonderful "
            "reliable sturdy amazing superb impressive smooth comfortable crisp bright "
            "responsive accurate").split()
NEGATIVE = ("broken flimsy terrible awful disappointing useless cheap fragile noisy "
            "defective horrible failed cracked unreliable stiff dull muddy sloppy "
            "unresponsive inaccurate").split()
NEUTRAL = ("bought using month shipped arrived box setup manual color size weight "
           "ordered replaced tried store price paid model version review item product "
           "time first second daily travel home office gift friend").split()
ASPECT_WORDS = {
    0: "strings tone bridge fret pickup resonance sustain tuning".split(),
    1: "cable plug adapter connector shielding latency signal interference".split(),
    2: "stand mount clamp tripod hinge bracket swivel lock".split(),
    3: "pedal knob switch preset loop distortion reverb delay".split(),
}


def generate_records(n_users=120, n_items=80, reviews_per_user=6, n_aspects=4, seed=0,
                     affinity=1.2, noise=0.35, words_per_review=(8, 18)):
    """List of RawRecords with bias + aspect-affinity rating structure."""
    rng = np.random.default_rng(seed)
    user_bias = rng.normal(0.0, 0.45, size=n_users)
    item_bias = rng.normal(0.0, 0.45, size=n_items)
    user_pref = rng.integers(0, n_aspects, size=n_users)
    item_aspect = rng.integers(0, n_aspects, size=n_items)
    mu = 3.4

    records = []
    t = 1_300_000_000
    for u in range(n_users):
        n_rev = max(3, int(rng.poisson(reviews_per_user)))
        items = rng.choice(n_items, size=min(n_rev, n_items), replace=False)
        for v in items:
            match = 1.0 if user_pref[u] == item_aspect[v] else 0.0
            score = mu + user_bias[u] + item_bias[v] + affinity * (match - 1.0 / n_aspects)
            score += rng.normal(0.0, noise)
            rating = float(np.clip(np.round(score), 1, 5))

            n_words = int(rng.integers(*words_per_review))
            pos_frac = (rating - 1.0) / 4.0
            words = []
            for _ in range(n_words):
                roll = rng.random()
                if roll < 0.45:
                    pool = POSITIVE if rng.random() < pos_frac else NEGATIVE
                elif roll < 0.70:
                    pool = ASPECT_WORDS[int(item_aspect[v])]
                else:
                    pool = NEUTRAL
                words.append(pool[rng.integers(0, len(pool))])
            t += int(rng.integers(1, 5000))
            records.append(RawRecord(
                user_id=f"u{u:04d}", item_id=f"i{v:04d}", rating=rating,
                review_text=" ".join(words), timestamp=t,
            ))
    return records


def synthetic_corpus(n_users=120, n_items=80, reviews_per_user=6, seed=0, vocab_size=400,
                     ratios=(0.8, 0.1, 0.1), quantile=0.9, **gen_kwargs):
    records = generate_records(n_users=n_users, n_items=n_items,
                               reviews_per_user=reviews_per_user, seed=seed, **gen_kwargs)
    config = PreprocessConfig(vocab_size=vocab_size, quantile=quantile, ratios=ratios,
                              seed=seed, stopwords=frozenset())
    return ingest_reviews(records, config)


def write_ndjson(records, path):
    """Records in the Amazon 5-core NDJSON schema (for CLI round trips)."""
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({
                "reviewerID": r.user_id,
                "asin": r.item_id,
                "overall": r.rating,
                "reviewText": r.review_text,
                "unixReviewTime": r.timestamp,
            }) + "\n")
