"""Trivial reference predictors: global mean and user/item bias model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import DataError
from .evaluator import MetricsReport, metrics_from_residuals
from .predictor import clip_ratings


@dataclass
class BiasModel:
    """mu + b_u + b_v with biases fit as means of successive residuals."""

    global_mean: float = 0.0
    user_bias: dict = field(default_factory=dict)
    item_bias: dict = field(default_factory=dict)

    def fit(self, corpus):
        train = [x for x in corpus.interactions if x.split == "train"]
        if not train:
            raise DataError("empty train split")
        ratings = np.array([x.rating for x in train])
        self.global_mean = float(ratings.mean())
        by_user = {}
        for x in train:
            by_user.setdefault(x.user_idx, []).append(x.rating - self.global_mean)
        self.user_bias = {u: float(np.mean(res)) for u, res in by_user.items()}
        by_item = {}
        for x in train:
            r = x.rating - self.global_mean - self.user_bias[x.user_idx]
            by_item.setdefault(x.item_idx, []).append(r)
        self.item_bias = {v: float(np.mean(res)) for v, res in by_item.items()}
        return self

    def predict(self, user_idx, item_idx):
        raw = (self.global_mean + self.user_bias.get(user_idx, 0.0)
               + self.item_bias.get(item_idx, 0.0))
        return float(clip_ratings(raw))

    def predict_split(self, corpus, split):
        ids = corpus.split_indices(split)
        if not ids:
            raise DataError(f"empty split {split!r}")
        preds = np.array([self.predict(corpus.interactions[i].user_idx,
                                       corpus.interactions[i].item_idx) for i in ids])
        targets = np.array([corpus.interactions[i].rating for i in ids])
        return preds, targets


def fit_and_evaluate(corpus, split="test", use_biases=True):
    """MetricsReport for the bias model (or plain global mean) on a split."""
    model = BiasModel().fit(corpus)
    if not use_biases:
        model.user_bias = {}
        model.item_bias = {}
    preds, targets = model.predict_split(corpus, split)
    mae, rmse = metrics_from_residuals(targets - preds)
    return MetricsReport(mae=mae, rmse=rmse, n_examples=len(preds))
