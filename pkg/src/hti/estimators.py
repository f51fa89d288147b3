"""Scikit-learn style estimator wrappers around the training pipeline.

``HTIRegressor.fit`` takes a Corpus (its embedded split labels drive
training and early stopping) and ``predict`` takes pairs of raw user/item
ids or integer indices.  Hyperparameters live flat on the constructor so
``get_params``/``set_params`` and grid-search tooling work unchanged.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import numerics as nm
from .corpus import Corpus, DataError, ExampleBatch, assemble_example
from .evaluator import EVAL_BATCH, evaluate
from .model import HyperParams, VARIANTS
from .predictor import clip_ratings


def check_corpus(X):
    if not isinstance(X, Corpus):
        raise TypeError(f"expected a Corpus, got {type(X).__name__}")
    if not X.interactions:
        raise DataError("corpus has no interactions")
    return X


def check_pairs(corpus, X):
    """Normalize pairs to (user_idx, item_idx) integer arrays.

    Accepts raw id strings or integer indices, shape (n, 2).
    """
    pairs = np.asarray(X, dtype=object)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("pairs must have shape (n, 2)")
    users = np.empty(len(pairs), dtype=np.int64)
    items = np.empty(len(pairs), dtype=np.int64)
    for i, (u, v) in enumerate(pairs):
        if isinstance(u, str):
            if u not in corpus.user_index:
                raise DataError(f"unknown user id {u!r}")
            users[i] = corpus.user_index[u]
        else:
            users[i] = int(u)
        if isinstance(v, str):
            if v not in corpus.item_index:
                raise DataError(f"unknown item id {v!r}")
            items[i] = corpus.item_index[v]
        else:
            items[i] = int(v)
    if (users < 0).any() or (users >= corpus.n_users).any():
        raise DataError("user index out of range")
    if (items < 0).any() or (items >= corpus.n_items).any():
        raise DataError("item index out of range")
    return users, items


class HTIRegressor(BaseEstimator, RegressorMixin):
    """Hierarchical text-interaction rating predictor.

    Parameters mirror HyperParams; ``variant`` selects the full model or
    one of the pooling ablations (wavg, wmax, davg, dmax).
    """

    def __init__(self, variant="full", batch_size=128, learning_rate=1e-4, l2_lambda=1e-5,
                 dropout=0.5, embed_dim=100, k1=50, k_lat=32, kernel_sizes=(3, 5),
                 layer2_kernel=5, max_epochs=60, patience=10, grad_clip=5.0, seed=0,
                 dtype="float32", embeddings_path=None, verbose=False):
        self.variant = variant
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.l2_lambda = l2_lambda
        self.dropout = dropout
        self.embed_dim = embed_dim
        self.k1 = k1
        self.k_lat = k_lat
        self.kernel_sizes = kernel_sizes
        self.layer2_kernel = layer2_kernel
        self.max_epochs = max_epochs
        self.patience = patience
        self.grad_clip = grad_clip
        self.seed = seed
        self.dtype = dtype
        self.embeddings_path = embeddings_path
        self.verbose = verbose

    def _hyper(self):
        return HyperParams(
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            l2_lambda=self.l2_lambda, dropout=self.dropout, embed_dim=self.embed_dim,
            k1=self.k1, k_lat=self.k_lat, kernel_sizes=tuple(self.kernel_sizes),
            layer2_kernel=self.layer2_kernel, max_epochs=self.max_epochs,
            patience=self.patience, grad_clip=self.grad_clip, seed=self.seed,
            dtype=self.dtype,
        )

    def fit(self, X, y=None):
        """Train on the corpus ``X`` using its train/val split labels."""
        from .trainer import train
        from .word_encoder import load_pretrained_embeddings

        corpus = check_corpus(X)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        hyper = self._hyper()
        hyper.validate()
        embeddings = None
        if self.embeddings_path:
            rng = np.random.default_rng(hyper.seed)
            embeddings, _ = load_pretrained_embeddings(
                self.embeddings_path, corpus.vocabulary, hyper.embed_dim, rng,
                dtype=hyper.np_dtype())
        result = train(corpus, hyper, variant=self.variant, embeddings=embeddings,
                       verbose=self.verbose)
        self.model_ = result.model
        self.corpus_ = corpus
        self.training_log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.best_val_mae_ = result.best_val_mae
        return self

    def predict(self, X):
        """Clipped rating predictions for (user, item) pairs."""
        if not hasattr(self, "model_"):
            raise RuntimeError("HTIRegressor is not fitted; call fit() first")
        users, items = check_pairs(self.corpus_, X)
        fake_rating = np.zeros(len(users))
        preds = np.empty(len(users), dtype=np.float64)
        with nm.no_grad():
            for lo in range(0, len(users), EVAL_BATCH):
                hi = min(len(users), lo + EVAL_BATCH)
                examples = [
                    assemble_example(self.corpus_, users[i], items[i], fake_rating[i])
                    for i in range(lo, hi)
                ]
                batch = ExampleBatch(
                    user_idx=users[lo:hi], item_idx=items[lo:hi], ratings=fake_rating[lo:hi],
                    user_tokens=np.stack([e.user_tokens for e in examples]),
                    user_token_mask=np.stack([e.user_token_mask for e in examples]),
                    user_review_mask=np.stack([e.user_review_mask for e in examples]),
                    item_tokens=np.stack([e.item_tokens for e in examples]),
                    item_token_mask=np.stack([e.item_token_mask for e in examples]),
                    item_review_mask=np.stack([e.item_review_mask for e in examples]),
                )
                raw, _ = self.model_.forward(batch, train=False)
                preds[lo:hi] = raw.data.astype(np.float64)
        return clip_ratings(preds)

    def score_split(self, split="test"):
        """MetricsReport on one of the corpus splits (clipped predictions)."""
        if not hasattr(self, "model_"):
            raise RuntimeError("HTIRegressor is not fitted; call fit() first")
        return evaluate(self.model_, self.corpus_, split)


class BiasRegressor(BaseEstimator, RegressorMixin):
    """Global-mean plus user/item bias floor, same fit/predict surface."""

    def __init__(self, use_biases=True):
        self.use_biases = use_biases

    def fit(self, X, y=None):
        from .baseline import BiasModel

        corpus = check_corpus(X)
        model = BiasModel().fit(corpus)
        if not self.use_biases:
            model.user_bias = {}
            model.item_bias = {}
        self.model_ = model
        self.corpus_ = corpus
        return self

    def predict(self, X):
        if not hasattr(self, "model_"):
            raise RuntimeError("BiasRegressor is not fitted; call fit() first")
        users, items = check_pairs(self.corpus_, X)
        return np.array([self.model_.predict(u, v) for u, v in zip(users, items)])
