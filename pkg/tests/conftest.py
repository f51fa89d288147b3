import numpy as np
import pytest

from hti.corpus import assemble_batch
from hti.model import HTIModel, HyperParams
from hti.synthetic import synthetic_corpus


def jitter_params(tape, seed=7, lo=0.01, hi=0.05):
    """Move every parameter off its init point.

    Zero-initialized biases put relu pre-activations exactly on the kink,
    where finite differences disagree with any subgradient choice; tests
    that compare against central differences need a smooth point.
    """
    rng = np.random.default_rng(seed)
    for name, t in tape.items():
        sign = np.where(rng.random(t.data.shape) < 0.5, -1.0, 1.0)
        t.data += rng.uniform(lo, hi, size=t.data.shape) * sign
    if "embed.W_e" in tape:
        tape["embed.W_e"].data[0] = 0.0


def tiny_hyper(**overrides):
    base = dict(embed_dim=10, k1=6, k_lat=8, dtype="float64", dropout=0.0,
                l2_lambda=0.0, batch_size=8, max_epochs=5, patience=5, seed=0)
    base.update(overrides)
    return HyperParams(**base)


@pytest.fixture(scope="session")
def small_corpus():
    c = synthetic_corpus(n_users=8, n_items=6, reviews_per_user=4, seed=2, vocab_size=60)
    c.padding_limits.max_review_len = 8
    c.padding_limits.max_user_reviews = 3
    c.padding_limits.max_item_reviews = 3
    return c


@pytest.fixture()
def toy_model(small_corpus):
    h = tiny_hyper(l2_lambda=1e-4)
    model = HTIModel(small_corpus.n_users, small_corpus.n_items,
                     len(small_corpus.vocabulary), h)
    jitter_params(model.tape)
    return model


@pytest.fixture()
def toy_batch(small_corpus):
    ids = small_corpus.split_indices("train")[:6]
    return assemble_batch(small_corpus, ids)
