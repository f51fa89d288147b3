"""Adam oracle checks, determinism, pad-row freezing, divergence handling."""

import numpy as np
import pytest

from hti.corpus import assemble_batch
from hti.model import HyperParams
from hti.numerics import ParamTape
from hti.synthetic import synthetic_corpus
from hti.trainer import AdamState, TrainingLog, adam_step, train

from conftest import tiny_hyper


def scalar_adam_reference(grads, lr, b1=0.9, b2=0.999, eps=1e-8, x0=0.0):
    """Hand-rolled scalar Adam recurrence (the oracle)."""
    x, m, v = x0, 0.0, 0.0
    xs = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        x -= lr * m_hat / (np.sqrt(v_hat) + eps)
        xs.append(x)
    return xs


def run_adam(grads, lr, b1=0.9, b2=0.999, x0=0.0):
    tape = ParamTape()
    x = tape.add("x", np.array([x0]))
    state = AdamState(beta1=b1, beta2=b2)
    out = []
    for g in grads:
        x.grad = np.array([g])
        adam_step(tape, state, lr)
        out.append(float(x.data[0]))
    return out


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        tape = ParamTape()
        x = tape.add("x", np.array([1.0, 2.0]))
        x.grad = np.zeros(2)
        adam_step(tape, AdamState(), 0.1)
        np.testing.assert_array_equal(x.data, [1.0, 2.0])

    def test_missing_gradient_skipped(self):
        tape = ParamTape()
        x = tape.add("x", np.array([1.0]))
        adam_step(tape, AdamState(), 0.1)
        np.testing.assert_array_equal(x.data, [1.0])

    def test_first_step_formula(self):
        # after bias correction: -lr * g / (sqrt(g^2) + eps), close to a sign step
        lr, eps = 0.01, 1e-8
        for g in (3.7, -0.002, 150.0):
            got = run_adam([g], lr)[0]
            assert got == pytest.approx(-lr * g / (abs(g) + eps), rel=1e-12)
            assert got == pytest.approx(-lr * np.sign(g), rel=1e-4)

    @pytest.mark.parametrize("g", [0.5, -2.0])
    def test_constant_gradient_matches_scalar_loop(self, g):
        grads = [g] * 20
        np.testing.assert_allclose(run_adam(grads, 0.05), scalar_adam_reference(grads, 0.05),
                                   rtol=1e-12)

    def test_random_gradients_match_scalar_loop(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=30).tolist()
        np.testing.assert_allclose(run_adam(grads, 0.01), scalar_adam_reference(grads, 0.01),
                                   rtol=1e-12)

    def test_zero_betas_degenerate_to_normalized_sgd(self):
        rng = np.random.default_rng(1)
        grads = rng.normal(size=10).tolist()
        got = run_adam(grads, 0.02, b1=0.0, b2=0.0)
        expected = scalar_adam_reference(grads, 0.02, b1=0.0, b2=0.0)
        np.testing.assert_allclose(got, expected, rtol=1e-12)
        # each step is -lr * g/(|g| + eps): approximately a sign step
        diffs = np.diff([0.0] + got)
        np.testing.assert_allclose(diffs, [-0.02 * np.sign(g) for g in grads], rtol=1e-5)


@pytest.fixture(scope="module")
def train_corpus():
    return synthetic_corpus(n_users=16, n_items=10, reviews_per_user=4, seed=3, vocab_size=120)


class TestTrainingLoop:
    def test_zero_learning_rate_leaves_params(self, train_corpus):
        h = tiny_hyper(max_epochs=2, patience=2)
        h.learning_rate = 0.0
        # learning_rate must be positive per validation; drive the loop manually
        from hti.model import HTIModel
        from hti.trainer import AdamState, adam_step

        model = HTIModel(train_corpus.n_users, train_corpus.n_items,
                         len(train_corpus.vocabulary), tiny_hyper())
        before = model.tape.state_dict()
        batch = assemble_batch(train_corpus, train_corpus.split_indices("train")[:8])
        state = AdamState()
        model.tape.zero_grad()
        model.loss(batch, train=False).backward()
        adam_step(model.tape, state, 0.0)
        for name, arr in before.items():
            np.testing.assert_array_equal(model.tape[name].data, arr)

    def test_same_seed_identical_trajectories(self, train_corpus):
        h = tiny_hyper(max_epochs=3, patience=3, dropout=0.5, l2_lambda=1e-5)
        r1 = train(train_corpus, h)
        r2 = train(train_corpus, h)
        for name, arr in r1.model.tape.state_dict().items():
            np.testing.assert_array_equal(arr, r2.model.tape[name].data)
        assert [rec["train_loss"] for rec in r1.log.records] == \
            [rec["train_loss"] for rec in r2.log.records]

    def test_pad_row_stays_zero(self, train_corpus):
        h = tiny_hyper(max_epochs=3, patience=3, l2_lambda=1e-4, dropout=0.3)
        result = train(train_corpus, h)
        np.testing.assert_array_equal(result.model.tape["embed.W_e"].data[0], 0.0)

    def test_divergence_aborts_with_last_good_state(self, train_corpus):
        h = tiny_hyper(max_epochs=5, patience=5)
        h.learning_rate = 1e150  # one step overflows the conv stack
        h.grad_clip = 0.0
        result = train(train_corpus, h)
        assert result.diverged
        for name, t in result.model.tape.items():
            assert np.isfinite(t.data).all()

    def test_early_stopping_respects_patience(self, train_corpus):
        h = tiny_hyper(max_epochs=40, patience=2)
        result = train(train_corpus, h)
        assert len(result.log.records) <= 40
        if len(result.log.records) < 40:
            maes = [rec["val_mae"] for rec in result.log.records]
            best = int(np.argmin(maes))
            assert len(maes) - (best + 1) >= 2

    def test_log_records_schema(self, train_corpus, tmp_path):
        h = tiny_hyper(max_epochs=2, patience=2)
        result = train(train_corpus, h)
        path = tmp_path / "log.ndjson"
        result.log.write_ndjson(path)
        import json

        lines = path.read_text().strip().split("\n")
        assert len(lines) == len(result.log.records)
        rec = json.loads(lines[0])
        assert set(rec) == {"epoch", "train_loss", "val_mae", "val_rmse", "wall_seconds"}


@pytest.fixture(scope="module")
def overfit_run():
    corpus = synthetic_corpus(n_users=16, n_items=10, reviews_per_user=5, seed=3,
                              vocab_size=120)
    train_ids = corpus.split_indices("train")[:32]
    val_ids = corpus.split_indices("val")[:8]
    keep = set(train_ids) | set(val_ids)
    for i, x in enumerate(corpus.interactions):
        if i not in keep:
            x.split = "unused"
    corpus._review_index = None
    h = HyperParams(embed_dim=16, k1=8, k_lat=8, dropout=0.0, l2_lambda=0.0,
                    learning_rate=3e-3, batch_size=32, max_epochs=180, patience=180,
                    dtype="float64", seed=0)
    return train(corpus, h)


class TestOverfitSmoke:
    def test_training_loss_memorizes_small_corpus(self, overfit_run):
        losses = [rec["train_loss"] for rec in overfit_run.log.records]
        assert min(losses) <= 0.01

    def test_loss_curve_mostly_non_increasing_after_warmup(self, overfit_run):
        losses = [rec["train_loss"] for rec in overfit_run.log.records]
        after = losses[10:]
        violations = sum(1 for a, b in zip(after, after[1:]) if b > a)
        assert violations <= max(1, round(0.05 * len(after)))
