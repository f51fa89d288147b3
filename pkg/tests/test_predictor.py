"""Prediction head and loss: hand oracles, invariances, end-to-end gradients."""

import numpy as np
import pytest

import hti.numerics as nm
from hti.corpus import assemble_batch
from hti.model import HTIModel, HyperParams
from hti.numerics import ParamTape, Tensor, grad_check
from hti.predictor import (
    clip_ratings,
    combine,
    init_predictor_params,
    l2_penalty,
    loss,
    mlp_widths,
    predict_mlp,
)

from conftest import jitter_params, tiny_hyper


def make_tape(n_users=3, n_items=3, k_lat=4, seed=0):
    tape = ParamTape()
    init_predictor_params(tape, np.random.default_rng(seed), n_users, n_items, k_lat,
                          dtype=np.float64)
    return tape


class TestCombine:
    def test_cold_case_reduces_to_latents(self):
        u = Tensor(np.array([[1.0, 2.0]]))
        v = Tensor(np.array([[3.0, 4.0]]))
        zero = Tensor(np.zeros((1, 2)))
        h0 = combine(u, zero, v, Tensor(np.zeros((1, 2))))
        np.testing.assert_allclose(h0.data[0], [1, 2, 3, 4, 3, 8])

    def test_zero_latents_reduce_to_text(self):
        zero = Tensor(np.zeros((1, 2)))
        d_u = Tensor(np.array([[1.0, -1.0]]))
        d_v = Tensor(np.array([[2.0, 0.5]]))
        h0 = combine(zero, d_u, Tensor(np.zeros((1, 2))), d_v)
        np.testing.assert_allclose(h0.data[0], [1, -1, 2, 0.5, 2, -0.5])

    def test_hand_case(self):
        u = Tensor(np.array([[1.0, 0.0]]))
        d_u = Tensor(np.array([[0.0, 1.0]]))
        v = Tensor(np.array([[2.0, 2.0]]))
        d_v = Tensor(np.array([[-1.0, 0.0]]))
        h0 = combine(u, d_u, v, d_v)
        np.testing.assert_allclose(h0.data[0], [1, 1, 1, 2, 1, 2])


class TestMlp:
    def test_widths_halve(self):
        assert mlp_widths(32) == [96, 48, 24, 1]
        assert mlp_widths(5) == [15, 8, 4, 1]

    def test_zero_network_predicts_zero(self):
        tape = make_tape()
        for name, t in tape.items():
            if name.startswith("mlp."):
                t.data[:] = 0.0
        h0 = Tensor(np.random.default_rng(0).normal(size=(3, 12)))
        out = predict_mlp(tape, h0, train=False)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_identity_path_hand_computed(self):
        tape = ParamTape()
        init_predictor_params(tape, np.random.default_rng(0), 1, 1, 1, dtype=np.float64)
        # widths [3, 2, 1, 1]; route h0[0] through with fixed weights
        tape["mlp.1.w"].data[:] = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]])
        tape["mlp.1.b"].data[:] = [0.5, 0.0]
        tape["mlp.2.w"].data[:] = np.array([[2.0], [0.0]])
        tape["mlp.2.b"].data[:] = [0.0]
        tape["mlp.3.w"].data[:] = np.array([[-1.0]])
        tape["mlp.3.b"].data[:] = [0.25]
        h0 = Tensor(np.array([[3.0, 7.0, -2.0]]))
        out = predict_mlp(tape, h0, train=False)
        # relu(3 + 0.5) = 3.5 -> relu(7.0) = 7.0 -> -7.0 + 0.25
        assert out.data[0] == pytest.approx(-6.75)

    def test_eval_mode_deterministic_with_dropout_configured(self):
        tape = make_tape()
        h0 = Tensor(np.random.default_rng(1).normal(size=(4, 12)))
        a = predict_mlp(tape, h0, train=False, dropout_rate=0.5,
                        rng=np.random.default_rng(0))
        b = predict_mlp(tape, h0, train=False, dropout_rate=0.5,
                        rng=np.random.default_rng(99))
        np.testing.assert_array_equal(a.data, b.data)

    def test_train_mode_dropout_changes_outputs(self):
        tape = make_tape()
        jitter_params(tape, seed=5)
        h0 = Tensor(np.abs(np.random.default_rng(1).normal(size=(4, 12))) + 0.5)
        a = predict_mlp(tape, h0, train=True, dropout_rate=0.5, rng=np.random.default_rng(0))
        b = predict_mlp(tape, h0, train=True, dropout_rate=0.5, rng=np.random.default_rng(1))
        assert not np.array_equal(a.data, b.data)


class TestLoss:
    def test_perfect_predictions_zero(self):
        tape = ParamTape()
        preds = Tensor(np.array([3.0, 4.0, 5.0]))
        assert loss(preds, np.array([3.0, 4.0, 5.0]), tape, 0.0).item() == 0.0

    def test_single_pair_squared_residual(self):
        tape = ParamTape()
        out = loss(Tensor(np.array([3.0])), np.array([5.0]), tape, 0.0)
        assert out.item() == pytest.approx(4.0)

    def test_l2_term_direct_sum(self):
        tape = ParamTape()
        tape.add("w", np.array([1.0, -2.0]))
        out = loss(Tensor(np.array([4.0])), np.array([4.0]), tape, 0.1)
        assert out.item() == pytest.approx(0.1 * 5.0)

    def test_pad_row_excluded_from_l2(self):
        tape = ParamTape()
        we = tape.add("embed.W_e", np.array([[9.0, 9.0], [1.0, 1.0]]))
        penalty = l2_penalty(tape)
        assert penalty.item() == pytest.approx(2.0)
        penalty.backward()
        np.testing.assert_array_equal(we.grad[0], 0.0)

    def test_batch_order_invariance(self):
        tape = ParamTape()
        rng = np.random.default_rng(0)
        preds = rng.normal(size=8)
        targets = rng.normal(size=8)
        a = loss(Tensor(preds), targets, tape, 0.0).item()
        perm = rng.permutation(8)
        b = loss(Tensor(preds[perm]), targets[perm], tape, 0.0).item()
        assert a == pytest.approx(b, rel=1e-12)

    def test_nonfinite_prediction_fatal(self):
        tape = ParamTape()
        with pytest.raises(FloatingPointError):
            loss(Tensor(np.array([np.nan])), np.array([1.0]), tape, 0.0)


class TestClip:
    def test_clip_bounds(self):
        np.testing.assert_array_equal(clip_ratings(np.array([-3.0, 2.5, 9.0])),
                                      [1.0, 2.5, 5.0])


class TestEndToEndGradients:
    def test_zero_gradient_at_perfect_fit(self, small_corpus):
        h = tiny_hyper()
        model = HTIModel(small_corpus.n_users, small_corpus.n_items,
                         len(small_corpus.vocabulary), h)
        jitter_params(model.tape)
        ids = small_corpus.split_indices("train")[:4]
        batch = assemble_batch(small_corpus, ids)
        with nm.no_grad():
            preds, _ = model.forward(batch, train=False)
        batch.ratings = preds.data.copy()  # targets equal predictions
        model.tape.zero_grad()
        model.loss(batch, train=False).backward()
        for name, t in model.tape.items():
            if t.grad is not None:
                np.testing.assert_allclose(t.grad, 0.0, atol=1e-12)

    def test_full_model_grad_check(self, toy_model, toy_batch):
        err = grad_check(lambda: toy_model.loss(toy_batch, train=False), toy_model.tape,
                         eps=1e-5, coords_per_param=5, rng=np.random.default_rng(4))
        assert err <= 1e-4
