"""Interaction module: distance/attention oracles, loop-based equivalence,
normalization and convex-hull properties, gradient checks."""

import math

import numpy as np
import pytest

import hti.numerics as nm
from hti.numerics import ParamTape, Tensor, grad_check
from hti.review_interaction import (
    aggregate,
    gate_fuse,
    init_interaction_params,
    initial_representations,
    intermediate_representation,
    pairwise_distances,
    pool_aggregate,
)

from conftest import jitter_params


def make_tape(k=4, seed=0, jitter=True):
    tape = ParamTape()
    init_interaction_params(tape, np.random.default_rng(seed), k, dtype=np.float64)
    if jitter:
        jitter_params(tape, seed=seed + 11)
    return tape


def loop_reference(tape, u_reps, i_reps, u_mask, i_mask):
    """Straight-line scalar reimplementation of the whole interaction pass."""
    p = {n: t.data for n, t in tape.items()}
    b, m, k = u_reps.shape
    n = i_reps.shape[1]
    d_users, d_items = np.zeros((b, k)), np.zeros((b, k))
    for bi in range(b):
        e = np.full((m, n), np.inf)
        for ki in range(m):
            for ti in range(n):
                if u_mask[bi, ki] and i_mask[bi, ti]:
                    e[ki, ti] = math.sqrt(sum((u_reps[bi, ki, c] - i_reps[bi, ti, c]) ** 2
                                              for c in range(k)))

        def softmax_masked(scores, mask):
            out = np.zeros(len(scores))
            idx = [i for i in range(len(scores)) if mask[i]]
            if not idx:
                return out
            mx = max(scores[i] for i in idx)
            exps = {i: math.exp(scores[i] - mx) for i in idx}
            z = sum(exps.values())
            for i in idx:
                out[i] = exps[i] / z
            return out

        a = np.array([min((e[ki, ti] for ti in range(n) if np.isfinite(e[ki, ti])), default=0.0)
                      for ki in range(m)])
        bb = np.array([min((e[ki, ti] for ki in range(m) if np.isfinite(e[ki, ti])), default=0.0)
                       for ti in range(n)])
        delta_u = softmax_masked(-a, u_mask[bi])
        delta_v = softmax_masked(-bb, i_mask[bi])
        p_i = sum(delta_u[ki] * u_reps[bi, ki] for ki in range(m))
        q_j = sum(delta_v[ti] * i_reps[bi, ti] for ti in range(n))

        gamma_u = np.array([
            float(p["int.user.v"][:, 0] @ np.tanh(p["int.user.W_guide"].T @ q_j
                                                  + p["int.user.W_self"].T @ u_reps[bi, ki]
                                                  + p["int.user.b"]))
            for ki in range(m)
        ])
        beta_u = softmax_masked(gamma_u, u_mask[bi])
        s_i = sum(beta_u[ki] * u_reps[bi, ki] for ki in range(m))

        gamma_v = np.array([
            float(p["int.item.v"][:, 0] @ np.tanh(p["int.item.W_guide"].T @ p_i
                                                  + p["int.item.W_self"].T @ i_reps[bi, ti]
                                                  + p["int.item.b"]))
            for ti in range(n)
        ])
        beta_v = softmax_masked(gamma_v, i_mask[bi])
        t_j = sum(beta_v[ti] * i_reps[bi, ti] for ti in range(n))

        g_u = 1.0 / (1.0 + np.exp(-(p["int.gate.W1"].T @ p_i + p["int.gate.W2"].T @ s_i
                                    + p["int.gate.b"])))
        g_v = 1.0 / (1.0 + np.exp(-(p["int.gate.W1"].T @ q_j + p["int.gate.W2"].T @ t_j
                                    + p["int.gate.b"])))
        d_users[bi] = g_u * p_i + (1 - g_u) * s_i
        d_items[bi] = g_v * q_j + (1 - g_v) * t_j
    return d_users, d_items


def random_case(seed, b=2, m=3, n=2, k=4, mask_p=0.75):
    rng = np.random.default_rng(seed)
    u_reps = rng.normal(size=(b, m, k))
    i_reps = rng.normal(size=(b, n, k))
    u_mask = rng.random((b, m)) < mask_p
    i_mask = rng.random((b, n)) < mask_p
    u_mask[:, 0] = True
    i_mask[:, 0] = True
    return u_reps, i_reps, u_mask, i_mask


class TestPairwiseDistances:
    def test_identical_reps_zero(self):
        rep = np.ones((1, 1, 4))
        d = pairwise_distances(Tensor(rep), Tensor(rep.copy()))
        assert d.data[0, 0, 0] == 0.0

    def test_three_four_five(self):
        u = np.array([0.0, 0.0]).reshape(1, 1, 2)
        v = np.array([3.0, 4.0]).reshape(1, 1, 2)
        d = pairwise_distances(Tensor(u), Tensor(v))
        assert d.data[0, 0, 0] == pytest.approx(5.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scalar_loop(self, seed):
        rng = np.random.default_rng(seed)
        u = rng.normal(size=(1, 3, 5))
        v = rng.normal(size=(1, 2, 5))
        d = pairwise_distances(Tensor(u), Tensor(v))
        for ki in range(3):
            for ti in range(2):
                expected = math.sqrt(sum((u[0, ki, c] - v[0, ti, c]) ** 2 for c in range(5)))
                assert d.data[0, ki, ti] == pytest.approx(expected, rel=1e-12)


class TestInitialRepresentations:
    def test_single_review_gets_weight_one(self):
        u = np.array([[[1.0, 2.0]]])
        v = np.array([[[0.0, 0.0], [3.0, 3.0]]])
        e = pairwise_distances(Tensor(u), Tensor(v))
        um = np.ones((1, 1), dtype=bool)
        vm = np.ones((1, 2), dtype=bool)
        p, q, du, dv = initial_representations(Tensor(u), Tensor(v), e, um, vm)
        np.testing.assert_allclose(du.data, [[1.0]])
        np.testing.assert_allclose(p.data[0], [1.0, 2.0])

    def test_equal_minimum_distances_half_half(self):
        u = np.array([[[1.0, 0.0], [0.0, 1.0]]])  # both at distance 1 from origin
        v = np.array([[[0.0, 0.0]]])
        e = pairwise_distances(Tensor(u), Tensor(v))
        p, q, du, dv = initial_representations(
            Tensor(u), Tensor(v), e, np.ones((1, 2), bool), np.ones((1, 1), bool))
        np.testing.assert_allclose(du.data[0], [0.5, 0.5])

    def test_softmax_of_negated_minima_oracle(self):
        # a = [1, 2]: delta = [e^-1, e^-2] / (e^-1 + e^-2)
        u = np.array([[[1.0], [2.0]]])
        v = np.array([[[0.0]]])
        e = pairwise_distances(Tensor(u), Tensor(v))
        _, _, du, _ = initial_representations(
            Tensor(u), Tensor(v), e, np.ones((1, 2), bool), np.ones((1, 1), bool))
        z = math.exp(-1) + math.exp(-2)
        np.testing.assert_allclose(du.data[0], [math.exp(-1) / z, math.exp(-2) / z], rtol=1e-12)
        assert du.data[0, 0] == pytest.approx(0.7311, abs=1e-4)

    def test_empty_counterpart_uniform_fallback(self):
        u = np.random.default_rng(0).normal(size=(1, 3, 2))
        v = np.zeros((1, 2, 2))
        e = pairwise_distances(Tensor(u), Tensor(v))
        um = np.ones((1, 3), dtype=bool)
        vm = np.zeros((1, 2), dtype=bool)  # item side fully invalid
        p, q, du, dv = initial_representations(Tensor(u), Tensor(v), e, um, vm)
        np.testing.assert_allclose(du.data[0], [1 / 3] * 3)
        np.testing.assert_array_equal(q.data, 0.0)
        np.testing.assert_array_equal(dv.data, 0.0)


class TestIntermediateRepresentation:
    def test_identical_reviews_recovered(self):
        tape = make_tape()
        rep = np.tile(np.array([0.4, -0.2, 0.9, 0.1]), (1, 3, 1))
        guide = Tensor(np.random.default_rng(1).normal(size=(1, 4)))
        s, beta = intermediate_representation(tape, "user", guide, Tensor(rep),
                                              np.ones((1, 3), bool))
        np.testing.assert_allclose(s.data[0], rep[0, 0], rtol=1e-12)

    def test_zero_self_transform_gives_uniform(self):
        tape = make_tape(jitter=False)
        jitter_params(tape, seed=3)
        tape["int.user.W_self"].data[:] = 0.0
        rng = np.random.default_rng(2)
        reps = Tensor(rng.normal(size=(1, 4, 4)))
        guide = Tensor(rng.normal(size=(1, 4)))
        _, beta = intermediate_representation(tape, "user", guide, reps, np.ones((1, 4), bool))
        np.testing.assert_allclose(beta.data[0], [0.25] * 4, rtol=1e-12)

    def test_scalar_hand_case(self):
        tape = ParamTape()
        init_interaction_params(tape, np.random.default_rng(0), 1, dtype=np.float64)
        tape["int.user.W_guide"].data[:] = [[0.5]]
        tape["int.user.W_self"].data[:] = [[2.0]]
        tape["int.user.v"].data[:] = [[1.5]]
        tape["int.user.b"].data[:] = [0.1]
        reps = np.array([[[0.3], [-0.4]]])
        guide = np.array([[0.2]])
        s, beta = intermediate_representation(tape, "user", Tensor(guide), Tensor(reps),
                                              np.ones((1, 2), bool))
        g1 = 1.5 * math.tanh(0.5 * 0.2 + 2.0 * 0.3 + 0.1)
        g2 = 1.5 * math.tanh(0.5 * 0.2 + 2.0 * -0.4 + 0.1)
        z = math.exp(g1) + math.exp(g2)
        b1, b2 = math.exp(g1) / z, math.exp(g2) / z
        np.testing.assert_allclose(beta.data[0], [b1, b2], rtol=1e-12)
        np.testing.assert_allclose(s.data[0, 0], b1 * 0.3 + b2 * -0.4, rtol=1e-12)


class TestGateFuse:
    def test_equal_inputs_pass_through(self):
        tape = make_tape()
        x = Tensor(np.array([[0.7, -0.3, 0.1, 2.0]]))
        fused, g = gate_fuse(tape, x, Tensor(x.data.copy()))
        np.testing.assert_allclose(fused.data, x.data, rtol=1e-12)

    def test_zero_params_give_mean(self):
        tape = make_tape(jitter=False)  # weights stay at init, biases zero
        tape["int.gate.W1"].data[:] = 0.0
        tape["int.gate.W2"].data[:] = 0.0
        a = Tensor(np.array([[2.0, 4.0, -2.0, 0.0]]))
        b = Tensor(np.array([[4.0, 0.0, 2.0, 1.0]]))
        fused, g = gate_fuse(tape, a, b)
        np.testing.assert_allclose(g.data, 0.5)
        np.testing.assert_allclose(fused.data, [[3.0, 2.0, 0.0, 0.5]], rtol=1e-12)

    def test_scalar_hand_case(self):
        tape = ParamTape()
        init_interaction_params(tape, np.random.default_rng(0), 1, dtype=np.float64)
        tape["int.gate.W1"].data[:] = [[0.3]]
        tape["int.gate.W2"].data[:] = [[-0.2]]
        tape["int.gate.b"].data[:] = [0.05]
        fused, g = gate_fuse(tape, Tensor(np.array([[2.0]])), Tensor(np.array([[4.0]])))
        gate = 1.0 / (1.0 + math.exp(-(0.3 * 2.0 - 0.2 * 4.0 + 0.05)))
        np.testing.assert_allclose(g.data[0, 0], gate, rtol=1e-12)
        np.testing.assert_allclose(fused.data[0, 0], gate * 2.0 + (1 - gate) * 4.0, rtol=1e-12)

    def test_gate_activations_in_open_interval(self):
        tape = make_tape(seed=5)
        rng = np.random.default_rng(0)
        fused, g = gate_fuse(tape, Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(4, 4))))
        assert (g.data > 0).all() and (g.data < 1).all()


class TestAggregate:
    def test_single_identical_review_collapses(self):
        tape = make_tape()
        rep = np.array([[[0.5, -1.0, 0.25, 2.0]]])
        d_u, d_v, _ = aggregate(tape, Tensor(rep), Tensor(rep.copy()),
                                np.ones((1, 1), bool), np.ones((1, 1), bool))
        np.testing.assert_allclose(d_u.data[0], rep[0, 0], rtol=1e-12)
        np.testing.assert_allclose(d_v.data[0], rep[0, 0], rtol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_review_permutation_invariance(self, seed):
        tape = make_tape(seed=seed)
        u_reps, i_reps, u_mask, i_mask = random_case(seed)
        rng = np.random.default_rng(seed + 99)
        perm = rng.permutation(u_reps.shape[1])
        d_u1, d_v1, tr1 = aggregate(tape, Tensor(u_reps), Tensor(i_reps), u_mask, i_mask,
                                    capture_trace=True)
        d_u2, d_v2, tr2 = aggregate(tape, Tensor(u_reps[:, perm]), Tensor(i_reps),
                                    u_mask[:, perm], i_mask, capture_trace=True)
        np.testing.assert_allclose(d_u2.data, d_u1.data, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(d_v2.data, d_v1.data, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(tr2.delta_user, tr1.delta_user[:, perm], rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(tr2.beta_user, tr1.beta_user[:, perm], rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_loop_reference(self, seed):
        tape = make_tape(seed=seed)
        u_reps, i_reps, u_mask, i_mask = random_case(seed, b=3, m=3, n=2, k=4)
        d_u, d_v, _ = aggregate(tape, Tensor(u_reps), Tensor(i_reps), u_mask, i_mask)
        ref_u, ref_v = loop_reference(tape, u_reps, i_reps, u_mask, i_mask)
        np.testing.assert_allclose(d_u.data, ref_u, rtol=0, atol=1e-10)
        np.testing.assert_allclose(d_v.data, ref_v, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("seed", range(15))
    def test_normalization_and_convex_hull(self, seed):
        tape = make_tape(seed=seed)
        u_reps, i_reps, u_mask, i_mask = random_case(seed, b=2, m=4, n=3, k=4)
        d_u, d_v, tr = aggregate(tape, Tensor(u_reps), Tensor(i_reps), u_mask, i_mask,
                                 capture_trace=True)
        for weights, mask in ((tr.delta_user, u_mask), (tr.beta_user, u_mask),
                              (tr.delta_item, i_mask), (tr.beta_item, i_mask)):
            np.testing.assert_allclose(weights.sum(-1), 1.0, rtol=1e-10)
            assert (weights[~mask] == 0).all()
        for bi in range(2):
            valid = u_reps[bi][u_mask[bi]]
            lo, hi = valid.min(axis=0), valid.max(axis=0)
            assert (d_u.data[bi] >= lo - 1e-10).all() and (d_u.data[bi] <= hi + 1e-10).all()

    @pytest.mark.parametrize("seed", range(15))
    def test_initial_attention_monotone_in_minima(self, seed):
        tape = make_tape(seed=seed)
        u_reps, i_reps, u_mask, i_mask = random_case(seed, b=2, m=4, n=3, k=4)
        e = pairwise_distances(Tensor(u_reps), Tensor(i_reps))
        valid_pairs = u_mask[:, :, None] & i_mask[:, None, :]
        a = np.where(valid_pairs, e.data, np.inf).min(axis=2)
        _, _, du, _ = initial_representations(Tensor(u_reps), Tensor(i_reps), e, u_mask, i_mask)
        for bi in range(2):
            ks = np.flatnonzero(u_mask[bi])
            for k1 in ks:
                for k2 in ks:
                    if a[bi, k1] < a[bi, k2]:
                        assert du.data[bi, k1] > du.data[bi, k2]

    def test_cold_side_degrades_to_zero(self):
        tape = make_tape()
        u_reps = np.random.default_rng(0).normal(size=(1, 3, 4))
        i_reps = np.zeros((1, 2, 4))
        d_u, d_v, _ = aggregate(tape, Tensor(u_reps), Tensor(i_reps),
                                np.ones((1, 3), bool), np.zeros((1, 2), bool))
        np.testing.assert_array_equal(d_v.data, 0.0)
        assert np.isfinite(d_u.data).all()

    def test_gradients_through_module(self):
        tape = make_tape(seed=2)
        u_reps, i_reps, u_mask, i_mask = random_case(42, b=2, m=3, n=3, k=4)
        u = tape.add("test.u_reps", u_reps)
        v = tape.add("test.i_reps", i_reps)

        def loss():
            d_u, d_v, _ = aggregate(tape, u, v, u_mask, i_mask)
            return nm.tsum(nm.add(nm.square(d_u), nm.square(d_v)))

        err = grad_check(loss, tape, eps=1e-5, coords_per_param=6,
                         rng=np.random.default_rng(3))
        assert err <= 1e-4


class TestPoolAggregate:
    def test_avg_matches_mean_over_valid(self):
        rng = np.random.default_rng(0)
        u_reps, i_reps, u_mask, i_mask = random_case(7)
        d_u, d_v = pool_aggregate(Tensor(u_reps), Tensor(i_reps), u_mask, i_mask, "avg")
        for bi in range(u_reps.shape[0]):
            np.testing.assert_allclose(d_u.data[bi], u_reps[bi][u_mask[bi]].mean(axis=0),
                                       rtol=1e-10, atol=1e-12)

    def test_max_matches_numpy_max(self):
        u_reps, i_reps, u_mask, i_mask = random_case(8)
        d_u, d_v = pool_aggregate(Tensor(u_reps), Tensor(i_reps), u_mask, i_mask, "max")
        for bi in range(u_reps.shape[0]):
            np.testing.assert_allclose(d_u.data[bi], u_reps[bi][u_mask[bi]].max(axis=0))
