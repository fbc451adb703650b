"""Predictive distribution and the context-relevance report."""

import numpy as np
import pytest
from scipy.linalg import cho_factor, cho_solve

from gplvmf import (
    ArdKernel,
    TrainConfig,
    UnknownUserError,
    group_by_user,
    init_state,
    kernel_matrix,
    phi_statistics,
)
from gplvmf.predict import Predictor, context_relevance
from conftest import build_table, one_user_distinct_table, random_instance
from gplvmf import ContextSchema, ContextVariable


def collapsed_predict_setup(seed, n_items=4, beta=2.0):
    table = one_user_distinct_table(n_items, seed)
    blocks = group_by_user(table)
    cfg = TrainConfig(inducing_count=n_items, item_dim=1, context_dim=1, seed=seed)
    state = init_state(table.schema, blocks, cfg)
    state.item_mean[:n_items, 0] = np.linspace(-1.5, 1.5, n_items)
    state.item_log_var[:] = -45.0
    state.bias.item_log_var[:] = -45.0
    mu_rows, _ = state.assemble_rows(blocks[0])
    state.z = mu_rows.copy()
    state.log_beta[:] = np.log(beta)
    return table, blocks, state


class TestPredict:
    def test_interpolation_limit(self):
        table, blocks, state = collapsed_predict_setup(0, beta=1e6)
        pred = Predictor(state, blocks, jitter=1e-12)
        for t in range(blocks[0].count):
            p = pred.predict(0, int(blocks[0].items[t]), ())
            assert p.mean == pytest.approx(blocks[0].ratings[t], abs=1e-4)

    def test_matches_exact_gp_at_full_inducing(self):
        table, blocks, state = collapsed_predict_setup(1, beta=2.0)
        pred = Predictor(state, blocks, jitter=1e-12)
        mu_rows, _ = state.assemble_rows(blocks[0])
        kern = ArdKernel(float(np.exp(state.log_sigma2[0])), np.exp(state.log_alpha))
        k = kernel_matrix(kern, mu_rows, mu_rows)
        cf = cho_factor(k + np.eye(blocks[0].count) / 2.0, lower=True)
        phi1 = phi_statistics(state.bias, blocks[0]).phi1
        resid = blocks[0].ratings - phi1
        for t in range(blocks[0].count):
            xs = mu_rows[t : t + 1]
            ks = kernel_matrix(kern, xs, mu_rows)[0]
            kss = float(kernel_matrix(kern, xs, xs)[0, 0])
            p = pred.predict(0, t, ())
            assert p.mean == pytest.approx(float(ks @ cho_solve(cf, resid) + phi1[t]), abs=1e-9)
            assert p.variance == pytest.approx(float(kss - ks @ cho_solve(cf, ks)), abs=1e-9)

    def test_vanishing_signal_gives_pure_bias(self):
        table, blocks, state = collapsed_predict_setup(2)
        state.log_sigma2[:] = np.log(1e-30)
        pred = Predictor(state, blocks)
        p = pred.predict(0, 1, ())
        expected = state.bias.user_bias[0] + state.bias.item_mean[1].sum()
        assert p.mean == pytest.approx(float(expected), abs=1e-12)

    def test_scalar_hand_evaluation(self):
        table = one_user_distinct_table(1, 3)
        blocks = group_by_user(table)
        cfg = TrainConfig(inducing_count=1, item_dim=1, context_dim=1, seed=3)
        st = init_state(table.schema, blocks, cfg)
        st.item_mean[0, 0] = 0.3
        st.item_log_var[0, 0] = np.log(0.4)
        st.z = np.array([[0.5]])
        st.log_alpha = np.array([np.log(2.0)])
        st.log_sigma2[:] = np.log(1.3)
        st.log_beta[:] = np.log(0.8)
        y = float(blocks[0].ratings[0])
        p1 = float(st.bias.user_bias[0] + st.bias.item_mean[0].sum())
        sigma2, beta, alpha = 1.3, 0.8, 2.0
        mu, s, z = 0.3, 0.4, 0.5
        k = sigma2 * (1 + 1e-6)
        psi1 = sigma2 * (1 + alpha * s) ** -0.5 * np.exp(-0.5 * alpha * (mu - z) ** 2 / (1 + alpha * s))
        psi2 = sigma2**2 * (1 + 2 * alpha * s) ** -0.5 * np.exp(-alpha * (mu - z) ** 2 / (1 + 2 * alpha * s))
        hand_mean = psi1 * (y - p1) * psi1 / (k / beta + psi2) + p1
        hand_var = sigma2 - psi1 * (1.0 / k - 1.0 / (k + beta * psi2)) * psi1
        pred = Predictor(st, blocks)
        p = pred.predict(0, 0, ())
        assert p.mean == pytest.approx(hand_mean, rel=1e-10)
        assert p.variance == pytest.approx(hand_var, rel=1e-10)

    def test_permutation_invariance_of_training_rows(self):
        table, blocks, state, _ = random_instance(4, n_users=1, ratings_per_user=6)
        block = blocks[0]
        p1 = Predictor(state, [block]).predict(0, 0, (1, 0.3))
        rng = np.random.default_rng(0)
        perm = rng.permutation(block.count)
        from gplvmf.data import UserBlock

        shuffled = UserBlock(
            user=block.user, items=block.items[perm], cat_values=block.cat_values[perm],
            real_values=block.real_values[perm], ratings=block.ratings[perm],
            record_indices=block.record_indices[perm],
        )
        p2 = Predictor(state, [shuffled]).predict(0, 0, (1, 0.3))
        assert p1.mean == pytest.approx(p2.mean, rel=1e-10)
        assert p1.variance == pytest.approx(p2.variance, rel=1e-10)

    def test_constant_shift_in_no_kernel_case(self):
        # with sigma2 -> 0 predictions are phi1*; shifting the ratings and
        # the user bias by c shifts every prediction by exactly c
        table, blocks, state = collapsed_predict_setup(5)
        state.log_sigma2[:] = np.log(1e-30)
        base = Predictor(state, blocks).predict(0, 2, ()).mean
        c = 1.7
        shifted = state.copy()
        shifted.bias.user_bias[0] += c
        from gplvmf.data import UserBlock

        block = blocks[0]
        shifted_block = UserBlock(
            user=block.user, items=block.items, cat_values=block.cat_values,
            real_values=block.real_values, ratings=block.ratings + c,
            record_indices=block.record_indices,
        )
        moved = Predictor(shifted, [shifted_block]).predict(0, 2, ()).mean
        assert moved - base == pytest.approx(c, abs=1e-12)

    def test_unknown_item_and_category_degrade_gracefully(self):
        table, blocks, state, _ = random_instance(6, n_users=1)
        pred = Predictor(state, blocks)
        p = pred.predict(0, 999, (99, 0.0))
        assert np.isfinite(p.mean) and p.variance >= 0.0

    def test_unknown_user_policy(self):
        table, blocks, state, _ = random_instance(7, n_users=2)
        pred = Predictor(state, [blocks[0]])
        with pytest.raises(UnknownUserError, match="user 1"):
            pred.predict(1, 0, (0, 0.0))
        p = pred.predict(1, 0, (0, 0.0), unknown_user="global_mean")
        assert p.mean == pytest.approx(pred.global_mean)

    def test_variance_nonnegative_over_random_queries(self):
        table, blocks, state, _ = random_instance(8, n_users=3, ratings_per_user=6)
        pred = Predictor(state, blocks)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            user = int(rng.integers(0, 3))
            item = int(rng.integers(0, 6))
            ctx = (int(rng.integers(0, 3)), float(rng.normal()))
            assert pred.predict(user, item, ctx).variance >= 0.0

    def test_observation_noise_flag(self):
        table, blocks, state, _ = random_instance(9, n_users=1)
        pred = Predictor(state, blocks)
        p0 = pred.predict(0, 0, (0, 0.0))
        p1 = pred.predict(0, 0, (0, 0.0), include_noise=True)
        beta = float(np.exp(state.log_beta[0]))
        assert p1.variance - p0.variance == pytest.approx(1.0 / beta)

    def test_clamping(self):
        table, blocks, state, _ = random_instance(10, n_users=1)
        pred = Predictor(state, blocks, rating_scale=(1.0, 5.0))
        state.bias.user_bias[0] = 40.0
        pred2 = Predictor(state, blocks, rating_scale=(1.0, 5.0))
        p = pred2.predict(0, 0, (0, 0.0))
        assert p.clamped_mean == 5.0
        assert p.mean > 5.0

    def test_predict_rows_matches_single(self):
        table, blocks, state, _ = random_instance(11, n_users=2, ratings_per_user=5)
        pred = Predictor(state, blocks)
        users = [0, 1, 0]
        items = [1, 2, 3]
        rows = [(0, 0.5), (1, -0.2), (2, 1.1)]
        means, variances, clamped = pred.predict_rows(users, items, rows)
        for i in range(3):
            single = pred.predict(users[i], items[i], rows[i])
            assert means[i] == pytest.approx(single.mean)
            assert variances[i] == pytest.approx(single.variance)


class TestContextRelevance:
    def _state(self, alphas):
        schema = ContextSchema(
            2, 3,
            (ContextVariable("a", "categorical", 2), ContextVariable("b", "categorical", 2)),
        )
        table = build_table(
            schema, users=[0, 1], items=[0, 1], cat=[[0, 1], [1, 0]], ratings=[1.0, 2.0]
        )
        blocks = group_by_user(table)
        cfg = TrainConfig(inducing_count=2, item_dim=2, context_dim=2, seed=0)
        state = init_state(schema, blocks, cfg)
        state.log_alpha = np.log(np.asarray(alphas))
        return state, schema

    def test_equal_alphas_give_equal_shares(self):
        state, schema = self._state([0.3] * 6)
        rel = context_relevance(state, schema)
        shares = [sh for _, _, sh in rel.entries]
        assert np.allclose(shares, 1.0 / 3.0)
        assert sum(shares) == pytest.approx(1.0)

    def test_zeroed_context_gets_zero_share(self):
        state, schema = self._state([0.3, 0.3, 0.3, 0.3, 1e-300, 1e-300])
        rel = context_relevance(state, schema)
        assert rel.share("b") == pytest.approx(0.0, abs=1e-12)
        assert rel.share("a") > 0.4
