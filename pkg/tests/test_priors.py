import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dime.core import ContractError, FeatureMap, GaussianPolicy, TransitionBatch, log_density
from dime.improvement import softmax_weights
from dime.priors import (
    BehaviorSpec,
    KickstartConfig,
    bc_loss,
    kickstart_weights_dime,
    kickstart_weights_ls,
    offline_loss_awbc,
    offline_loss_dime,
    offline_loss_ls_crr,
    update_learned_tradeoff,
)

from .oracles import assert_grad_close, awbc_args, central_diff, dime_args, loss_fixture, with_params


class TestKickstartWeights:
    def test_ls_extremes(self, rng):
        q, lr = rng.normal(size=(4, 30)), rng.normal(size=(4, 30))
        np.testing.assert_allclose(kickstart_weights_ls(q, lr, 0.0, 0.7), softmax_weights(q, 0.7), atol=1e-15)
        np.testing.assert_allclose(kickstart_weights_ls(q, lr, 1.0, 0.7), softmax_weights(lr, 0.7), atol=1e-15)

    def test_ls_constant_uniform(self):
        w = kickstart_weights_ls(np.full((2, 5), 3.0), np.full((2, 5), -1.0), 0.4, 1.0)
        np.testing.assert_allclose(w, 0.2)

    def test_ls_overflow_guard(self):
        w = kickstart_weights_ls(np.array([[1e4, 0.0]]), np.zeros((1, 2)), 0.0, 1.0)
        np.testing.assert_array_equal(w, [[1.0, 0.0]])

    def test_dime_extremes_equal_ls(self, rng):
        for _ in range(20):
            q, lr = rng.normal(size=(4, 30)), rng.normal(size=(4, 30)) * 3
            eta1, eta2 = rng.uniform(0.1, 3, size=2)
            np.testing.assert_allclose(
                kickstart_weights_dime(q, lr, 0.0, eta1, eta2), kickstart_weights_ls(q, lr, 0.0, eta1), atol=1e-10
            )
            np.testing.assert_allclose(
                kickstart_weights_dime(q, lr, 1.0, eta1, eta2), kickstart_weights_ls(q, lr, 1.0, eta2), atol=1e-10
            )

    def test_dime_mixture_arithmetic(self, rng):
        q = rng.normal(size=(3, 10))
        w = kickstart_weights_dime(q, np.zeros((3, 10)), 0.5, 0.8, 1.0)
        np.testing.assert_allclose(w, 0.5 * softmax_weights(q, 0.8) + 0.05, atol=1e-15)

    def test_dime_rows_sum_to_one(self, rng):
        for _ in range(20):
            w = kickstart_weights_dime(
                rng.normal(size=(5, 30)), rng.normal(size=(5, 30)), rng.uniform(), rng.uniform(0.1, 2), 1.0
            )
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_alpha_range(self):
        with pytest.raises(ContractError):
            kickstart_weights_ls(np.zeros((1, 2)), np.zeros((1, 2)), 1.5, 1.0)


class TestCRR:
    def test_zero_advantage_is_bc(self, rng):
        fx = loss_fixture(rng)
        crr = offline_loss_ls_crr(fx["policy"], fx["batch"], fx["q"], fx["q"], 0.3)
        bc = bc_loss(fx["policy"], fx["batch"])
        assert crr.value == bc.value
        np.testing.assert_array_equal(crr.grad, bc.grad)

    def test_large_beta_is_bc(self, rng):
        fx = loss_fixture(rng)
        crr = offline_loss_ls_crr(fx["policy"], fx["batch"], fx["q"], fx["v"], 1e9)
        bc = bc_loss(fx["policy"], fx["batch"])
        assert crr.value == pytest.approx(bc.value, rel=1e-6)

    def test_two_transition_fixture(self):
        p = GaussianPolicy.constant([0.0], 0.0)
        batch = TransitionBatch([0, 0], [0.5, -1.0], np.zeros((2, 2)), [0, 0])
        res = offline_loss_ls_crr(p, batch, [1.0, -1.0], [0.0, 0.0], 1.0)
        lp = [log_density(p, [0.5]), log_density(p, [-1.0])]
        assert res.value == pytest.approx(-(math.e * lp[0] + lp[1] / math.e) / 2, rel=1e-14)
        assert res.n_clipped == 0

    def test_clipping_logged(self, rng, caplog):
        fx = loss_fixture(rng)
        with caplog.at_level(logging.INFO, logger="dime.priors"):
            res = offline_loss_ls_crr(fx["policy"], fx["batch"], fx["q"] + 100, fx["q"], 1.0)
        assert res.n_clipped == len(fx["batch"])
        assert "clipped" in caplog.text

    def test_errors(self, rng):
        fx = loss_fixture(rng)
        with pytest.raises(ContractError):
            offline_loss_ls_crr(fx["policy"], fx["batch"], fx["q"], fx["v"], 0.0)


class TestOfflineDiME:
    def test_alpha_one_is_bc_bitwise(self, rng):
        fx = loss_fixture(rng)
        res = offline_loss_dime(*dime_args(fx, alpha=1.0))
        bc = bc_loss(fx["policy"], fx["batch"])
        assert res.value == bc.value
        np.testing.assert_array_equal(res.grad, bc.grad)

    def test_alpha_zero_is_distillation(self, rng):
        fx = loss_fixture(rng)
        res = offline_loss_dime(*dime_args(fx, alpha=0.0))
        w = softmax_weights(fx["sample_q"], fx["eta"])
        p = fx["policy"]
        ref = 0.0
        for s, state in enumerate(fx["sample_states"]):
            ref += sum(w[s, j] * log_density(p, fx["sample_actions"][s, j], state=state) for j in range(w.shape[1]))
        assert res.value == pytest.approx(-ref / len(fx["sample_states"]), rel=1e-12)

    def test_needs_two_samples(self, rng):
        fx = loss_fixture(rng, n=1)
        with pytest.raises(ContractError):
            offline_loss_dime(*dime_args(fx))


class TestAWBC:
    def test_zero_advantage_matches_dime(self, rng):
        fx = loss_fixture(rng)
        a = offline_loss_awbc(*awbc_args(fx, v=fx["q"]))
        d = offline_loss_dime(*dime_args(fx))
        assert a.value == pytest.approx(d.value, rel=1e-14)
        np.testing.assert_allclose(a.grad, d.grad, rtol=1e-12)

    def test_alpha_zero_matches_dime(self, rng):
        fx = loss_fixture(rng)
        a = offline_loss_awbc(*awbc_args(fx, alpha=0.0))
        d = offline_loss_dime(*dime_args(fx, alpha=0.0))
        assert a.value == d.value

    def test_alpha_one_weights(self):
        p = GaussianPolicy.constant([0.2], -0.1)
        batch = TransitionBatch([0, 0], [0.5, -1.0], np.zeros((2, 2)), [0, 0])
        res = offline_loss_awbc(p, batch, [1.0, -1.0], [0.0, 0.0], [0], np.zeros((1, 2, 1)), np.zeros((1, 2)), 1.0, 1.0)
        lp = [log_density(p, [0.5]), log_density(p, [-1.0])]
        assert res.value == pytest.approx(-(math.e * lp[0] + lp[1] / math.e) / 2, rel=1e-14)


@pytest.mark.parametrize("loss", ["bc", "crr", "dime", "awbc"])
def test_loss_gradients_finite_differences(loss):
    rng = np.random.default_rng(["bc", "crr", "dime", "awbc"].index(loss))
    for _ in range(50):
        fx = loss_fixture(rng)
        beta = float(rng.uniform(0.5, 3.0))

        def value(theta, fx=fx, beta=beta):
            g = with_params(fx, theta)
            if loss == "bc":
                return bc_loss(g["policy"], g["batch"])
            if loss == "crr":
                return offline_loss_ls_crr(g["policy"], g["batch"], g["q"], g["v"], beta)
            if loss == "dime":
                return offline_loss_dime(*dime_args(g))
            return offline_loss_awbc(*awbc_args(g))

        theta = fx["policy"].flat_params()
        assert_grad_close(value(theta).grad, central_diff(lambda t: value(t).value, theta))


class TestLearnedTradeoff:
    def test_at_threshold_unchanged(self):
        cfg = KickstartConfig(alpha=0.3, learned=True, threshold=-2.0)
        assert update_learned_tradeoff(cfg, -2.0).x == cfg.x

    def test_direction(self):
        cfg = KickstartConfig(alpha=0.3, learned=True, threshold=-2.0)
        assert update_learned_tradeoff(cfg, -1.0).value < cfg.value
        assert update_learned_tradeoff(cfg, -3.0).value > cfg.value

    def test_value_is_post_sigmoid(self):
        cfg = KickstartConfig(alpha=0.3, learned=True)
        assert cfg.value == pytest.approx(0.3)
        assert KickstartConfig(alpha=0.3).value == 0.3

    @given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-1e3, 1e3))
    def test_alpha_stays_open_interval(self, x, mean_q, c):
        cfg = KickstartConfig(learned=True, x=x, threshold=c)
        new = update_learned_tradeoff(cfg, mean_q)
        assert 0.0 < new.value < 1.0

    def test_needs_learned_mode(self):
        with pytest.raises(ContractError):
            update_learned_tradeoff(KickstartConfig(), 0.0)

    def test_invalid(self):
        with pytest.raises(ContractError):
            KickstartConfig(alpha=1.2)
        with pytest.raises(ContractError):
            KickstartConfig(eta=0.0)


class TestBehaviorSpec:
    def test_invalid(self):
        with pytest.raises(ContractError):
            BehaviorSpec(((0.5, 0.0, 1.0),))
        with pytest.raises(ContractError):
            BehaviorSpec(((1.0, 0.0, -1.0),))

    def test_point_mass(self):
        a = BehaviorSpec.point(2.0).sample(np.random.default_rng(0), 10)
        np.testing.assert_array_equal(a, 2.0)
        assert BehaviorSpec(((0.25, 0.0, 1.0), (0.75, 4.0, 1.0))).mean == 3.0


def test_conditioned_policy_losses():
    # Losses accept trade-off-conditioned policies when the batch records trade-offs.
    rng = np.random.default_rng(0)
    fm = FeatureMap(0, 3)
    p = GaussianPolicy.with_features(fm, [0.5], 0.0)
    t = np.tile([0.3, 0.7], (4, 1))
    batch = TransitionBatch(np.zeros(4, int), rng.normal(size=4), np.zeros((4, 2)), np.zeros(4, int), t)
    res = bc_loss(p, batch)
    assert np.isfinite(res.value) and res.grad.shape == (8,)
