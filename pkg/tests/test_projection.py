import math

import numpy as np
import pytest

from dime import _kernels
from dime.core import (
    ContractError,
    ExpertWeights,
    FeatureMap,
    GaussianPolicy,
    RngStream,
    TradeOff,
    TradeOffDistribution,
    sample_actions,
)
from dime.improvement import ImprovementConfig
from dime.projection import (
    MethodConfig,
    ProjectionConfig,
    _project,
    combine_weights,
    distill,
    distill_conditioned,
    distill_objective,
    em_iterate,
    mean_kl,
    row_features,
)
from dime.testbeds import BanditTask, scalarization_optima

from .oracles import central_diff, random_policy

LOOSE = ProjectionConfig(beta_mean=1e6, beta_cov=1e6, learning_rate=1e-2, max_steps=20_000, constraint="none")


def random_experts(rng, policy, s=6, n=30, k=2, tradeoffs=None):
    fm = policy.feature_map
    states = tuple(int(x) for x in rng.integers(max(fm.n_states, 1), size=s))
    phi = fm.batch(s, states if fm.n_states else None, tradeoffs if fm.conditioned else None)
    mu, ls = policy.moments(phi)
    acts = mu[:, None, :] + np.exp(ls)[:, None, :] * rng.normal(size=(s, n, policy.action_dim))
    w = rng.dirichlet(np.ones(n), size=(k, s))
    return ExpertWeights(states, acts, w, policy.identifier(), tradeoffs)


def two_mode_experts(iterate, rows=1, tradeoffs=None):
    acts = np.tile(np.array([-1.0, 1.0])[None, :, None], (rows, 1, 1))
    w = np.zeros((2, rows, 2))
    w[0, :, 0] = 1.0
    w[1, :, 1] = 1.0
    return ExpertWeights(tuple([0] * rows), acts, w, iterate.identifier(), tradeoffs)


class TestConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"beta_mean": 0.0}, {"beta_cov": -1.0}, {"optimizer": "rmsprop"}, {"constraint": "box"}, {"learning_rate": 0}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ContractError):
            ProjectionConfig(**kwargs)


class TestDistill:
    def test_own_samples_recover_mean(self):
        it = GaussianPolicy.constant([0.4], 0.0)
        n = 10**4
        a = sample_actions(it, n, RngStream(0, "own"))[None]
        experts = ExpertWeights((0,), a, np.full((1, 1, n), 1 / n), it.identifier())
        cfg = ProjectionConfig(beta_mean=1e6, beta_cov=1e6)
        out = distill(experts, TradeOff((1.0,)), it, cfg).policy
        assert abs(out.mean()[0] - a.mean()) < 1e-3
        assert abs(out.mean()[0] - 0.4) < 3 / math.sqrt(n)

    def test_zero_weight_objective_ignored(self, rng):
        it = GaussianPolicy.constant([0.0], 0.0)
        e = random_experts(rng, it)
        single = ExpertWeights(e.states, e.actions, e.weights[:1], e.iterate_id)
        a = distill(e, TradeOff((1.0, 0.0)), it).policy
        b = distill(single, TradeOff((1.0,)), it).policy
        np.testing.assert_allclose(a.flat_params(), b.flat_params(), atol=1e-6)

    def test_barycentre(self):
        it = GaussianPolicy.constant([0.3], -0.2)
        out = distill(two_mode_experts(it), TradeOff.from_scalar(0.5), it, LOOSE).policy
        # Weighted Gaussian MLE: mean = sum c_j a_j = 0, variance = sum c_j a_j^2 = 1.
        assert out.mean()[0] == pytest.approx(0.0, abs=1e-4)
        assert math.exp(2 * out.log_std()[0]) == pytest.approx(1.0, abs=1e-4)

    def test_trust_region_honored(self, rng):
        for _ in range(20):
            it = random_policy(rng, FeatureMap(3))
            e = random_experts(rng, it)
            t = TradeOff.from_scalar(rng.uniform())
            proj = distill(e, t, it)
            km, kc = mean_kl(proj.policy, it, row_features(it, e))
            cfg = ProjectionConfig()
            assert km <= cfg.beta_mean * 1.1 and kc <= cfg.beta_cov * 1.1
            assert proj.diagnostics.kl_mean == pytest.approx(km)

    @pytest.mark.parametrize("constraint", ["lagrangian", "penalty"])
    def test_trust_region_without_backtracking(self, rng, constraint):
        it = GaussianPolicy.constant([0.0], 0.0)
        e = random_experts(rng, it)
        cfg = ProjectionConfig(constraint=constraint, backtrack=False, max_steps=2000, learning_rate=1e-3)
        # Duals need many steps to catch up; warm-start them as the EM loop does.
        lam = (0.0, 0.0)
        for _ in range(20):
            proj = distill(e, TradeOff.from_scalar(0.5), it, cfg, lam)
            lam = proj.diagnostics.multipliers
        assert proj.diagnostics.kl_mean <= cfg.beta_mean * 1.1
        assert proj.diagnostics.kl_cov <= cfg.beta_cov * 1.1 or constraint == "penalty"

    @pytest.mark.parametrize("optimizer, lr", [("sgd", 1e-2), ("adam", 1e-4)])
    def test_objective_nondecreasing(self, rng, optimizer, lr):
        it = GaussianPolicy.constant([0.5], 0.3)
        e = random_experts(rng, it)
        t = TradeOff.from_scalar(0.3)
        values = []
        for steps in range(0, 60, 3):
            cfg = ProjectionConfig(max_steps=steps, constraint="none", optimizer=optimizer, learning_rate=lr)
            values.append(distill(e, t, it, cfg).diagnostics.objective)
        assert np.all(np.diff(values) >= -1e-12)
        assert values[-1] > values[0]

    def test_tradeoff_linearity(self, rng):
        p = random_policy(rng, FeatureMap(0, 0))
        e = random_experts(rng, p, k=3)
        basis = [TradeOff(tuple(np.eye(3)[i])) for i in range(3)]
        grads = [distill_objective(p, e, b)[1] for b in basis]
        alpha = rng.dirichlet(np.ones(3))
        alpha[-1] = 1 - alpha[:-1].sum()
        g = distill_objective(p, e, TradeOff(tuple(alpha)))[1]
        np.testing.assert_allclose(g, sum(a * gi for a, gi in zip(alpha, grads)), rtol=1e-8, atol=1e-14)

    def test_errors(self, rng):
        it = GaussianPolicy.constant([0.0], 0.0)
        e = random_experts(rng, it)
        with pytest.raises(ContractError):
            distill(e, TradeOff((0.2, 0.3, 0.5)), it)
        with pytest.raises(ContractError):
            distill(e, TradeOff.from_scalar(0.5), GaussianPolicy.constant([0.1], 0.0))
        with pytest.raises(ContractError):
            combine_weights(e, None)


class TestKernel:
    def test_compiled_matches_python(self, rng):
        for mode in (_kernels.LAGRANGIAN, _kernels.PENALTY, _kernels.UNCONSTRAINED):
            it = random_policy(rng, FeatureMap(0, 2), dim=2)
            alphas = rng.uniform(size=8)
            t = np.stack([alphas, 1 - alphas], axis=1)
            e = random_experts(rng, it, s=8, tradeoffs=t)
            coeffs = combine_weights(e, None)
            phi = row_features(it, e)
            args = [
                phi,
                coeffs.sum(1),
                np.einsum("sj,sjd->sd", coeffs, e.actions),
                np.einsum("sj,sjd->sd", coeffs, e.actions**2),
                *it.moments(phi),
            ]
            outs = []
            for fn in (_kernels.ascent, _kernels.ascent.py_func):
                wm, ws, lam = np.array(it.mean_params), np.array(it.log_std_params), np.array([0.5, 0.5])
                status = fn(*args, wm, ws, lam, 0.0025, 1e-5, 1e-3, 50, 1e-7, 1e-2, mode, 1.0, True)
                outs.append((status, wm, ws, lam))
            assert outs[0][0] == outs[1][0]
            for x, y in zip(outs[0][1:], outs[1][1:]):
                np.testing.assert_allclose(x, y, rtol=1e-10, atol=1e-14)

    def test_kernel_gradient_matches_numpy(self, rng):
        for _ in range(10):
            it = random_policy(rng, FeatureMap(2, 3))
            alphas = rng.uniform(size=5)
            t = np.stack([alphas, 1 - alphas], axis=1)
            e = random_experts(rng, it, s=5, tradeoffs=t)
            # One plain step moves the parameters by exactly lr * gradient.
            lr = 1e-3
            cfg = ProjectionConfig(optimizer="sgd", learning_rate=lr, max_steps=1, constraint="none", grad_tol=0)
            out = _project(e.actions, combine_weights(e, None), row_features(it, e), it, cfg).policy
            kernel_grad = (out.flat_params() - it.flat_params()) / lr
            _, ref = distill_objective(it, e, None)
            np.testing.assert_allclose(kernel_grad, ref, rtol=1e-5, atol=1e-9)
            num = central_diff(
                lambda th, it=it, e=e: distill_objective(it.with_flat_params(th), e, None)[0], it.flat_params()
            )
            np.testing.assert_allclose(ref, num, rtol=1e-5, atol=1e-8)


class TestDistillConditioned:
    def test_single_tradeoff_degenerates(self, rng):
        fm = FeatureMap(0, 3)
        p = random_policy(rng, fm)
        a = 0.37
        t = np.tile([a, 1 - a], (6, 1))
        e = random_experts(rng, p, tradeoffs=t)
        phi_a = fm.features(tradeoff=TradeOff.from_scalar(a))
        restricted = GaussianPolicy.constant(p.mean_params @ phi_a, p.log_std_params @ phi_a)
        plain = ExpertWeights(e.states, e.actions, e.weights, restricted.identifier())
        v_c, g_c = distill_objective(p, e, None)
        v_r, g_r = distill_objective(restricted, plain, TradeOff.from_scalar(a))
        assert v_c == pytest.approx(v_r, rel=1e-12)
        # Chain rule: d/dW = d/d(mu, log std) * phi(alpha).
        np.testing.assert_allclose(g_c, np.concatenate([g_r[0] * phi_a, g_r[1] * phi_a]), rtol=1e-10)

    def test_conflicting_experts(self):
        it = GaussianPolicy.with_features(FeatureMap(0, 3), [0.0], 0.0)
        t = np.array([[1.0, 0.0], [0.0, 1.0]] * 4)
        e = two_mode_experts(it, rows=8, tradeoffs=t)
        # Add spread so the per-trade-off MLE keeps a finite variance.
        acts = np.concatenate([e.actions - 0.5, e.actions + 0.5], axis=1)
        w = np.concatenate([e.weights, e.weights], axis=2) / 2
        e = ExpertWeights(e.states, acts, w, it.identifier(), t)
        out = distill_conditioned(e, it, LOOSE).policy
        assert out.mean(conditioning=TradeOff((1.0, 0.0)))[0] == pytest.approx(-1.0, abs=1e-3)
        assert out.mean(conditioning=TradeOff((0.0, 1.0)))[0] == pytest.approx(1.0, abs=1e-3)

    def test_cubic_features_fit_linear_target(self, rng):
        fm = FeatureMap(0, 3)
        it = GaussianPolicy.with_features(fm, [0.0], 0.0)
        alphas = np.linspace(0, 1, 11)
        t = np.stack([alphas, 1 - alphas], axis=1)
        target = 2 * alphas - 1
        acts = np.stack([target - 0.5, target + 0.5], axis=1)[:, :, None]
        w = np.full((2, 11, 2), 0.5)
        out = it
        # Restart with smaller steps so the adaptive optimizer settles.
        for lr in (1e-2, 1e-3, 1e-4, 1e-5):
            e = ExpertWeights(tuple([0] * 11), acts, w, out.identifier(), t)
            cfg = ProjectionConfig(1e6, 1e6, learning_rate=lr, max_steps=20_000, constraint="none", grad_tol=1e-12)
            out = distill_conditioned(e, out, cfg).policy
        fit = np.array([out.mean(conditioning=TradeOff.from_scalar(x))[0] for x in alphas])
        assert np.max(np.abs(fit - target)) < 1e-6
        # The least-squares residual of the feature class itself is zero.
        design = fm.batch(11, None, t)
        resid = design @ np.linalg.lstsq(design, target, rcond=None)[0] - target
        assert np.max(np.abs(resid)) < 1e-12

    def test_errors(self, rng):
        it = GaussianPolicy.constant([0.0], 0.0)
        with pytest.raises(ContractError):
            distill_conditioned(random_experts(rng, it), it)
        t = np.tile([0.5, 0.5], (6, 1))
        with pytest.raises(ContractError):
            distill_conditioned(random_experts(rng, it, tradeoffs=t), it)


class TestEMIterate:
    @pytest.mark.parametrize("alpha, target", [(1.0, 0.0), (0.0, 2.0)])
    def test_schaffer_extremes(self, alpha, target):
        recs = em_iterate(BanditTask("schaffer"), MethodConfig(), TradeOff.from_scalar(alpha), 200, RngStream(0))
        assert abs(recs[-1].policy.mean()[0] - target) < 0.05
        assert len(recs) == 200 and recs[-1].expected_values.shape == (2,)

    def test_fonseca_fleming_ls_reaches_grid_optimum(self):
        task = BanditTask("fonseca-fleming")
        t = TradeOff.from_scalar(0.5)
        m = MethodConfig(ImprovementConfig("ls"))
        # Start off the symmetric saddle at 0, which the iterate leaves only slowly.
        start = GaussianPolicy.constant([0.3], math.log(0.3))
        recs = em_iterate(task, m, t, 200, RngStream(1, "ff-ls"), start)
        optima = scalarization_optima(task, t)
        assert np.allclose(np.abs(optima), 0.96, atol=0.02)
        assert np.min(np.abs(optima - recs[-1].policy.mean()[0])) < 0.1

    def test_scaled_objective_same_solution(self):
        m = MethodConfig()
        for a in (0.3, 0.5, 0.7):
            means = []
            for scales in ((1.0, 1.0), (1.0, 10.0)):
                recs = em_iterate(BanditTask("schaffer", scales), m, TradeOff.from_scalar(a), 100, RngStream(2, str(a)))
                means.append(recs[-1].policy.mean()[0])
            assert abs(means[0] - means[1]) < 0.05

    def test_mompo_uniform_matches_dime(self):
        t = TradeOff.from_scalar(0.5)
        runs = [
            em_iterate(BanditTask("schaffer"), MethodConfig(ImprovementConfig(mode)), t, 20, RngStream(4))
            for mode in ("dime", "mompo")
        ]
        np.testing.assert_array_equal(runs[0][-1].policy.flat_params(), runs[1][-1].policy.flat_params())

    def test_conditioned_training(self):
        dist = TradeOffDistribution("scalar", 2, 0.0, 1.0)
        recs = em_iterate(BanditTask("schaffer"), MethodConfig(), dist, 100, RngStream(5))
        p = recs[-1].policy
        assert p.feature_map.degree == 3
        lo = p.mean(conditioning=TradeOff.from_scalar(0.9))[0]
        hi = p.mean(conditioning=TradeOff.from_scalar(0.1))[0]
        assert lo < hi

    def test_reproducible(self):
        run = lambda: em_iterate(BanditTask("schaffer"), MethodConfig(), TradeOff.from_scalar(0.4), 10, RngStream(9))
        assert run()[-1].policy.identifier() == run()[-1].policy.identifier()

    def test_errors(self):
        task = BanditTask("schaffer")
        with pytest.raises(ContractError):
            em_iterate(task, MethodConfig(), TradeOff((0.2, 0.3, 0.5)), 1, RngStream(0))
        with pytest.raises(ContractError):
            em_iterate(task, MethodConfig(), TradeOff.from_scalar(0.5), -1, RngStream(0))
        dist = TradeOffDistribution()
        with pytest.raises(ContractError):
            em_iterate(task, MethodConfig(ImprovementConfig("mompo")), dist, 1, RngStream(0))
