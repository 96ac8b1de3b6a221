import math

import numpy as np
import pytest

from neatread import attnpolicy, nn
from conftest import all_fixations, enumerated_gradient, enumerated_s1_objective, tiny_s1


def sampled_gradient(model, net, window, alpha, gamma, rng, n, baseline=None):
    wins = np.repeat(np.asarray(window)[None], n, axis=0)
    ro = attnpolicy.rollout(model, net, wins, rng)
    dec = attnpolicy.window_costs(model, wins, ro) - ro.surprisal.sum(axis=1)
    togo = attnpolicy.returns_to_go(ro, dec, alpha, gamma)
    coeffs = attnpolicy.logit_coefficients(ro, togo, baseline, gamma)
    _, per = attnpolicy.policy_gradient(net, ro, coeffs)
    return per


def exact_expected_gradient(model, net, window, alpha, gamma, baseline=None):
    """Probability-weighted sum of the estimator over every fixation sequence."""
    _, probs, ro = enumerated_s1_objective(model, net, window, alpha, gamma)
    wins = np.repeat(np.asarray(window)[None], len(probs), axis=0)
    dec = attnpolicy.window_costs(model, wins, ro) - ro.surprisal.sum(axis=1)
    togo = attnpolicy.returns_to_go(ro, dec, alpha, gamma)
    coeffs = attnpolicy.logit_coefficients(ro, togo, baseline, gamma)
    _, per = attnpolicy.policy_gradient(net, ro, coeffs)
    return probs @ per


class TestFixationProb:
    def test_zero_net_is_half(self, tiny_model):
        model, _ = tiny_model
        net = attnpolicy.AttentionNetS1(model.emb_dim, model.hidden_dim)
        assert attnpolicy.fixation_prob(net, np.ones(3), np.ones(3), 0.2) == 0.5

    def test_hand_computed(self):
        net = attnpolicy.AttentionNetS1(1, 1)
        net.w[...] = [1.0, -2.0, 0.5]
        net.b[...] = 0.25
        z = 1.0 * 0.3 - 2.0 * 0.1 + 0.5 * math.log(0.25) + 0.25
        got = attnpolicy.fixation_prob(net, [0.3], [0.1], 0.25)
        assert got == pytest.approx(1 / (1 + math.exp(-z)), abs=1e-15)

    def test_saturated_logit_fixates(self, tiny_model):
        model, net = tiny_model
        net.b[...] = 1e6
        ro = attnpolicy.rollout(model, net, np.array([[3, 4, 5, 0]] * 50), np.random.default_rng(0))
        assert np.all(ro.omega == 1) and np.all(np.abs(ro.logits) <= attnpolicy.LOGIT_CLAMP)

    def test_entropy_matches_definition(self):
        lg = np.array([-3.0, 0.0, 2.0])
        a = nn.sigmoid(lg)
        ref = -(a * np.log(a) + (1 - a) * np.log(1 - a))
        assert np.allclose(attnpolicy.bernoulli_entropy(a, lg), ref, atol=1e-12)


class TestRollout:
    def test_deterministic_given_seed(self, tiny_model):
        model, net = tiny_model
        w = np.array([[3, 4, 5, 0, 3]] * 8)
        a = attnpolicy.rollout(model, net, w, np.random.default_rng(5))
        b = attnpolicy.rollout(model, net, w, np.random.default_rng(5))
        assert np.array_equal(a.omega, b.omega) and np.array_equal(a.probs, b.probs)

    def test_zero_net_rate(self, tiny_model):
        model, _ = tiny_model
        net = attnpolicy.AttentionNetS1(model.emb_dim, model.hidden_dim)
        w = np.random.default_rng(0).integers(0, 6, size=(10000, 5))
        ro = attnpolicy.rollout(model, net, w, np.random.default_rng(1))
        assert abs(ro.omega.mean() - 0.5) < 0.02

    def test_causal(self, tiny_model):
        model, net = tiny_model
        om = np.array([[1, 0, 1, 1, 0]])
        a = attnpolicy.rollout(model, net, np.array([[3, 4, 5, 0, 3]]), omega=om)
        b = attnpolicy.rollout(model, net, np.array([[3, 4, 5, 2, 2]]), omega=om)
        assert np.array_equal(a.probs[0, :3], b.probs[0, :3])
        assert a.probs[0, 3] != b.probs[0, 3]

    def test_marginals_match_enumeration(self, tiny_model):
        model, net = tiny_model
        w = np.array([3, 4, 5, 0, 3, 4])
        _, probs, _ = enumerated_s1_objective(model, net, w, 0.0, 0.0)
        exact = probs @ all_fixations(6)
        ro = attnpolicy.rollout(model, net, np.repeat(w[None], 20000, axis=0),
                                np.random.default_rng(2))
        assert np.max(np.abs(ro.omega.mean(axis=0) - exact)) < 0.02

    def test_log_prob_normalized(self, tiny_model):
        model, net = tiny_model
        _, probs, _ = enumerated_s1_objective(model, net, [3, 4, 5, 0], 1.0, 0.0)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)


class TestEstimator:
    """The score-function estimator is checked against an exactly enumerated objective."""

    @pytest.mark.parametrize("seed", [0, 1])
    def test_expectation_is_exact_gradient(self, seed):
        model, net = tiny_s1(seed)
        w = np.array([3, 4, 0, 5])
        obj = lambda: enumerated_s1_objective(model, net, w, 1.5, 0.7)[0]
        ref = enumerated_gradient(obj, net.params)
        got = exact_expected_gradient(model, net, w, 1.5, 0.7)
        assert np.max(np.abs(got - ref)) < 1e-6

    def test_baseline_keeps_expectation(self):
        model, net = tiny_s1(3)
        w = np.array([3, 4, 0, 5])
        b = np.random.default_rng(0).normal(scale=5.0, size=4)
        plain = exact_expected_gradient(model, net, w, 2.0, 0.5)
        based = exact_expected_gradient(model, net, w, 2.0, 0.5, baseline=b)
        assert np.max(np.abs(plain - based)) < 1e-9

    def test_sampled_mean_within_error(self):
        model, net = tiny_s1(1)
        w = np.array([3, 4, 0, 5])
        obj = lambda: enumerated_s1_objective(model, net, w, 1.0, 0.5)[0]
        ref = enumerated_gradient(obj, net.params)
        per = sampled_gradient(model, net, w, 1.0, 0.5, np.random.default_rng(0), 20000)
        se = per.std(axis=0, ddof=1) / math.sqrt(len(per))
        assert np.all(np.abs(per.mean(axis=0) - ref) <= 4 * se + 1e-9)

    def test_score_gradient(self, tiny_model):
        model, net = tiny_model
        w = np.array([[3, 4, 5, 0]])
        om = np.array([[1.0, 0.0, 0.0, 1.0]])

        def fn(p):
            ro = attnpolicy.rollout(model, net, w, omega=om)
            grads, _ = attnpolicy.policy_gradient(net, ro, ro.omega - ro.probs)
            return float(ro.log_prob[0]), grads
        assert nn.finite_diff_check(fn, net.params) < 1e-6


class TestBaseline:
    def test_gradient(self):
        rng = np.random.default_rng(0)
        base = attnpolicy.BaselineEstimator(3, 4, rng)
        for p in base.params.values():
            p[...] = rng.uniform(-0.5, 0.5, size=p.shape)
        emb = rng.normal(size=(6, 3))
        w = rng.integers(0, 6, size=(2, 4))
        targets = rng.normal(size=(2, 4))
        fn = lambda p: base.loss_and_grads(emb, w, targets)
        assert nn.finite_diff_check(fn, base.params) < 1e-4

    def test_mean_baseline_reduces_variance(self, tiny_model):
        model, net = tiny_model
        w = np.array([3, 4, 0, 5])
        per0 = sampled_gradient(model, net, w, 2.0, 0.5, np.random.default_rng(1), 4000)
        wins = np.repeat(w[None], 4000, axis=0)
        ro = attnpolicy.rollout(model, net, wins, np.random.default_rng(2))
        dec = attnpolicy.window_costs(model, wins, ro) - ro.surprisal.sum(axis=1)
        b = attnpolicy.returns_to_go(ro, dec, 2.0, 0.5).mean(axis=0)
        per1 = sampled_gradient(model, net, w, 2.0, 0.5, np.random.default_rng(1), 4000, b)
        assert per1.var(axis=0).sum() < per0.var(axis=0).sum()


class TestTrainer:
    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            attnpolicy.TradeoffConfigS1(alpha=-1.0)

    def test_step_is_deterministic(self, tiny_model):
        w = np.random.default_rng(0).integers(0, 6, size=(16, 5))
        out = []
        for _ in range(2):
            model, net = tiny_s1(0)
            cfg = attnpolicy.TradeoffConfigS1(alpha=1.0, batch_size=8)
            tr = attnpolicy.PolicyTrainer(model, net, cfg, np.random.default_rng(4))
            tr.train(w, 2)
            out.append(net.w.copy())
        assert np.array_equal(out[0], out[1])

    def test_high_cost_lowers_rate(self, tiny_model):
        model, net = tiny_model
        w = np.random.default_rng(0).integers(0, 6, size=(64, 5))
        before = attnpolicy.mean_fixation_rate(model, net, w, np.random.default_rng(0))
        cfg = attnpolicy.TradeoffConfigS1(alpha=20.0, entropy_weight=0.1, learning_rate=0.05,
                                          use_baseline=False, batch_size=16)
        attnpolicy.PolicyTrainer(model, net, cfg, np.random.default_rng(1)).train(w, 5)
        after = attnpolicy.mean_fixation_rate(model, net, w, np.random.default_rng(0))
        assert after < before
