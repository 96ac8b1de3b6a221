import csv
import math

import numpy as np
import pytest

from neatread import neatqa, nn
from neatread.neatqa import NO_PREVIEW, PREVIEW
from conftest import enumerated_gradient, enumerated_qa_objective, tiny_qa


class TestHead:
    @pytest.mark.parametrize("seed", [0, 1])
    def test_gradient(self, seed):
        data, head, _ = tiny_qa(seed)
        batch = data.batch(np.arange(3))
        omega = np.array([[1, 0, 1, 1, 0, 1], [1, 1, 1, 1, 1, 1], [0, 1, 0, 1, 1, 0]]) * 1.0

        def fn(p):
            losses, grads, _ = head.loss_and_grads(batch, omega)
            return float(losses.sum()), grads
        # some question-encoder entries are ~1e-7, so a larger step keeps rounding noise down
        assert nn.finite_diff_check(fn, head.params, epsilon=1e-4) < 1e-4

    def test_distribution_over_entities(self):
        data, head, _ = tiny_qa(0)
        t = head.predict(data.batch(np.arange(4)), np.ones((4, 6)))
        assert t.shape == (4, data.n_entities)
        assert np.allclose(t.sum(axis=1), 1.0, atol=1e-12)

    def test_skipped_tokens_are_hidden(self):
        data, head, _ = tiny_qa(0)
        batch = data.batch([0])
        om = np.array([[1, 0, 1, 0, 1, 1.0]])
        a = head.predict(batch, om)
        batch.text[0, 1] = batch.text[0, 3] = 0
        assert np.array_equal(a, head.predict(batch, om))

    def test_padding_is_inert(self):
        data, head, _ = tiny_qa(0)
        batch = data.batch([0])
        alone = head.predict(batch, batch.text_mask)
        padded = neatqa.QABatch(np.pad(batch.text, ((0, 0), (0, 3)), constant_values=5),
                                np.pad(batch.text_mask, ((0, 0), (0, 3))), batch.question,
                                batch.question_mask, np.pad(batch.in_question, ((0, 0), (0, 3))),
                                batch.answers)
        assert np.allclose(head.predict(padded, padded.text_mask), alone, atol=1e-14)

    def test_strict_correctness(self):
        t = np.array([[0.5, 0.5, 0.0], [0.2, 0.7, 0.1]])
        assert neatqa.is_correct(t, np.array([0, 1])).tolist() == [False, True]


class TestAnneal:
    def test_endpoints_and_linearity(self):
        rates = [neatqa.anneal_rate(e, 5) for e in range(5)]
        assert rates[0] == 1.0 and rates[-1] == pytest.approx(0.6)
        assert np.allclose(np.diff(rates), -0.1)


class TestFeatures:
    def test_running_average(self):
        X = neatqa.raw_features(4, np.array([1.0, 1.0, 0.0, 1.0]), PREVIEW, decay=0.5)
        assert X[:, neatqa.FEAT_RUNAVG].tolist() == [0.0, 0.5, 0.75, 0.375]

    def test_skipped_words_do_not_count(self):
        X = neatqa.raw_features(3, np.ones(3), PREVIEW, omega=[0, 1, 1], decay=0.5)
        assert X[:, neatqa.FEAT_RUNAVG].tolist() == [0.0, 0.0, 0.5]

    def test_position_and_condition(self):
        X = neatqa.raw_features(3, np.zeros(3), NO_PREVIEW)
        assert X[:, neatqa.FEAT_POS].tolist() == [1, 2, 3]
        assert X[:, neatqa.FEAT_INTER].tolist() == [0.5, 1.0, 1.5]

    def test_no_preview_hides_question(self):
        data, _, attn = tiny_qa(0)
        inq = np.array([1.0, 1.0, 1.0, 1.0])
        X = neatqa.qa_feature_vector(4, inq, NO_PREVIEW, [1, 1, 1], 0.5, attn.scaler)
        assert X[neatqa.FEAT_QUESTION] == 0.0 and X[neatqa.FEAT_RUNAVG] == 0.0
        Y = neatqa.qa_feature_vector(4, inq, PREVIEW, [1, 1, 1], 0.5)
        assert Y[neatqa.FEAT_RUNAVG] == pytest.approx(0.875)

    def test_rollout_matches_feature_vector(self):
        data, head, attn = tiny_qa(2)
        batch = data.batch([0])
        om = np.array([[1, 0, 1, 1, 0, 1.0]])
        ro = neatqa.qa_rollout(attn, head.emb, batch, PREVIEW, omega=om)
        for i in range(6):
            X = neatqa.qa_feature_vector(i + 1, batch.in_question[0], PREVIEW, om[0, :i],
                                         attn.decay, attn.scaler)
            assert np.allclose(ro.X[0, i], X, atol=1e-12)
            ref = neatqa.qa_attention_score(attn, ro.w_hat[0, i], X)
            assert ro.probs[0, i] == pytest.approx(ref, abs=1e-12)

    def test_zero_policy_is_half(self):
        data, head, _ = tiny_qa(0)
        attn = neatqa.QAAttention(head.emb.shape[1], neatqa.fit_feature_scaler(data))
        ro = neatqa.qa_rollout(attn, head.emb, data.batch([0, 1]), PREVIEW,
                               rng=np.random.default_rng(0))
        assert np.all(ro.probs == 0.5)

    def test_embedding_variant(self):
        data, head, _ = tiny_qa(0)
        attn = neatqa.QAAttention(3, neatqa.fit_feature_scaler(data), v_on_embedding=True)
        attn.v[...] = [1.0, 0.0, 0.0]
        ro = neatqa.qa_rollout(attn, head.emb, data.batch([0]), PREVIEW,
                               rng=np.random.default_rng(0))
        assert np.allclose(ro.logits[0], ro.w_hat[0, :, 0])


class TestPolicyGradient:
    """Expected estimator against central differences of the enumerated objective."""

    @pytest.mark.parametrize("condition", [PREVIEW, NO_PREVIEW])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_expectation_is_exact_gradient(self, seed, condition):
        data, head, attn = tiny_qa(seed)
        cfg = neatqa.QATradeoffConfig(alpha=1.5, entropy_weight=0.3)
        obj = lambda: enumerated_qa_objective(attn, head, data, 0, condition, 1.5, 0.3)[0]
        ref = enumerated_gradient(obj, attn.params)
        _, probs, ro, nll, _ = enumerated_qa_objective(attn, head, data, 0, condition, 1.5, 0.3)
        coeffs = neatqa.qa_logit_coefficients(ro, nll, cfg, 0.0)
        _, per = neatqa.qa_policy_gradient(attn, ro, coeffs)
        assert np.max(np.abs(probs @ per - ref)) < 1e-6

    def test_constant_baseline_keeps_expectation(self):
        data, head, attn = tiny_qa(1)
        cfg = neatqa.QATradeoffConfig(alpha=2.0, entropy_weight=0.1)
        _, probs, ro, nll, _ = enumerated_qa_objective(attn, head, data, 0, PREVIEW, 2.0, 0.1)
        g0 = probs @ neatqa.qa_policy_gradient(attn, ro, neatqa.qa_logit_coefficients(
            ro, nll, cfg, 0.0))[1]
        g1 = probs @ neatqa.qa_policy_gradient(attn, ro, neatqa.qa_logit_coefficients(
            ro, nll, cfg, 3.7))[1]
        assert np.max(np.abs(g0 - g1)) < 1e-9

    def test_approximate_rate_gradient_is_biased(self):
        data, head, attn = tiny_qa(0)
        exact = neatqa.QATradeoffConfig(alpha=3.0, entropy_weight=0.3)
        approx = neatqa.QATradeoffConfig(alpha=3.0, entropy_weight=0.3, exact_rate_gradient=False)
        _, probs, ro, nll, _ = enumerated_qa_objective(attn, head, data, 0, PREVIEW, 3.0, 0.3)
        g = [probs @ neatqa.qa_policy_gradient(attn, ro, neatqa.qa_logit_coefficients(
            ro, nll, c, 0.0))[1] for c in (exact, approx)]
        # only kappa and the feature (e) weights see earlier decisions
        assert np.max(np.abs(g[0] - g[1])) > 1e-6

    def test_realized_objective(self):
        data, head, attn = tiny_qa(0)
        _, _, ro, nll, _ = enumerated_qa_objective(attn, head, data, 0, PREVIEW, 2.0, 0.0)
        got = neatqa.expected_objective_terms(ro, nll, 2.0, 0.0)
        assert np.allclose(got, nll + 2.0 * ro.omega.sum(axis=1) / 6)

    def test_padding_gets_no_gradient(self):
        data, head, attn = tiny_qa(0)
        batch = data.batch([0])
        padded = neatqa.QABatch(np.pad(batch.text, ((0, 0), (0, 2))),
                                np.pad(batch.text_mask, ((0, 0), (0, 2))), batch.question,
                                batch.question_mask, np.pad(batch.in_question, ((0, 0), (0, 2))),
                                batch.answers)
        a = neatqa.qa_rollout(attn, head.emb, batch, PREVIEW, rng=np.random.default_rng(3))
        b = neatqa.qa_rollout(attn, head.emb, padded, PREVIEW, rng=np.random.default_rng(3))
        assert np.all(b.omega[0, 6:] == 0)
        assert b.log_prob()[0] == pytest.approx(a.log_prob()[0], abs=1e-12)
        cfg = neatqa.QATradeoffConfig()
        nll = np.array([1.3])
        ga = neatqa.qa_policy_gradient(attn, a, neatqa.qa_logit_coefficients(a, nll, cfg))[1]
        gb = neatqa.qa_policy_gradient(attn, b, neatqa.qa_logit_coefficients(b, nll, cfg))[1]
        assert np.allclose(ga, gb, atol=1e-12)


class TestTraining:
    def test_trainer_step(self):
        data, head, attn = tiny_qa(0)
        tr = neatqa.QAPolicyTrainer(attn, head, neatqa.QATradeoffConfig(batch_size=3),
                                    np.random.default_rng(0))
        hist = tr.train(data, 2)
        assert len(hist) == 2 and 0 <= hist[-1]["mean_fixation_rate"] <= 1
        assert tr.baseline[PREVIEW] is not None or tr.baseline[NO_PREVIEW] is not None

    def test_negative_alpha(self):
        with pytest.raises(ValueError):
            neatqa.QATradeoffConfig(alpha=-0.5)

    def test_head_training_lowers_loss(self):
        data, head, _ = tiny_qa(0, n_examples=40)
        hist = neatqa.train_qa_head(head, data, 6, np.random.default_rng(0), learning_rate=0.2,
                                    batch_size=8, full_epochs=2)
        assert hist[-1]["mean_loss"] < hist[0]["mean_loss"]
        assert [h["mean_fixation_rate"] for h in hist][:3] == [1.0, 1.0, 1.0]

    def test_filter_answerable(self):
        data, head, _ = tiny_qa(0, n_examples=20)
        keep = neatqa.filter_answerable(head, data)
        assert np.array_equal(np.flatnonzero(neatqa.full_attention_accuracy(head, data)), keep)


class TestSweep:
    def test_grid(self):
        g = neatqa.alpha_grid()
        assert len(g) == 17 and g[0] == 0.0 and g[-1] == 4.0 and g[1] == 0.25

    def test_csv_rows(self, tmp_path):
        data, head, _ = tiny_qa(0)
        cfg = neatqa.QATradeoffConfig(batch_size=6)
        pts = neatqa.alpha_sweep(head, data, data, neatqa.alpha_grid(), 2, cfg, 0, 1)
        path = tmp_path / "sweep.csv"
        neatqa.write_sweep_csv(pts, path)
        rows = list(csv.DictReader(open(path)))
        assert len(rows) == 17 * 2 * 2
        assert {r["condition"] for r in rows} == {"preview", "no_preview"}
        assert all(0 <= float(r["fixation_rate"]) <= 1 for r in rows)

    def test_failed_run_is_recorded(self):
        data, head, _ = tiny_qa(0)
        cfg = neatqa.QATradeoffConfig(batch_size=3, learning_rate=math.inf)
        with np.errstate(all="ignore"):
            pts = neatqa.alpha_sweep(head, data, data, [1.0], 1, cfg, 0, 2)
        assert len(pts) == 2 and all(math.isnan(p.fixation_rate) and p.error for p in pts)

    def test_select_alpha(self):
        P = neatqa.TradeoffPoint
        pts = [P(0.0, 0, "preview", 0.9, 1), P(1.0, 0, "preview", 0.6, 1),
               P(2.0, 0, "preview", 0.3, 1), P(3.0, 0, "preview", float("nan"), 1)]
        assert neatqa.select_alpha(pts, 0.62) == 1.0
