"""Loss values and analytic gradients against finite-difference oracles."""

import numpy as np
import pytest

from oracles import assert_close_rel, fd_grad, random_distribution
from sparsekd.distributions import make_rng, softmax, zipf
from sparsekd.errors import SingularityError
from sparsekd.losses import (
    ce_loss,
    ghost_grad,
    ghost_grad_rows,
    ghost_loss,
    ghost_loss_rows,
    grad_general,
    kld_grad_rows,
    kld_loss,
    kld_loss_rows,
    l1_loss,
    mse_loss,
    reverse_kld_loss,
)
from sparsekd.sparsify import SparseTarget, ghost_token, random_sampling, top_k


def _random_instance(rng, vocab):
    """Random logits plus a random sparse target over the same vocabulary."""
    logits = rng.normal(scale=2.0, size=vocab)
    t = random_distribution(rng, vocab)
    k = int(rng.integers(1, vocab + 1))
    if rng.random() < 0.5:
        target = top_k(t, k, normalize=bool(rng.integers(2)))
    else:
        target = SparseTarget.from_dense(t)
    return logits, t, target


class TestKldLoss:
    def test_zero_at_matching_distributions(self):
        logits = np.array([0.3, -1.2, 2.0])
        target = SparseTarget.from_dense(softmax(logits))
        assert abs(kld_loss(logits, target)) <= 1e-12

    def test_one_hot_against_fair_coin(self):
        target = SparseTarget.from_dense(np.array([1.0, 0.0]))
        assert abs(kld_loss(np.zeros(2), target) - np.log(2)) <= 1e-12

    def test_restricted_target_loss_is_negative_at_its_optimum(self):
        # Student matching the up-scaled Top-K target: zero gradient but
        # negative loss, since the kept weights are below their logs' scale.
        t = zipf(4)
        target = top_k(t, 2)
        scaled = target.weights / target.weight_sum
        logits = np.full(4, -800.0)
        logits[target.token_ids] = np.log(scaled)
        g = grad_general(softmax(logits), target)
        assert np.max(np.abs(g)) <= 1e-9
        assert kld_loss(logits, target) < 0


class TestCeLoss:
    def test_one_hot_certain_prediction(self):
        target = SparseTarget.from_dense(np.array([1.0, 0.0, 0.0]))
        assert ce_loss(np.array([800.0, 0.0, 0.0]), target) == 0.0

    def test_one_hot_is_negative_log_prob(self):
        logits = np.array([0.5, -0.3, 1.1])
        target = SparseTarget.from_dense(np.array([0.0, 1.0, 0.0]))
        expected = -np.log(softmax(logits)[1])
        assert abs(ce_loss(logits, target) - expected) <= 1e-12

    def test_difference_to_kld_is_target_entropy(self):
        rng = make_rng(0)
        for _ in range(50):
            logits, t, target = _random_instance(rng, int(rng.integers(3, 30)))
            entropy = -(target.weights * np.log(target.weights)).sum()
            got = ce_loss(logits, target) - kld_loss(logits, target)
            assert abs(got - entropy) <= 1e-9


class TestGradGeneral:
    def test_zero_at_dense_optimum(self):
        logits = np.array([0.1, 0.7, -0.4, 0.0])
        p = softmax(logits)
        g = grad_general(p, SparseTarget.from_dense(p))
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_raw_topk_substitution(self):
        target = SparseTarget(np.array([0]), np.array([0.7]), 2, "top_k")
        g = grad_general(np.array([0.5, 0.5]), target)
        np.testing.assert_allclose(g, [-0.35, 0.35], atol=1e-15)

    def test_fullkd_gradient_is_p_minus_t(self):
        rng = make_rng(1)
        t = random_distribution(rng, 12)
        logits = rng.normal(size=12)
        p = softmax(logits)
        np.testing.assert_array_equal(grad_general(p, SparseTarget.from_dense(t)), p - t)

    def test_normalized_target_gradient_sums_to_zero(self):
        rng = make_rng(2)
        for _ in range(30):
            t = random_distribution(rng, 10)
            p = softmax(rng.normal(size=10))
            assert abs(grad_general(p, SparseTarget.from_dense(t)).sum()) <= 1e-9

    @pytest.mark.parametrize("vocab", [4, 16, 64])
    def test_matches_finite_differences(self, vocab):
        rng = make_rng(vocab)
        for _ in range(10):
            logits, _, target = _random_instance(rng, vocab)
            analytic = grad_general(softmax(logits), target)
            numeric = fd_grad(lambda z: kld_loss(z, target), logits)
            assert_close_rel(analytic, numeric)


class TestGhost:
    def test_matching_student_gives_zero_loss_and_grad(self):
        t = zipf(6)
        target = ghost_token(t, 3)
        logits = np.log(t)
        assert abs(ghost_loss(logits, target)) <= 1e-12
        np.testing.assert_allclose(ghost_grad(softmax(logits), target), 0.0, atol=1e-12)

    def test_full_coverage_equals_dense_kld(self):
        t = zipf(5)
        target = ghost_token(t, 5)
        logits = make_rng(3).normal(size=5)
        dense = SparseTarget.from_dense(t)
        assert abs(ghost_loss(logits, target) - kld_loss(logits, dense)) <= 1e-12

    def test_direct_two_term_evaluation(self):
        rng = make_rng(4)
        for _ in range(25):
            vocab = int(rng.integers(3, 20))
            t = random_distribution(rng, vocab)
            k = int(rng.integers(1, vocab))
            logits = rng.normal(size=vocab)
            target = ghost_token(t, k)
            p = softmax(logits)
            kept = target.base.token_ids
            w = target.base.weights
            expected = (w * np.log(w / p[kept])).sum()
            tg = target.ghost_weight
            if tg > 0:
                expected += tg * np.log(tg / (1 - p[kept].sum()))
            assert abs(ghost_loss(logits, target) - expected) <= 1e-12

    def test_kept_tokens_get_dense_gradient(self):
        rng = make_rng(5)
        t = random_distribution(rng, 10)
        target = ghost_token(t, 4)
        p = softmax(rng.normal(size=10))
        g = ghost_grad(p, target)
        kept = target.base.token_ids
        np.testing.assert_array_equal(g[kept], p[kept] - target.base.weights)

    @pytest.mark.parametrize("vocab", [4, 16, 64])
    def test_matches_finite_differences(self, vocab):
        rng = make_rng(40 + vocab)
        for _ in range(10):
            t = random_distribution(rng, vocab)
            k = int(rng.integers(1, vocab))
            target = ghost_token(t, k)
            logits = rng.normal(scale=2.0, size=vocab)
            analytic = ghost_grad(softmax(logits), target)
            numeric = fd_grad(lambda z: ghost_loss(z, target), logits)
            assert_close_rel(analytic, numeric)

    def test_singularity_when_student_mass_all_kept(self):
        t = zipf(4)
        target = ghost_token(t, 2)
        p = np.array([0.6, 0.4, 0.0, 0.0])
        with pytest.raises(SingularityError):
            ghost_grad(p, target)
        logits = np.array([800.0, 799.0, 0.0, 0.0])
        with pytest.raises(SingularityError):
            ghost_loss(logits, target)


class TestDenseLosses:
    def test_identical_distributions_are_zero(self):
        logits = np.array([0.2, -0.5, 1.0])
        t = softmax(logits)
        assert abs(reverse_kld_loss(logits, t)) <= 1e-12
        assert abs(mse_loss(logits, t)) <= 1e-15
        assert abs(l1_loss(logits, t)) <= 1e-12

    def test_hand_computed_values(self):
        logits = np.log([0.5, 0.5])
        t = np.array([0.75, 0.25])
        assert abs(mse_loss(logits, t) - 0.0625) <= 1e-12
        assert abs(l1_loss(logits, t) - 0.5) <= 1e-12
        expected = 0.5 * np.log(0.5 / 0.75) + 0.5 * np.log(0.5 / 0.25)
        assert abs(reverse_kld_loss(logits, t) - expected) <= 1e-12

    def test_reverse_kld_singularity_on_empty_target_support(self):
        with pytest.raises(SingularityError):
            reverse_kld_loss(np.zeros(2), np.array([1.0, 0.0]))


class TestRowBatchedVariants:
    """The [B, V] helpers must agree with their per-vector counterparts."""

    def _batch(self, rng, rows, vocab):
        logits = rng.normal(scale=2.0, size=(rows, vocab))
        teacher = np.stack([random_distribution(rng, vocab) for _ in range(rows)])
        return logits, teacher

    def test_kld_grad_rows(self):
        rng = make_rng(6)
        logits, teacher = self._batch(rng, 7, 11)
        probs = softmax(logits)
        rows = kld_grad_rows(probs, teacher)
        for i in range(7):
            single = grad_general(probs[i], SparseTarget.from_dense(teacher[i]))
            np.testing.assert_allclose(rows[i], single, atol=1e-15)

    def test_kld_loss_rows(self):
        rng = make_rng(7)
        logits, teacher = self._batch(rng, 5, 9)
        mean_loss = kld_loss_rows(logits, teacher)
        singles = [kld_loss(logits[i], SparseTarget.from_dense(teacher[i])) for i in range(5)]
        assert abs(mean_loss - np.mean(singles)) <= 1e-12

    def test_ghost_rows(self):
        rng = make_rng(8)
        logits, teacher = self._batch(rng, 6, 8)
        probs = softmax(logits)
        order = np.argsort(-teacher, axis=1, kind="stable")[:, :3]
        mask = np.zeros(teacher.shape, dtype=bool)
        np.put_along_axis(mask, order, True, axis=1)
        grad_rows = ghost_grad_rows(probs, teacher, mask)
        loss_rows = ghost_loss_rows(logits, teacher, mask)
        singles = []
        for i in range(6):
            target = ghost_token(teacher[i], 3)
            np.testing.assert_allclose(grad_rows[i], ghost_grad(probs[i], target), atol=1e-14)
            singles.append(ghost_loss(logits[i], target))
        assert abs(loss_rows - np.mean(singles)) <= 1e-12


class TestGradientPreservation:
    def test_random_sampling_preserves_expected_gradient(self):
        # Scaled-down version of the full acceptance check.
        t = zipf(30)
        p = softmax(make_rng(9).normal(size=30))
        reps, n = 20_000, 20
        rng = make_rng(10)
        acc = np.zeros(30)
        for _ in range(reps):
            target = random_sampling(t, n, 1.0, rng=rng)
            acc += grad_general(p, target)
        mean_grad = acc / reps
        stderr = np.sqrt(t * (1 - t) / (n * reps))
        assert np.all(np.abs(mean_grad - (p - t)) <= 3 * stderr)
