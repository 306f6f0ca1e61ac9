"""Synthetic task, MLP forward/backward, Adam, and the training loop."""

import math

import numpy as np
import pytest
from scipy.special import erf

from oracles import assert_close_rel, fd_grad, random_distribution
from sparsekd.distributions import make_rng, softmax
from sparsekd.errors import DivergenceError, UndefinedAngleError
from sparsekd.losses import kld_loss_rows
from sparsekd.sparsify import label_smoothing, naive_fix, top_k, top_p
from sparsekd.toytrain import (
    MlpModel,
    SchemeSpec,
    TrainConfig,
    adam_init,
    adam_step,
    backward,
    build_target_rows,
    forward,
    gelu,
    gelu_grad,
    get_batch,
    gradient_similarity,
    init_model,
    make_task,
    train,
)

TINY = TrainConfig(num_rounds=40, batch_size=32, eval_batches=4, eval_batch_size=64)


def _tiny_task(seed=0, classes=8, dim=4):
    return make_task(classes, dim, 1.5, make_rng(seed))


class TestTask:
    def test_shapes_and_sigma_bounds(self):
        task = make_task(16, 5, 1.5, make_rng(0))
        assert task.class_centers.shape == (16, 5)
        assert np.all(task.class_sigma >= 0) and np.all(task.class_sigma <= 1.5)
        assert np.all(task.class_centers >= 0) and np.all(task.class_centers < 1)

    def test_zero_sigma_batches_equal_centers(self):
        task = make_task(6, 3, 0.0, make_rng(1))
        x, y = get_batch(task, 50, make_rng(2))
        np.testing.assert_array_equal(x, task.class_centers[y])

    def test_labels_uniform_within_three_stderr(self):
        task = _tiny_task(classes=10)
        _, y = get_batch(task, 100_000, make_rng(3))
        freq = np.bincount(y, minlength=10) / y.size
        stderr = math.sqrt(0.1 * 0.9 / y.size)
        assert np.all(np.abs(freq - 0.1) <= 3 * stderr)

    def test_batches_reproducible(self):
        task = _tiny_task()
        a = get_batch(task, 64, make_rng(4))
        b = get_batch(task, 64, make_rng(4))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestForward:
    def test_zero_parameters_give_zero_logits(self):
        model = MlpModel(np.zeros((3, 5)), np.zeros(5), np.zeros((5, 5)),
                         np.zeros(5), np.zeros((5, 2)), np.zeros(2))
        logits = forward(model, np.ones((4, 3)))
        np.testing.assert_array_equal(logits, np.zeros((4, 2)))

    def test_single_unit_closed_form(self):
        # 1-1-1 network, all weights 1, biases 0: w3*gelu(w2*gelu(x))
        model = MlpModel(np.ones((1, 1)), np.zeros(1), np.ones((1, 1)),
                         np.zeros(1), np.ones((1, 1)), np.zeros(1))
        x = 0.75
        phi = lambda v: 0.5 * v * (1 + erf(v / math.sqrt(2)))
        expected = phi(phi(x))
        got = forward(model, np.array([[x]]))[0, 0]
        assert abs(got - expected) <= 1e-15

    def test_batch_equals_row_by_row(self):
        model = init_model(6, 9, 4, make_rng(5))
        x = make_rng(6).normal(size=(12, 6))
        batch_logits = forward(model, x)
        for i in range(12):
            np.testing.assert_allclose(batch_logits[i], forward(model, x[i:i + 1])[0],
                                       rtol=0, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        model = init_model(6, 9, 4, make_rng(0))
        with pytest.raises(ValueError):
            forward(model, np.zeros((3, 5)))


class TestGelu:
    def test_matches_scalar_definition(self):
        x = np.linspace(-6, 6, 101)
        expected = x * 0.5 * (1 + erf(x / math.sqrt(2)))
        np.testing.assert_array_equal(gelu(x), expected)

    def test_grad_matches_finite_differences(self):
        x = np.linspace(-4, 4, 41)
        numeric = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6
        np.testing.assert_allclose(gelu_grad(x), numeric, atol=1e-9)


class TestBackward:
    def test_zero_logit_grads_give_zero_param_grads(self):
        model = init_model(4, 5, 3, make_rng(7))
        grads = backward(model, np.ones((6, 4)), np.zeros((6, 3)))
        for g in grads.values():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_bias3_gradient_is_column_sum(self):
        model = init_model(4, 5, 3, make_rng(8))
        g = make_rng(9).normal(size=(6, 3))
        grads = backward(model, make_rng(10).normal(size=(6, 4)), g)
        np.testing.assert_allclose(grads["b3"], g.sum(axis=0), atol=1e-15)

    def test_matches_finite_differences_for_every_parameter(self):
        # scalar objective: sum(logits * G) for a fixed contraction G
        rng = make_rng(11)
        model = init_model(4, 5, 3, rng)
        x = rng.normal(size=(7, 4))
        contraction = rng.normal(size=(7, 3))
        analytic = backward(model, x, contraction)

        for name in MlpModel.PARAM_NAMES:
            ref = getattr(model, name)
            flat = ref.ravel()

            def objective(values, name=name, ref=ref, flat=flat):
                saved = flat.copy()
                flat[:] = values
                out = float((forward(model, x) * contraction).sum())
                flat[:] = saved
                return out

            numeric = fd_grad(objective, flat.copy())
            assert_close_rel(analytic[name].ravel(), numeric, rel=1e-5, abs_floor=1e-9)


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        params = {"w": np.array([1.0, -2.0])}
        state = adam_init(params, lr=0.1)
        adam_step(state, params, {"w": np.zeros(2)})
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_is_signed_learning_rate(self):
        params = {"w": np.array([0.0, 0.0, 0.0])}
        state = adam_init(params, lr=1e-3)
        adam_step(state, params, {"w": np.array([2.5, -0.7, 1.0])})
        np.testing.assert_allclose(params["w"], [-1e-3, 1e-3, -1e-3], atol=1e-9)

    def test_deterministic(self):
        def run():
            params = {"w": np.ones(4)}
            state = adam_init(params, lr=0.01)
            for i in range(25):
                adam_step(state, params, {"w": np.sin(np.arange(4) + i)})
            return params["w"]

        np.testing.assert_array_equal(run(), run())

    def test_step_counter_increments(self):
        params = {"w": np.zeros(1)}
        state = adam_init(params, lr=0.1)
        for expected in (1, 2, 3):
            adam_step(state, params, {"w": np.ones(1)})
            assert state.step == expected

    def test_non_finite_gradient_raises_divergence(self):
        params = {"w": np.zeros(2)}
        state = adam_init(params, lr=0.1)
        with pytest.raises(DivergenceError):
            adam_step(state, params, {"w": np.array([1.0, np.nan])})


class TestTargetRowsMatchSchemes:
    """Batched target construction must equal the per-vector schemes."""

    def _teacher_rows(self, rows=9, vocab=12, seed=12):
        rng = make_rng(seed)
        return np.stack([random_distribution(rng, vocab) for _ in range(rows)])

    def test_topk_rows(self):
        tp = self._teacher_rows()
        rows, mask = build_target_rows(SchemeSpec("topk", k=4), tp, None, make_rng(0))
        assert mask is None
        for i, t in enumerate(tp):
            np.testing.assert_allclose(rows[i], top_k(t, 4).to_dense(), rtol=0, atol=1e-15)

    def test_top_p_rows(self):
        tp = self._teacher_rows()
        spec = SchemeSpec("topk", k=5, top_p=0.6)
        rows, _ = build_target_rows(spec, tp, None, make_rng(0))
        for i, t in enumerate(tp):
            np.testing.assert_allclose(rows[i], top_p(t, 0.6, 5).to_dense(), rtol=0, atol=1e-15)

    def test_naive_fix_rows(self):
        tp = self._teacher_rows()
        labels = make_rng(13).integers(0, 12, size=tp.shape[0])
        rows, _ = build_target_rows(SchemeSpec("naive-fix", k=3), tp, labels, make_rng(0))
        for i, t in enumerate(tp):
            np.testing.assert_allclose(rows[i], naive_fix(t, 3, labels[i]).to_dense(),
                                       rtol=0, atol=1e-15)

    def test_label_smoothing_rows(self):
        tp = self._teacher_rows()
        rows, _ = build_target_rows(SchemeSpec("label-smoothing", k=3), tp, None, make_rng(0))
        for i, t in enumerate(tp):
            np.testing.assert_allclose(rows[i], label_smoothing(t, 3).to_dense(),
                                       rtol=0, atol=1e-15)

    def test_ghost_rows_mask_matches_top_k(self):
        tp = self._teacher_rows()
        rows, mask = build_target_rows(SchemeSpec("ghost", k=4), tp, None, make_rng(0))
        for i, t in enumerate(tp):
            kept = top_k(t, 4)
            np.testing.assert_array_equal(np.nonzero(mask[i])[0], kept.token_ids)
            np.testing.assert_allclose(rows[i][mask[i]], kept.weights, rtol=0, atol=1e-15)

    def test_random_sampling_rows_sum_to_one(self):
        tp = self._teacher_rows()
        spec = SchemeSpec("random-sampling", sample_rounds=30)
        rows, _ = build_target_rows(spec, tp, None, make_rng(14))
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-12)


class TestTrain:
    def test_reproducible_bit_for_bit(self):
        task = _tiny_task()
        a = train(SchemeSpec("student-ce"), task, TINY, rng=make_rng(21))
        b = train(SchemeSpec("student-ce"), task, TINY, rng=make_rng(21))
        for name in MlpModel.PARAM_NAMES:
            np.testing.assert_array_equal(getattr(a.model, name), getattr(b.model, name))
        assert a.accuracy == b.accuracy and a.report.ece == b.report.ece

    def test_zero_learning_rate_keeps_initialization(self):
        task = _tiny_task()
        cfg = TrainConfig(num_rounds=20, batch_size=16, eval_batches=2,
                          eval_batch_size=32, lr=0.0)
        result = train(SchemeSpec("student-ce"), task, cfg, rng=make_rng(22))
        init_rng = make_rng(22).spawn(4)[0]
        fresh = init_model(task.num_dim, cfg.hidden_student, task.num_classes, init_rng)
        for name in MlpModel.PARAM_NAMES:
            np.testing.assert_array_equal(getattr(result.model, name), getattr(fresh, name))

    def test_kd_without_teacher_rejected(self):
        with pytest.raises(ValueError):
            train(SchemeSpec("fullkd"), _tiny_task(), TINY, rng=make_rng(0))

    @pytest.mark.parametrize("spec", [
        SchemeSpec("fullkd"),
        SchemeSpec("topk", k=3),
        SchemeSpec("random-sampling", sample_rounds=10),
        SchemeSpec("ghost", k=3),
        SchemeSpec("naive-fix", k=3),
        SchemeSpec("label-smoothing", k=3),
    ])
    def test_every_kd_scheme_trains(self, spec):
        task = _tiny_task()
        teacher = train(SchemeSpec("teacher-ce"), task, TINY, rng=make_rng(23)).model
        result = train(spec, task, TINY, rng=make_rng(24), teacher=teacher)
        assert 0.0 <= result.accuracy <= 1.0
        assert 0.0 <= result.report.ece <= 1.0

    def test_non_finite_loss_raises_divergence_with_step(self, monkeypatch):
        import sparsekd.toytrain as tt
        task = _tiny_task()
        teacher = train(SchemeSpec("teacher-ce"), task, TINY, rng=make_rng(25)).model
        calls = {"n": 0}

        def poisoned(logits, targets):
            calls["n"] += 1
            return math.nan if calls["n"] >= 3 else kld_loss_rows(logits, targets)

        monkeypatch.setattr(tt, "kld_loss_rows", poisoned)
        with pytest.raises(DivergenceError) as err:
            train(SchemeSpec("fullkd"), task, TINY, rng=make_rng(26), teacher=teacher)
        assert err.value.step == 2

    def test_history_records_interim_evaluations(self):
        task = _tiny_task()
        cfg = TrainConfig(num_rounds=30, batch_size=16, eval_batches=2,
                          eval_batch_size=32, eval_interval=10, interim_eval_batches=1)
        result = train(SchemeSpec("student-ce"), task, cfg, rng=make_rng(27))
        assert [h["step"] for h in result.history] == [10, 20, 30]
        assert all({"train_loss", "accuracy", "ece"} <= set(h) for h in result.history)


class TestEndToEndGradients:
    """Whole-model gradients under each scheme match finite differences."""

    @pytest.mark.parametrize("name,kwargs", [
        ("fullkd", {}),
        ("topk", {"k": 2}),
        ("ghost", {"k": 2}),
        ("naive-fix", {"k": 2}),
        ("label-smoothing", {"k": 2}),
        ("random-sampling", {"sample_rounds": 12}),
    ])
    def test_scheme_loss_gradient(self, name, kwargs):
        from sparsekd.losses import ghost_grad_rows, ghost_loss_rows, kld_grad_rows

        rng = make_rng(31)
        task = _tiny_task(seed=31, classes=5, dim=3)
        teacher = init_model(3, 6, 5, rng)
        model = init_model(3, 4, 5, rng)
        x, y = get_batch(task, 6, rng)
        teacher_probs = softmax(forward(teacher, x))
        spec = SchemeSpec(name, **kwargs)
        targets, mask = build_target_rows(spec, teacher_probs, y, make_rng(32))

        logits = forward(model, x)
        probs = softmax(logits)
        if mask is None:
            logit_grad = kld_grad_rows(probs, targets) / x.shape[0]
            loss_fn = lambda lg: kld_loss_rows(lg, targets)
        else:
            logit_grad = ghost_grad_rows(probs, teacher_probs, mask) / x.shape[0]
            loss_fn = lambda lg: ghost_loss_rows(lg, teacher_probs, mask)
        analytic = backward(model, x, logit_grad)

        for pname in MlpModel.PARAM_NAMES:
            ref = getattr(model, pname)
            flat = ref.ravel()

            def objective(values, flat=flat):
                saved = flat.copy()
                flat[:] = values
                out = loss_fn(forward(model, x))
                flat[:] = saved
                return out

            numeric = fd_grad(objective, flat.copy())
            assert_close_rel(analytic[pname].ravel(), numeric, rel=1e-5, abs_floor=1e-9)


class TestGradientSimilarity:
    def test_fullkd_self_row_is_exact(self):
        task = _tiny_task(seed=41)
        rng = make_rng(42)
        teacher = init_model(task.num_dim, 8, task.num_classes, rng)
        student = init_model(task.num_dim, 6, task.num_classes, rng)
        batch = get_batch(task, 32, rng)
        rows = gradient_similarity(teacher, student, task, [SchemeSpec("fullkd")],
                                   batch, rng=make_rng(43))
        assert rows[0].scheme == "fullkd"
        assert rows[0].angle_degrees == 0.0
        assert rows[0].norm_ratio == 1.0

    def test_zero_reference_gradient_raises(self):
        task = _tiny_task(seed=44)
        rng = make_rng(45)
        model = init_model(task.num_dim, 8, task.num_classes, rng)
        batch = get_batch(task, 16, rng)
        with pytest.raises(UndefinedAngleError):
            gradient_similarity(model, model, task, [SchemeSpec("topk", k=2)],
                                batch, rng=make_rng(46))

    def test_deterministic_given_seed(self):
        task = _tiny_task(seed=47)
        rng = make_rng(48)
        teacher = init_model(task.num_dim, 8, task.num_classes, rng)
        student = init_model(task.num_dim, 6, task.num_classes, rng)
        batch = get_batch(task, 32, rng)
        schemes = [SchemeSpec("topk", k=3),
                   SchemeSpec("random-sampling", sample_rounds=9)]
        a = gradient_similarity(teacher, student, task, schemes, batch, rng=make_rng(49))
        b = gradient_similarity(teacher, student, task, schemes, batch, rng=make_rng(49))
        assert a == b
