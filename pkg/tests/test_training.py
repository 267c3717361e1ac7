import math

import numpy as np
import pytest

from collablstm import lstmp, training
from collablstm.errors import NumericError, ValidationError
from collablstm.features import FeatureSequence
from collablstm.lstmp import init_params
from collablstm.multitask import FeedbackRouting, init_multitask
from collablstm.training import (Batch, LossSpec, OptimizerSpec, backward_sequence, clip_by_global_norm,
                                 frame_loss, global_norm, gradcheck, loss_and_grads, numeric_grads,
                                 relative_error, sgd_step, train)

L_DIMS = dict(input=3, cell=4, rproj=2, pproj=2, out=2)
S_DIMS = dict(input=3, cell=4, rproj=2, pproj=2, out=3)


def _ce(logits, label):
    top = max(logits)
    lse = top + math.log(sum(math.exp(v - top) for v in logits))
    return lse - logits[label]


def _toy_corpus(n_per=6, T=12, seed=0):
    rng = np.random.default_rng(seed)
    seqs = []
    for k in range(n_per * 2):
        lang = f"lang{k % 2}"
        spk = f"spk{k % 3}"
        frames = rng.standard_normal((T + k % 3, 3)) + (1.5 if k % 2 else -1.5)
        seqs.append(FeatureSequence(f"u{k:02d}", spk, lang, frames))
    return seqs


class TestFrameLoss:
    def test_uniform_two_languages_is_ln2(self):
        loss = frame_loss(np.zeros((7, 2)), None, (0, None), LossSpec((1.0, 0.0)))
        assert loss == pytest.approx(math.log(2), abs=1e-15)

    def test_confident_correct_logit_drives_loss_to_zero(self):
        logits = np.zeros((4, 3))
        logits[:, 1] = 50.0
        assert frame_loss(logits, None, (1, None), LossSpec((1.0, 0.0))) < 1e-20

    def test_sum_of_task_terms(self, rng):
        yl, ys = rng.standard_normal((5, 2)), rng.standard_normal((5, 4))
        loss = frame_loss(yl, ys, (1, 3), LossSpec((1.0, 1.0)))
        expected = np.mean([_ce(list(r), 1) for r in yl]) + np.mean([_ce(list(r), 3) for r in ys])
        assert loss == pytest.approx(expected, rel=1e-13)

    def test_weights_scale_terms(self, rng):
        yl, ys = rng.standard_normal((5, 2)), rng.standard_normal((5, 4))
        a = frame_loss(yl, ys, (0, 2), LossSpec((2.0, 0.5)))
        b = 2.0 * frame_loss(yl, None, (0, None), LossSpec((1.0, 0.0))) + \
            0.5 * frame_loss(None, ys, (None, 2), LossSpec((0.0, 1.0)))
        assert a == pytest.approx(b, rel=1e-14)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            frame_loss(np.zeros((3, 2)), None, (2, None), LossSpec((1.0, 0.0)))

    def test_invalid_weights(self):
        with pytest.raises(ValidationError):
            LossSpec((0.0, 0.0))
        with pytest.raises(ValidationError):
            LossSpec((-1.0, 1.0))


class TestBackward:
    def test_disconnected_speaker_branch_gets_zero_gradient(self, rng):
        model = init_multitask(L_DIMS, S_DIMS, FeedbackRouting.parse("ifog/rp"), init_scale=0.5, seed=1,
                               cross_init_scale=0.0)
        _, grads = backward_sequence(model, rng.standard_normal((6, 3)), (1, 2), LossSpec((1.0, 0.0)))
        for k, v in grads.items():
            if k.startswith("s."):
                assert np.all(v == 0), k
        assert any(np.any(grads[k] != 0) for k in grads if k.startswith("l."))

    def test_feedback_path_reaches_speaker_branch(self, rng):
        model = init_multitask(L_DIMS, S_DIMS, FeedbackRouting.parse("g/rp"), init_scale=0.5, seed=1,
                               cross_init_scale=0.5)
        X = rng.standard_normal((6, 1, 3))
        batch = Batch(X, np.ones((6, 1)), np.array([1]), np.array([2]))
        spec = LossSpec((1.0, 0.0))
        _, analytic = loss_and_grads(model, batch, spec)
        numeric = numeric_grads(model, batch, spec)
        for k in ("s.W_ix", "s.W_rm", "s.W_pm"):
            assert np.abs(numeric[k]).max() > 1e-6
            assert relative_error(analytic[k], numeric[k]).max() < 1e-4
        # the speaker output layer is still disconnected from the language loss
        assert np.all(analytic["s.W_yr"] == 0) and np.all(analytic["s.b_y"] == 0)

    def test_tiny_model_matches_finite_differences(self):
        dims = dict(input=3, cell=5, rproj=3, pproj=3, n_languages=2, n_speakers=3)
        report = gradcheck(dims, FeedbackRouting.parse("ifog/rp"), T=7, seed=0)
        assert report.passed(1e-4), report.format()
        assert {"W_ls_ir", "W_sl_cp", "l.W_ic", "s.W_yp"} <= set(report.block_errors)

    @pytest.mark.parametrize("task", ["lre", "sre"])
    def test_single_task_matches_finite_differences(self, task, rng):
        P = init_params(L_DIMS if task == "lre" else S_DIMS, 0.5, 3)
        X = rng.standard_normal((5, 2, 3))
        batch = Batch(X, np.ones((5, 2)), np.array([0, 1]), np.array([2, 0]))
        spec = LossSpec((1.0, 1.0))
        _, analytic = loss_and_grads(P, batch, spec, task)
        numeric = numeric_grads(P, batch, spec, task)
        for k in analytic:
            assert relative_error(analytic[k], numeric[k]).max() < 1e-4, k

    def test_uncoupled_equals_two_single_task_gradients(self, rng):
        model = init_multitask(L_DIMS, S_DIMS, FeedbackRouting.none(), init_scale=0.5, seed=2)
        X = rng.standard_normal((5, 2, 3))
        batch = Batch(X, np.ones((5, 2)), np.array([0, 1]), np.array([2, 0]))
        loss, grads = loss_and_grads(model, batch)
        loss_l, gl = loss_and_grads(model.lre, batch, LossSpec(), "lre")
        loss_s, gs = loss_and_grads(model.sre, batch, LossSpec(), "sre")
        assert loss == pytest.approx(loss_l + loss_s, rel=1e-14)
        for k, v in gl.items():
            np.testing.assert_allclose(grads[f"l.{k}"], v, rtol=1e-13, atol=1e-16)
        for k, v in gs.items():
            np.testing.assert_allclose(grads[f"s.{k}"], v, rtol=1e-13, atol=1e-16)

    def test_padding_frames_do_not_contribute(self, rng):
        model = init_multitask(L_DIMS, S_DIMS, FeedbackRouting.parse("g/rp"), init_scale=0.5, seed=2)
        X = rng.standard_normal((6, 2, 3))
        mask = np.ones((6, 2))
        mask[4:, 1] = 0.0
        a = Batch(X, mask, np.array([0, 1]), np.array([2, 0]))
        Y = X.copy()
        Y[4:, 1] = 100.0 * rng.standard_normal((2, 3))
        b = Batch(Y, mask, a.lang, a.spk)
        (la, ga), (lb, gb) = loss_and_grads(model, a), loss_and_grads(model, b)
        assert la == lb
        for k in ga:
            np.testing.assert_allclose(ga[k], gb[k], rtol=1e-12, atol=1e-15)

    def test_non_finite_gradient_reports_block(self, rng):
        model = init_multitask(L_DIMS, S_DIMS, FeedbackRouting.parse("g/rp"), init_scale=0.5, seed=2)
        branches, traces = [model.lre, model.sre], list(training.mt_run(model, rng.standard_normal((3, 1, 3))))
        dys = [np.full_like(traces[0].y, np.nan), np.zeros_like(traces[1].y)]
        with pytest.raises(NumericError) as info:
            training._backward(branches, traces, np.zeros((3, 1, 3)), dys, model.cross, model.routing)
        assert info.value.block is not None


class TestGradcheck:
    def test_none_routing_passes(self):
        report = gradcheck(routing=None, seed=1)
        assert report.passed() and not any(k.startswith("W_") for k in report.block_errors)

    def test_size_limit(self):
        with pytest.raises(ValidationError):
            gradcheck(dict(cell=17))

    def test_relative_error_floor(self):
        assert relative_error(np.array([1e-9]), np.array([0.0]))[0] == pytest.approx(1e-3)
        assert relative_error(np.array([2.0]), np.array([1.0]))[0] == pytest.approx(0.5)


class TestOptimizer:
    def test_plain_step(self):
        spec = OptimizerSpec(learning_rate=1.0, momentum=0.0)
        p, _ = sgd_step({"w": np.array([1.0, 2.0])}, {"w": np.array([0.5, -1.0])}, None, spec)
        np.testing.assert_array_equal(p["w"], [0.5, 3.0])

    def test_zero_grad_leaves_params(self):
        spec = OptimizerSpec(learning_rate=0.3, momentum=0.9)
        p, _ = sgd_step({"w": np.array([1.0, 2.0])}, {"w": np.zeros(2)}, None, spec)
        np.testing.assert_array_equal(p["w"], [1.0, 2.0])

    def test_two_momentum_steps_by_hand(self):
        spec = OptimizerSpec(learning_rate=0.1, momentum=0.9)
        g1, g2 = np.array([1.0, -2.0]), np.array([0.5, 0.5])
        p, v = sgd_step({"w": np.zeros(2)}, {"w": g1}, None, spec)
        p, v = sgd_step(p, {"w": g2}, v, spec)
        v1 = -0.1 * g1
        v2 = 0.9 * v1 - 0.1 * g2
        np.testing.assert_allclose(p["w"], v1 + v2, rtol=1e-15)
        np.testing.assert_allclose(v["w"], v2, rtol=1e-15)

    def test_clip_by_global_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped = clip_by_global_norm(grads, 1.0)
        assert global_norm(clipped) == pytest.approx(1.0)
        np.testing.assert_allclose(clipped["a"] / clipped["b"], 0.75)
        assert clip_by_global_norm(grads, 10.0) is grads

    @pytest.mark.parametrize("change", [{"learning_rate": -1.0}, {"momentum": 1.0}, {"batch_size": 0},
                                        {"epochs": -1}])
    def test_invalid_spec(self, change):
        with pytest.raises(ValidationError):
            OptimizerSpec(**change)


class TestTrain:
    def test_zero_learning_rate_leaves_model_and_flat_trace(self):
        corpus = _toy_corpus()
        P = init_params(dict(L_DIMS), 0.3, 0)
        res = train(P, corpus, LossSpec((1.0, 0.0)), OptimizerSpec(learning_rate=0.0, epochs=2, batch_size=4),
                    "full", "lre")
        for k, v in P.arrays().items():
            assert np.array_equal(v, res.model.arrays()[k])
        assert res.losses[0] == pytest.approx(res.losses[1], rel=1e-12)

    def test_loss_decreases(self):
        corpus = _toy_corpus()
        model = init_multitask(L_DIMS, S_DIMS, FeedbackRouting.parse("g/rp"), init_scale=0.3, seed=0)
        res = train(model, corpus, LossSpec(), OptimizerSpec(learning_rate=0.2, epochs=6, batch_size=4), "full")
        assert res.losses[-1] < res.losses[0]

    def test_deterministic(self):
        corpus = _toy_corpus()
        spec = OptimizerSpec(learning_rate=0.2, epochs=2, batch_size=5, seed=3)

        def once():
            model = init_multitask(L_DIMS, S_DIMS, FeedbackRouting.parse("o/r"), init_scale=0.3, seed=0)
            return train(model, corpus, LossSpec(), spec, "cropped", crop_frames=8)

        from collablstm.multitask import dumps_model
        assert dumps_model(once().model) == dumps_model(once().model)

    def test_empty_corpus(self):
        with pytest.raises(ValidationError):
            train(init_params(L_DIMS, 0.1, 0), [], task="lre")

    def test_label_mismatch(self):
        corpus = _toy_corpus()
        with pytest.raises(ValidationError):
            train(init_params(dict(L_DIMS, out=3), 0.1, 0), corpus, task="lre")

    def test_single_task_needs_task(self):
        with pytest.raises(ValidationError):
            train(init_params(L_DIMS, 0.1, 0), _toy_corpus())

    def test_loss_trace_file(self, tmp_path):
        training.write_loss_trace(tmp_path / "loss.tsv", [0.75, 0.5])
        assert (tmp_path / "loss.tsv").read_text() == "epoch\tloss\n0\t0.75\n1\t0.5\n"
