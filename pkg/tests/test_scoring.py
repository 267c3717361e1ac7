import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collablstm.errors import ValidationError
from collablstm.lstmp import init_params
from collablstm.metrics import compute_eer
from collablstm.multitask import FeedbackRouting, init_multitask
from collablstm.scoring import (cosine_matrix, cosine_score, decide, lda_train, read_lre_decisions,
                                read_sre_scores, softmax_language_id, softmax_posteriors, svm_train,
                                write_lre_decisions, write_sre_scores)

finite = st.floats(-10, 10, allow_nan=False)


def _separable(rng, n=40):
    a = rng.standard_normal((n, 2)) * 0.3 + [2.0, 1.0]
    b = rng.standard_normal((n, 2)) * 0.3 + [-2.0, -1.0]
    return np.vstack([a, b]), ["pos"] * n + ["neg"] * n


class TestCosine:
    def test_identity(self):
        assert cosine_score([1.0, 2.0, -3.0], [1.0, 2.0, -3.0]) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_score([1.0, 0.0], [0.0, 5.0]) == 0.0

    def test_diagonal(self):
        assert cosine_score([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0 / math.sqrt(2.0), rel=1e-15)

    def test_zero_norm(self):
        with pytest.raises(ValidationError):
            cosine_score([0.0, 0.0], [1.0, 0.0])

    @given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3),
           st.floats(0.01, 100), st.floats(0.01, 100))
    @settings(max_examples=100)
    def test_scale_invariance(self, a, b, alpha, beta):
        a, b = np.array(a), np.array(b)
        if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
            return
        s = cosine_score(a, b)
        assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12
        assert cosine_score(alpha * a, beta * b) == pytest.approx(s, abs=1e-12)

    def test_matrix_matches_pairwise(self, rng):
        A, B = rng.standard_normal((3, 4)), rng.standard_normal((5, 4))
        M = cosine_matrix(A, B)
        for i in range(3):
            for j in range(5):
                assert M[i, j] == pytest.approx(cosine_score(A[i], B[j]), rel=1e-13)


class TestLda:
    def test_aligns_with_separating_axis(self, rng):
        n = 50
        a = np.column_stack([rng.normal(3.0, 0.5, n), rng.normal(0.0, 2.0, n)])
        b = np.column_stack([rng.normal(-3.0, 0.5, n), rng.normal(0.0, 2.0, n)])
        model = lda_train(np.vstack([a, b]), ["a"] * n + ["b"] * n, target_dim=1)
        direction = model.projection[0] / np.linalg.norm(model.projection[0])
        assert abs(direction[0]) == pytest.approx(1.0, abs=0.02)
        pa, pb = model.project(a)[:, 0], model.project(b)[:, 0]
        assert min(pa.min(), pb.min()) < 0 < max(pa.max(), pb.max())
        assert pa.max() < pb.min() or pb.max() < pa.min()

    def test_default_dim_is_classes_minus_one(self, rng):
        X = rng.standard_normal((30, 5))
        labels = [k % 3 for k in range(30)]
        model = lda_train(X, labels)
        assert model.projection.shape == (2, 5)
        assert model.class_means_projected.shape == (3, 2)

    def test_singular_within_class_scatter_handled(self, rng):
        X = np.column_stack([rng.standard_normal(20), np.zeros(20), np.zeros(20)])
        X[10:, 0] += 5.0
        model = lda_train(X, [0] * 10 + [1] * 10)
        assert np.all(np.isfinite(model.projection))

    def test_identical_distributions_give_chance_eer(self, rng):
        X = rng.standard_normal((2000, 3))
        labels = rng.integers(0, 2, 2000)
        model = lda_train(X, labels, target_dim=1)
        scores = model.project(X)[:, 0]
        eer, _ = compute_eer(scores, labels == 1)
        assert abs(eer - 0.5) < 0.06

    def test_orthonormalized_projection_is_idempotent(self, rng):
        X = rng.standard_normal((40, 6))
        labels = [k % 4 for k in range(40)]
        model = lda_train(X, labels, target_dim=3, orthonormalize=True)
        P = model.projection
        np.testing.assert_allclose(P @ P.T, np.eye(3), atol=1e-12)
        x = rng.standard_normal(6)
        proj = P.T @ (P @ x)
        np.testing.assert_allclose(P.T @ (P @ proj), proj, atol=1e-12)

    def test_affine_map_preserves_separability_ordering(self, rng):
        n = 30
        centers = {"a": [0.0, 0.0], "b": [4.0, 1.0], "c": [1.0, 6.0]}
        X = np.vstack([rng.standard_normal((n, 2)) * 0.5 + c for c in centers.values()])
        labels = [k for k in centers for _ in range(n)]
        A, shift = np.array([[2.0, 0.5], [-1.0, 3.0]]), np.array([10.0, -4.0])

        def ranking(Z):
            m = lda_train(Z, labels)
            proj = m.project(Z)
            means = {k: proj[np.array(labels) == k].mean(axis=0) for k in centers}
            pairs = [("a", "b"), ("a", "c"), ("b", "c")]
            return np.argsort([np.linalg.norm(means[p] - means[q]) for p, q in pairs])

        np.testing.assert_array_equal(ranking(X), ranking(X @ A.T + shift))

    def test_degenerate_inputs_rejected(self, rng):
        with pytest.raises(ValidationError):
            lda_train(rng.standard_normal((5, 2)), [0] * 5)
        with pytest.raises(ValidationError):
            lda_train(rng.standard_normal((3, 2)), [0, 0, 1])
        with pytest.raises(ValidationError):
            lda_train(rng.standard_normal((6, 2)), [0, 0, 0, 1, 1, 1], target_dim=3)


class TestSvm:
    def test_separable_training_accuracy(self, rng):
        X, y = _separable(rng)
        model = svm_train(X, y, lam=1e-2, epochs=30, seed=0)
        assert model.predict(X) == y
        assert model.classes == ("neg", "pos")

    def test_flipped_labels_negate_decisions(self, rng):
        X, y = _separable(rng)
        flipped = ["pos" if v == "neg" else "neg" for v in y]
        a = svm_train(X, y, lam=1e-2, epochs=20, seed=1)
        b = svm_train(X, flipped, lam=1e-2, epochs=20, seed=1)
        np.testing.assert_allclose(b.decision(X), -a.decision(X), rtol=1e-12, atol=1e-12)
        assert np.all(np.sign(b.decision(X)) == -np.sign(a.decision(X)))

    def test_large_lambda_shrinks_weights(self, rng):
        X, y = _separable(rng)
        small = svm_train(X, y, lam=1e-3, epochs=20)
        large = svm_train(X, y, lam=10.0, epochs=20)
        assert np.linalg.norm(large.weights) < np.linalg.norm(small.weights)

    def test_deterministic(self, rng):
        X, y = _separable(rng)
        a, b = svm_train(X, y, seed=4), svm_train(X, y, seed=4)
        assert np.array_equal(a.weights, b.weights) and a.bias == b.bias

    def test_decision_is_affine(self, rng):
        X, y = _separable(rng)
        m = svm_train(X, y)
        u, v = rng.standard_normal(2), rng.standard_normal(2)
        for t in (0.0, 0.3, 1.7):
            assert m.decision(t * u + (1 - t) * v) == pytest.approx(t * m.decision(u) + (1 - t) * m.decision(v))

    def test_single_class_rejected(self, rng):
        with pytest.raises(ValidationError):
            svm_train(rng.standard_normal((4, 2)), ["a"] * 4)


class TestSoftmax:
    def test_uniform_logits_tie_goes_to_first_label(self, rng):
        P = init_params(dict(input=3, cell=2, rproj=1, pproj=1, out=2), 0.0, 0)
        label, post = softmax_language_id(P, rng.standard_normal((5, 3)), ["lang0", "lang1"])
        np.testing.assert_array_equal(post, [0.5, 0.5])
        assert label == "lang0"

    def test_frame_average(self):
        assert decide(np.mean([[0.9, 0.1], [0.5, 0.5]], axis=0), ["a", "b"]) == "a"
        np.testing.assert_allclose(np.mean([[0.9, 0.1], [0.5, 0.5]], axis=0), [0.7, 0.3])

    def test_averaged_frame_posteriors(self, rng):
        model = init_multitask(dict(input=3, cell=3, rproj=2, pproj=2, out=2),
                               dict(input=3, cell=3, rproj=2, pproj=2, out=3), init_scale=1.0, seed=2,
                               languages=("x", "y"))
        X = rng.standard_normal((4, 3))
        from collablstm.multitask import mt_run
        y = mt_run(model, X)[0].y
        frame_post = np.exp(y) / np.exp(y).sum(axis=1, keepdims=True)
        label, post = softmax_language_id(model, X)
        np.testing.assert_allclose(post, frame_post.mean(axis=0), rtol=1e-13)
        assert label == ("x", "y")[int(np.argmax(post))]

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_posteriors_sum_to_one(self, seed):
        r = np.random.default_rng(seed)
        P = init_params(dict(input=3, cell=3, rproj=2, pproj=2, out=4), 2.0, seed)
        post = softmax_posteriors(P, [r.standard_normal((int(r.integers(1, 8)), 3)) for _ in range(3)])
        assert np.all(post >= 0)
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-12)

    def test_empty_sequence(self):
        P = init_params(dict(input=3, cell=2, rproj=1, pproj=1, out=2), 0.1, 0)
        with pytest.raises(ValidationError):
            softmax_language_id(P, np.zeros((0, 3)))


class TestScoreFiles:
    def test_sre_round_trip(self, tmp_path):
        rows = [("spk1", "u1", 0.25, True), ("spk2", "u1", -1.0 / 3.0, False)]
        write_sre_scores(tmp_path / "s.tsv", rows)
        assert (tmp_path / "s.tsv").read_text().splitlines()[0] == "spk1\tu1\t0.25\t1"
        assert read_sre_scores(tmp_path / "s.tsv") == rows

    def test_lre_round_trip(self, tmp_path):
        rows = [("u1", "lang0", "lang1"), ("u2", "lang1", "lang1")]
        write_lre_decisions(tmp_path / "d.tsv", rows)
        assert read_lre_decisions(tmp_path / "d.tsv") == rows
