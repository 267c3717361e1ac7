"""Back-ends over r-vectors: cosine, Fisher LDA, linear SVM, softmax language ID."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.special import softmax

from .embedding import branch_traces
from .errors import ArchiveFormatError, ValidationError


def _vals(v):
    return np.asarray(getattr(v, "values", v), dtype=np.float64)


def cosine_score(a, b) -> float:
    a, b = _vals(a), _vals(b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cosine score of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def cosine_matrix(A, B) -> np.ndarray:
    """All pairwise cosine scores between rows of ``A`` and rows of ``B``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    na = np.linalg.norm(A, axis=1, keepdims=True)
    nb = np.linalg.norm(B, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValidationError("cosine score of a zero-norm vector")
    return (A / na) @ (B / nb).T


# --- LDA -----------------------------------------------------------------------

@dataclass(eq=False)
class LdaModel:
    projection: np.ndarray          # (k, d)
    mean: np.ndarray                # (d,) training mean, removed before projecting
    classes: tuple
    class_means_projected: np.ndarray  # (n_classes, k)

    def project(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean) @ self.projection.T


def lda_train(X, labels, target_dim: int | None = None, orthonormalize: bool = False) -> LdaModel:
    """Fisher LDA: leading generalized eigenvectors of ``(S_b, S_w + eps I)``.

    ``eps = 1e-6 * trace(S_w) / d``.  ``target_dim`` defaults to
    ``min(d, n_classes - 1)``.
    """
    X = np.asarray([_vals(x) for x in X], dtype=np.float64)
    labels = np.asarray(labels)
    classes = tuple(dict.fromkeys(labels.tolist()))
    if len(classes) < 2:
        raise ValidationError("LDA needs at least two classes")
    n, d = X.shape
    mean = X.mean(axis=0)
    Sw = np.zeros((d, d))
    Sb = np.zeros((d, d))
    for c in classes:
        Xc = X[labels == c]
        if len(Xc) < 2:
            raise ValidationError(f"LDA class {c!r} has fewer than two samples")
        mc = Xc.mean(axis=0)
        centered = Xc - mc
        Sw += centered.T @ centered
        diff = (mc - mean)[:, None]
        Sb += len(Xc) * (diff @ diff.T)
    k = min(d, len(classes) - 1) if target_dim is None else int(target_dim)
    if not 1 <= k <= d:
        raise ValidationError(f"target_dim must lie in [1, {d}], got {k}")
    eps = 1e-6 * np.trace(Sw) / d
    if eps <= 0:
        eps = 1e-12
    evals, evecs = eigh(Sb, Sw + eps * np.eye(d))
    order = np.argsort(evals)[::-1][:k]
    P = evecs[:, order].T
    if orthonormalize:
        q, _ = np.linalg.qr(P.T)
        P = q.T
    model = LdaModel(P, mean, classes, np.zeros((len(classes), k)))
    model.class_means_projected = np.stack([model.project(X[labels == c]).mean(axis=0) for c in classes])
    return model


# --- linear SVM ---------------------------------------------------------------------

@dataclass(eq=False)
class SvmModel:
    weights: np.ndarray
    bias: float
    classes: tuple   # (negative, positive)

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def predict(self, X) -> list:
        dv = self.decision(np.atleast_2d(X))
        return [self.classes[1] if v > 0 else self.classes[0] for v in dv]


def svm_train(X, labels, lam: float = 1e-3, epochs: int = 20, seed: int = 0, classes=None) -> SvmModel:
    """Pegasos: stochastic sub-gradient descent on the primal hinge loss.

    The bias is learned as the weight of a constant input, so it is
    regularised together with ``w``.  Iterates are projected onto the ball of
    radius ``1/sqrt(lam)``.  ``classes[1]`` is the positive class (sorted
    order by default).
    """
    X = np.asarray([_vals(x) for x in X], dtype=np.float64)
    labels = list(labels)
    classes = tuple(sorted(set(labels))) if classes is None else tuple(classes)
    if len(classes) != 2 or len(set(labels)) != 2:
        raise ValidationError("SVM training needs exactly two classes, both present")
    if lam <= 0:
        raise ValidationError("lam must be > 0")
    y = np.array([1.0 if lab == classes[1] else -1.0 for lab in labels])
    Z = np.hstack([X, np.ones((len(X), 1))])
    w = np.zeros(Z.shape[1])
    radius = 1.0 / np.sqrt(lam)
    rng = np.random.default_rng(seed)
    t = 0
    for _ in range(epochs):
        for k in rng.permutation(len(Z)):
            t += 1
            eta = 1.0 / (lam * t)
            margin = y[k] * (Z[k] @ w)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * y[k] * Z[k]
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
    return SvmModel(w[:-1].copy(), float(w[-1]), classes)


# --- softmax language identification -------------------------------------------------

def _posteriors(trace, mask):
    post = softmax(trace.y, axis=-1)
    return (post * mask[..., None]).sum(axis=0) / mask.sum(axis=0)[:, None]


def softmax_posteriors(model, seqs, batch_size: int = 64) -> np.ndarray:
    """Frame-averaged language posteriors, one row per utterance."""
    rows = []
    for _, trace, mask in branch_traces(model, list(seqs), "lre", batch_size):
        rows.append(_posteriors(trace, mask))
    return np.concatenate(rows)


def decide(posterior, languages):
    """Argmax with ties going to the earliest label."""
    return languages[int(np.argmax(posterior))]


def softmax_language_id(model, seq, languages=None):
    """``(label, posterior)`` from the language branch's averaged frame softmax."""
    frames = np.asarray(getattr(seq, "frames", seq), dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValidationError("cannot identify the language of an empty sequence")
    if languages is None:
        languages = list(getattr(model, "languages", ())) or None
    post = softmax_posteriors(model, [frames])[0]
    labels = languages if languages is not None else list(range(len(post)))
    return decide(post, labels), post


# --- score files ---------------------------------------------------------------------

def write_sre_scores(path, rows):
    """``rows`` of ``(enroll_id, test_utt_id, score, is_target)``."""
    with open(path, "w", encoding="utf-8") as fh:
        for enroll_id, utt, score, target in rows:
            fh.write(f"{enroll_id}\t{utt}\t{float(score)!r}\t{int(bool(target))}\n")


def read_sre_scores(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4 or parts[3] not in ("0", "1"):
                raise ArchiveFormatError("expected enroll_id<TAB>test_utt_id<TAB>score<TAB>target{0,1}",
                                         path, lineno)
            rows.append((parts[0], parts[1], float(parts[2]), parts[3] == "1"))
    return rows


def write_lre_decisions(path, rows):
    """``rows`` of ``(test_utt_id, predicted, true)``."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt, pred, true in rows:
            fh.write(f"{utt}\t{pred}\t{true}\n")


def read_lre_decisions(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ArchiveFormatError("expected test_utt_id<TAB>predicted<TAB>true", path, lineno)
            rows.append(tuple(parts))
    return rows
