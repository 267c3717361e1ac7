"""Frame-level cross-entropy, BPTT, SGD with momentum and gradient checking.

Models are either a single :class:`~collablstm.lstmp.LstmpParams` (one task,
chosen by ``task='lre'`` or ``task='sre'``) or a
:class:`~collablstm.multitask.MultiTaskModel`.  Gradients are dicts keyed like
the model's ``arrays()``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax

from . import lstmp
from .errors import NumericError, ValidationError
from .features import FeatureSequence, crop_short
from .lstmp import LstmpParams
from .multitask import DIRECTIONS, MultiTaskModel, cross_name, mt_run

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossSpec:
    task_weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        wl, ws = self.task_weights
        if wl < 0 or ws < 0 or wl + ws <= 0:
            raise ValidationError(f"task weights must be >= 0 with a positive sum, got {self.task_weights}")


@dataclass(frozen=True)
class OptimizerSpec:
    learning_rate: float = 0.2
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    lr_decay: float = 0.85
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_decay <= 0:
            raise ValidationError("lr_decay must be > 0")


@dataclass
class GradReport:
    block_errors: dict = field(default_factory=dict)
    max_error: float = 0.0
    n_checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol

    def format(self) -> str:
        width = max((len(k) for k in self.block_errors), default=5)
        lines = [f"{k:<{width}}  {v:.3e}" for k, v in self.block_errors.items()]
        lines.append(f"{'max':<{width}}  {self.max_error:.3e}  ({self.n_checked} entries)")
        return "\n".join(lines)


# --- model plumbing ----------------------------------------------------------

def model_arrays(model) -> dict:
    return model.arrays()


def with_arrays(model, arrays: dict):
    if isinstance(model, MultiTaskModel):
        return MultiTaskModel.from_arrays(arrays, model.routing, model.languages, model.speakers)
    return LstmpParams(**arrays)


def _task_for(model, task):
    if isinstance(model, MultiTaskModel):
        return None
    if task not in ("lre", "sre"):
        raise ValidationError("single-task models need task='lre' or task='sre'")
    return task


# --- loss --------------------------------------------------------------------

def _ce_and_grad(logits, labels, mask):
    """Mean cross-entropy over masked frames and its logits gradient."""
    T, B, n = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= n:
        raise ValidationError(f"label index out of range for {n} classes")
    logp = log_softmax(logits, axis=-1)
    count = mask.sum()
    nll = -np.take_along_axis(logp, np.broadcast_to(labels[None, :, None], (T, B, 1)), axis=-1)[..., 0]
    loss = float((nll * mask).sum() / count)
    grad = np.exp(logp)
    grad[np.arange(T)[:, None], np.arange(B)[None, :], labels[None, :]] -= 1.0
    grad *= (mask / count)[..., None]
    return loss, grad


def _as_batch(logits, labels, mask):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 2:
        logits = logits[:, None, :]
        labels = np.atleast_1d(labels)
        mask = None if mask is None else np.asarray(mask, dtype=np.float64)[:, None]
    if mask is None:
        mask = np.ones(logits.shape[:2])
    return logits, np.asarray(labels, dtype=np.int64), mask


def frame_loss(logits_l, logits_s, labels, loss_spec: LossSpec = LossSpec(), mask=None) -> float:
    """``w_l * CE(lre) + w_s * CE(sre)``, each averaged over frames.

    ``logits_*`` are ``(T, n)`` or ``(T, B, n)`` (either may be ``None``);
    ``labels`` is ``(language_index, speaker_index)`` with scalars or
    length-``B`` arrays.
    """
    total = 0.0
    for logits, lab, w in zip((logits_l, logits_s), labels, loss_spec.task_weights):
        if logits is None or w == 0:
            continue
        lg, lb, mk = _as_batch(logits, lab, mask)
        total += w * _ce_and_grad(lg, lb, mk)[0]
    return total


# --- batches ------------------------------------------------------------------

@dataclass
class Batch:
    X: np.ndarray       # (T, B, D), zero padded
    mask: np.ndarray    # (T, B)
    lang: np.ndarray    # (B,)
    spk: np.ndarray     # (B,)


def make_batch(seqs, lang_index: dict, spk_index: dict | None) -> Batch:
    T = max(s.num_frames for s in seqs)
    D = seqs[0].dim
    X = np.zeros((T, len(seqs), D))
    mask = np.zeros((T, len(seqs)))
    for b, s in enumerate(seqs):
        X[:s.num_frames, b] = s.frames
        mask[:s.num_frames, b] = 1.0
    lang = np.array([lang_index[s.language] for s in seqs])
    spk = np.array([spk_index[s.speaker] for s in seqs]) if spk_index else np.zeros(len(seqs), dtype=int)
    return Batch(X, mask, lang, spk)


# --- forward + backward -------------------------------------------------------

def _shift(a):
    """Previous-step values: ``out[t] = a[t-1]``, zeros at ``t = 0``."""
    out = np.zeros_like(a)
    out[1:] = a[:-1]
    return out


def _flat(a):
    return a.reshape(-1, a.shape[-1])


def _backward(branches, traces, X, dys, cross, routing):
    """BPTT through one or two coupled branches.

    ``dys[b]`` is dLoss/dy for branch ``b`` with shape ``(T, B, out)``.
    Returns ``(branch_grads, cross_grads)``.
    """
    nb = len(branches)
    T, B = X.shape[:2]
    sinks = routing.ordered_sinks() if routing is not None and nb == 2 else []
    sources = routing.ordered_sources() if sinks else []
    gate = {k: j for j, k in enumerate("ifgo")}

    # recurrent weights stacked as (4 * cell, rproj), gate order i, f, g, o
    W_rec = [np.ascontiguousarray(np.concatenate([getattr(p, w) for w in lstmp.RECURRENT_WEIGHTS]))
             for p in branches]
    # output-layer contributions to dr and dp do not depend on the recursion
    drs = [dys[b] @ branches[b].W_yr for b in range(nb)]
    dps = [dys[b] @ branches[b].W_yp for b in range(nb)]
    das = [np.zeros(traces[b].a_i.shape[:-1] + (4 * branches[b].dims["cell"],)) for b in range(nb)]
    carry_c = [np.zeros((B, p.dims["cell"])) for p in branches]
    carry_r = [np.zeros((B, p.dims["rproj"])) for p in branches]
    carry_p = [np.zeros((B, p.dims["pproj"])) for p in branches]
    c_prev = [_shift(tr.c) for tr in traces]

    for t in range(T - 1, -1, -1):
        for b in range(nb):
            p, tr, n = branches[b], traces[b], branches[b].dims["cell"]
            drs[b][t] += carry_r[b]
            dps[b][t] += carry_p[b]
            dm = drs[b][t] @ p.W_rm + dps[b][t] @ p.W_pm
            o, h, i, g, f = tr.o[t], tr.h[t], tr.i[t], tr.g[t], tr.f[t]
            d = das[b][t]
            da_o = d[:, 3 * n:]
            np.multiply(dm * h, o * (1.0 - o), out=da_o)
            dc = carry_c[b] + dm * o * (1.0 - h * h) + da_o * p.W_oc
            np.multiply(dc * g, i * (1.0 - i), out=d[:, :n])
            np.multiply(dc * c_prev[b][t], f * (1.0 - f), out=d[:, n:2 * n])
            np.multiply(dc * i, 1.0 - g * g, out=d[:, 2 * n:3 * n])
            carry_c[b] = dc * f + d[:, :n] * p.W_ic + d[:, n:2 * n] * p.W_fc
        for b in range(nb):
            carry_r[b] = das[b][t] @ W_rec[b]
            carry_p[b] = np.zeros_like(carry_p[b])
        for b in range(nb if sinks else 0):
            other, direction, n = 1 - b, DIRECTIONS[b], branches[b].dims["cell"]
            for k in sinks:
                da_k = das[b][t][:, gate[k] * n:(gate[k] + 1) * n]
                for q in sources:
                    w = cross[cross_name(direction, k, q)]
                    if q == "r":
                        carry_r[other] = carry_r[other] + da_k @ w
                    else:
                        carry_p[other] = carry_p[other] + da_k @ w

    Xf = _flat(X)
    grads = []
    for b in range(nb):
        tr, n = traces[b], branches[b].dims["cell"]
        da = _flat(das[b])
        r_prev = _flat(_shift(tr.r))
        cp = _flat(c_prev[b])
        m = _flat(tr.m)
        dy = _flat(dys[b])
        gx, gr, gb = da.T @ Xf, da.T @ r_prev, da.sum(axis=0)
        g = {}
        for j, (wx, wr, bias) in enumerate(zip(lstmp.INPUT_WEIGHTS, lstmp.RECURRENT_WEIGHTS, lstmp.GATE_BIASES)):
            g[wx], g[wr], g[bias] = gx[j * n:(j + 1) * n], gr[j * n:(j + 1) * n], gb[j * n:(j + 1) * n]
        g["W_ic"] = (da[:, :n] * cp).sum(axis=0)
        g["W_fc"] = (da[:, n:2 * n] * cp).sum(axis=0)
        g["W_oc"] = (da[:, 3 * n:] * _flat(tr.c)).sum(axis=0)
        g["W_rm"] = _flat(drs[b]).T @ m
        g["W_pm"] = _flat(dps[b]).T @ m
        g["W_yr"] = dy.T @ _flat(tr.r)
        g["W_yp"] = dy.T @ _flat(tr.p)
        g["b_y"] = dy.sum(axis=0)
        grads.append({name: g[name] for name in branches[b].arrays()})
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                bad = ~np.isfinite(das[b]).reshape(T, -1).all(axis=1)
                bad_t = int(np.argmax(bad)) if bad.any() else None
                raise NumericError(f"non-finite gradient in block {name} (branch {b}, step {bad_t})",
                                   block=name, step=bad_t)
    cross_grads = {}
    for b in range(nb if sinks else 0):
        other, direction = 1 - b, DIRECTIONS[b]
        src = {"r": _flat(_shift(traces[other].r)), "p": _flat(_shift(traces[other].p))}
        n = branches[b].dims["cell"]
        for k in sinks:
            da_k = _flat(das[b][..., gate[k] * n:(gate[k] + 1) * n])
            for q in sources:
                name = cross_name(direction, k, q)
                cross_grads[name] = da_k.T @ src[q]
                if not np.all(np.isfinite(cross_grads[name])):
                    raise NumericError(f"non-finite gradient in block {name}", block=name)
    return grads, cross_grads


def loss_and_grads(model, batch: Batch, loss_spec: LossSpec = LossSpec(), task: str | None = None):
    """Total loss and gradients for one padded batch."""
    task = _task_for(model, task)
    wl, ws = loss_spec.task_weights
    if task is not None:
        trace = lstmp.run(model, batch.X)
        labels = batch.lang if task == "lre" else batch.spk
        weight = wl if task == "lre" else ws
        loss, dy = _ce_and_grad(trace.y, labels, batch.mask)
        grads, _ = _backward([model], [trace], batch.X, [weight * dy], {}, None)
        return weight * loss, grads[0]
    tl, ts = mt_run(model, batch.X)
    loss = 0.0
    dys = []
    for trace, labels, w in ((tl, batch.lang, wl), (ts, batch.spk, ws)):
        if w == 0:
            dys.append(np.zeros_like(trace.y))
            continue
        l, dy = _ce_and_grad(trace.y, labels, batch.mask)
        loss += w * l
        dys.append(w * dy)
    (gl, gs), gc = _backward([model.lre, model.sre], [tl, ts], batch.X, dys, model.cross, model.routing)
    grads = {f"l.{k}": v for k, v in gl.items()}
    grads.update({f"s.{k}": v for k, v in gs.items()})
    grads.update(gc)
    return loss, grads


def loss_only(model, batch: Batch, loss_spec: LossSpec = LossSpec(), task: str | None = None) -> float:
    task = _task_for(model, task)
    wl, ws = loss_spec.task_weights
    if task is not None:
        trace = lstmp.run(model, batch.X)
        labels, w = (batch.lang, wl) if task == "lre" else (batch.spk, ws)
        return w * _ce_and_grad(trace.y, labels, batch.mask)[0]
    tl, ts = mt_run(model, batch.X)
    return frame_loss(tl.y, ts.y, (batch.lang, batch.spk), loss_spec, batch.mask)


def backward_sequence(model, seq, labels, loss_spec: LossSpec = LossSpec(), task: str | None = None):
    """Loss and exact gradient for one utterance.

    ``seq`` is a :class:`FeatureSequence` or ``T x D`` matrix; ``labels`` is
    ``(language_index, speaker_index)``.  Returns ``(loss, grads)``.
    """
    frames = np.asarray(getattr(seq, "frames", seq), dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValidationError("expected a non-empty T x D sequence")
    batch = Batch(frames[:, None, :], np.ones((frames.shape[0], 1)),
                  np.array([labels[0]]), np.array([labels[1]]))
    return loss_and_grads(model, batch, loss_spec, task)


# --- optimizer ------------------------------------------------------------------

def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, threshold: float) -> dict:
    if not threshold or threshold <= 0:
        return grads
    norm = global_norm(grads)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    return {k: v * scale for k, v in grads.items()}


def sgd_step(params: dict, grads: dict, opt_state: dict | None, spec: OptimizerSpec, lr: float | None = None):
    """Classical momentum: ``v = momentum * v - lr * g``; ``theta += v``.

    Returns new ``(params, opt_state)``; inputs are not modified.
    """
    lr = spec.learning_rate if lr is None else lr
    velocity = {} if opt_state is None else opt_state
    new_params, new_velocity = {}, {}
    for name, value in params.items():
        v = -lr * grads[name]
        if name in velocity:
            v = spec.momentum * velocity[name] + v
        new_velocity[name] = v
        new_params[name] = value + v
    return new_params, new_velocity


# --- training loop -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    losses: list
    languages: list
    speakers: list


def label_tables(seqs, model=None):
    if isinstance(model, MultiTaskModel) and model.languages and model.speakers:
        return list(model.languages), list(model.speakers)
    languages = sorted({s.language for s in seqs})
    speakers = list(dict.fromkeys(s.speaker for s in seqs))
    return languages, speakers


def train(model, corpus, loss_spec: LossSpec = LossSpec(), optimizer_spec: OptimizerSpec = OptimizerSpec(),
          curriculum: str = "full", task: str | None = None, crop_frames: int = 100,
          languages=None, speakers=None) -> TrainResult:
    """Mini-batch SGD over ``corpus`` (a list of labelled :class:`FeatureSequence`).

    ``curriculum='cropped'`` trains each epoch on seeded random windows of
    ``crop_frames`` frames.  The returned ``losses`` hold the frame-weighted
    mean training loss per epoch, measured before each update.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValidationError("empty training corpus")
    if curriculum not in ("full", "cropped"):
        raise ValidationError(f"unknown curriculum {curriculum!r}")
    task = _task_for(model, task)
    default_l, default_s = label_tables(corpus, model)
    languages = list(languages) if languages is not None else default_l
    speakers = list(speakers) if speakers is not None else default_s
    lang_index = {l: k for k, l in enumerate(languages)}
    spk_index = {s: k for k, s in enumerate(speakers)}
    for s in corpus:
        if s.language not in lang_index or (task != "lre" and s.speaker not in spk_index):
            raise ValidationError(f"{s.utt_id}: label not covered by the model's output tables")
    if isinstance(model, MultiTaskModel):
        outs = (model.lre.dims["out"], model.sre.dims["out"])
        if outs != (len(languages), len(speakers)):
            raise ValidationError(f"model outputs {outs} do not match label tables "
                                  f"({len(languages)}, {len(speakers)})")
    else:
        want = len(languages) if task == "lre" else len(speakers)
        if model.dims["out"] != want:
            raise ValidationError(f"model has {model.dims['out']} outputs, label table has {want}")

    spec = optimizer_spec
    params = model.arrays()
    opt_state = None
    losses = []
    for epoch in range(spec.epochs):
        rng = np.random.default_rng([spec.seed, epoch])
        seqs = corpus
        if curriculum == "cropped":
            seqs = [crop_short(s, crop_frames, "seeded-random", seed=spec.seed * 100003 + epoch) for s in seqs]
        order = rng.permutation(len(seqs))
        lr = spec.learning_rate * spec.lr_decay ** epoch
        total, frames = 0.0, 0.0
        for start in range(0, len(order), spec.batch_size):
            batch = make_batch([seqs[k] for k in order[start:start + spec.batch_size]], lang_index, spk_index)
            current = with_arrays(model, params)
            loss, grads = loss_and_grads(current, batch, loss_spec, task)
            n = batch.mask.sum()
            total += loss * n
            frames += n
            grads = clip_by_global_norm(grads, spec.clip_norm)
            params, opt_state = sgd_step(params, grads, opt_state, spec, lr)
        losses.append(total / frames)
        log.info("epoch %d  lr %.4g  loss %.5f", epoch, lr, losses[-1])
    return TrainResult(with_arrays(model, params), losses, languages, speakers)


def write_loss_trace(path, losses):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\tloss\n")
        for k, v in enumerate(losses):
            fh.write(f"{k}\t{v!r}\n")


# --- gradient check ------------------------------------------------------------------

def numeric_grads(model, batch: Batch, loss_spec: LossSpec, task=None, eps: float = 1e-4) -> dict:
    """Central finite differences for every parameter entry."""
    work = with_arrays(model, {k: v.copy() for k, v in model.arrays().items()})
    out = {}
    for name, arr in work.arrays().items():
        g = np.zeros_like(arr)
        flat, target = g.reshape(-1), arr.reshape(-1)
        for idx in range(arr.size):
            orig = target[idx]
            target[idx] = orig + eps
            plus = loss_only(work, batch, loss_spec, task)
            target[idx] = orig - eps
            minus = loss_only(work, batch, loss_spec, task)
            target[idx] = orig
            flat[idx] = (plus - minus) / (2 * eps)
        out[name] = g
    return out


def relative_error(analytic, numeric, floor: float = 1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradcheck(dims: dict | None = None, routing=None, T: int = 6, seed: int = 0, eps: float = 1e-4,
              init_scale: float = 0.5, batch: int = 1, loss_spec: LossSpec = LossSpec()) -> GradReport:
    """Compare BPTT gradients of a random tiny collaborative model with central differences.

    ``dims`` keys: ``input, cell, rproj, pproj, n_languages, n_speakers``.
    ``routing=None`` or an empty routing checks two uncoupled branches.
    """
    from .multitask import FeedbackRouting, init_multitask

    d = dict(input=3, cell=4, rproj=2, pproj=2, n_languages=2, n_speakers=3)
    d.update(dims or {})
    if d["cell"] > 16:
        raise ValidationError("gradcheck is limited to cell <= 16")
    routing = FeedbackRouting.none() if routing is None else routing
    base = {k: d[k] for k in ("input", "cell", "rproj", "pproj")}
    model = init_multitask(dict(base, out=d["n_languages"]), dict(base, out=d["n_speakers"]),
                           routing, init_scale=init_scale, seed=seed)
    rng = np.random.default_rng([seed, 1])
    X = rng.standard_normal((T, batch, d["input"]))
    mask = np.ones((T, batch))
    lab = Batch(X, mask, rng.integers(0, d["n_languages"], batch), rng.integers(0, d["n_speakers"], batch))
    _, analytic = loss_and_grads(model, lab, loss_spec)
    numeric = numeric_grads(model, lab, loss_spec, eps=eps)
    report = GradReport()
    for name in analytic:
        err = float(relative_error(analytic[name], numeric[name]).max())
        report.block_errors[name] = err
        report.n_checked += analytic[name].size
    report.max_error = max(report.block_errors.values())
    return report
