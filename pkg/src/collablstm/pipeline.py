"""End-to-end systems: train, extract r-vectors, score with every back-end, evaluate.

A *system* is ``lre`` or ``sre`` (single-task baselines) or ``multitask``.
Multitask branches start from exactly the parameters the baselines start
from (same seeds) and the cross-task weights start at
``model.cross_init_scale`` (0 by default), so an untrained collaborative
model is identical to the pair of untrained baselines.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import lstmp, metrics
from .config import ExperimentConfig, dump_config
from .embedding import enroll, extract_rvectors, group_by, write_rvectors
from .features import crop_short, generate_corpus
from .errors import ValidationError
from .metrics import MetricReport, build_sre_trials, compute_eer, compute_idr
from .multitask import FeedbackRouting, MultiTaskModel, init_multitask, save_model
from .scoring import (cosine_matrix, lda_train, softmax_posteriors, svm_train, write_lre_decisions,
                      write_sre_scores)
from .training import LossSpec, TrainResult, train, write_loss_trace

log = logging.getLogger(__name__)

MODES = ("lre", "sre", "multitask")
CONDITIONS = ("full", "short")
SRE_BACKENDS = ("cosine", "lda")
LRE_BACKENDS = ("cosine", "svm", "softmax")
ABLATION_SINKS = ("i", "f", "o", "g", "ifog")


@dataclass
class Corpus:
    manifest: object
    seqs: list

    def split(self, name):
        return self.manifest.select(self.seqs, name)


def build_corpus(cfg: ExperimentConfig) -> Corpus:
    manifest, seqs = generate_corpus(cfg.synth)
    return Corpus(manifest, seqs)


def label_tables(corpus: Corpus):
    train_seqs = corpus.split("train")
    languages = sorted({s.language for s in corpus.seqs})
    speakers = list(dict.fromkeys(s.speaker for s in train_seqs))
    return languages, speakers


def _dims(cfg, out):
    m = cfg.model
    return dict(input=cfg.synth.dim, cell=m.cell, rproj=m.rproj, pproj=m.pproj, out=out)


def init_system(cfg: ExperimentConfig, mode: str, languages, speakers, routing: FeedbackRouting | None = None):
    if mode not in MODES:
        raise ValidationError(f"unknown mode {mode!r}")
    m = cfg.model
    lre0 = lstmp.init_params(_dims(cfg, len(languages)), m.init_scale, [m.seed, 1])
    sre0 = lstmp.init_params(_dims(cfg, len(speakers)), m.init_scale, [m.seed, 2])
    if mode == "lre":
        return lre0
    if mode == "sre":
        return sre0
    routing = cfg.feedback() if routing is None else routing
    return init_multitask(lre0.dims, sre0.dims, routing, m.init_scale, seed=m.seed,
                          warm_start=(lre0, sre0), cross_init_scale=m.cross_init_scale,
                          languages=languages, speakers=speakers)


def train_system(cfg: ExperimentConfig, mode: str, corpus: Corpus, routing=None) -> TrainResult:
    languages, speakers = label_tables(corpus)
    model = init_system(cfg, mode, languages, speakers, routing)
    task = None if mode == "multitask" else mode
    loss_spec = cfg.loss
    if task is not None:
        # single-task systems always train their own task at full weight
        loss_spec = LossSpec((1.0, 0.0) if task == "lre" else (0.0, 1.0))
    return train(model, corpus.split("train"), loss_spec, cfg.train, cfg.curriculum, task,
                 cfg.crop_frames, languages, speakers)


@dataclass
class EvalResult:
    reports: list = field(default_factory=list)
    sre_scores: dict = field(default_factory=dict)   # (condition, backend) -> rows
    lre_decisions: dict = field(default_factory=dict)
    rvectors: dict = field(default_factory=dict)     # (branch, split) -> list of RVector

    def get(self, task: str, condition: str, backend: str) -> MetricReport:
        for r in self.reports:
            if r.condition == condition and r.backend == backend and \
                    (r.eer is not None if task == "sre" else r.ide is not None):
                return r
        raise KeyError((task, condition, backend))


def test_sets(cfg: ExperimentConfig, corpus: Corpus) -> dict:
    """Test utterances per condition; only the test side is cropped for ``short``."""
    test = corpus.split("test")
    short = [crop_short(s, cfg.eval.short_frames, cfg.eval.short_offset, seed=cfg.synth.seed) for s in test]
    return {"full": test, "short": short}


def extract_sets(model, cfg: ExperimentConfig, corpus: Corpus, branch: str) -> dict:
    """r-vectors of one branch for ``train``, ``enroll``, ``test-full`` and ``test-short``."""
    sets = {split: extract_rvectors(model, corpus.split(split), branch) for split in ("train", "enroll")}
    for cond, tests in test_sets(cfg, corpus).items():
        sets[f"test-{cond}"] = extract_rvectors(model, tests, branch)
    return sets


def _mat(rvecs):
    return np.stack([v.values for v in rvecs])


def _lookup(manifest, rvecs, attr):
    table = {e.utt_id: getattr(e, attr) for e in manifest.entries}
    try:
        return [table[v.utt_id] for v in rvecs]
    except KeyError as exc:
        raise ValidationError(f"utterance {exc.args[0]!r} is not in the manifest") from None


def score_sre(backend: str, sets: dict, manifest, cfg: ExperimentConfig) -> dict:
    """Speaker trial rows ``(enroll_label, test_utt, score, is_target)`` per condition."""
    if backend not in SRE_BACKENDS:
        raise ValidationError(f"speaker scoring supports {SRE_BACKENDS}, not {backend!r}")
    en = sets["enroll"]
    groups = group_by(en, _lookup(manifest, en, "speaker"))
    labels = list(groups)
    if backend == "cosine":
        centroids = np.stack([m.centroid for m in enroll(groups)])
        embed = lambda Z: Z  # noqa: E731
    else:
        tr = sets["train"]
        lda = lda_train(_mat(tr), _lookup(manifest, tr, "speaker"), cfg.eval.lda_dim or None)
        centroids = np.stack([lda.project(_mat(groups[lab])).mean(axis=0) for lab in labels])
        embed = lda.project
    out = {}
    for cond in CONDITIONS:
        te = sets[f"test-{cond}"]
        trials = build_sre_trials(labels, zip([v.utt_id for v in te], _lookup(manifest, te, "speaker")))
        scores = cosine_matrix(centroids, embed(_mat(te)))
        out[cond] = [(labels[e], trials.test_ids[t], scores[e, t], trials.target[e, t])
                     for e in range(len(labels)) for t in range(len(te))]
    return out


def _svm_lre(cfg, X, labels, languages):
    e = cfg.eval
    if len(languages) == 2:
        svm = svm_train(X, labels, e.svm_lambda, e.svm_epochs, e.svm_seed, classes=tuple(languages))
        return lambda Z: svm.predict(Z)
    models = [svm_train(X, [lab if lab == target else "__rest__" for lab in labels], e.svm_lambda,
                        e.svm_epochs, e.svm_seed, classes=("__rest__", target)) for target in languages]
    return lambda Z: [languages[k] for k in np.argmax(np.stack([m.decision(Z) for m in models]), axis=0)]


def decide_lre(backend: str, sets: dict, manifest, cfg: ExperimentConfig, model=None, tests=None) -> dict:
    """Language decisions ``(test_utt, predicted, true)`` per condition.

    ``softmax`` needs the model and the test sequences of each condition
    (``tests``); the embedding back-ends only need the r-vector ``sets``.
    """
    if backend not in LRE_BACKENDS:
        raise ValidationError(f"language scoring supports {LRE_BACKENDS}, not {backend!r}")
    languages = manifest.languages()
    if backend == "cosine":
        en = sets["enroll"]
        groups = group_by(en, _lookup(manifest, en, "language"))
        cent = np.stack([enroll({lab: groups[lab]})[0].centroid for lab in languages])
        predict = lambda Z: [languages[k] for k in np.argmax(cosine_matrix(Z, cent), axis=1)]  # noqa: E731
    elif backend == "svm":
        tr = sets["train"]
        predict = _svm_lre(cfg, _mat(tr), _lookup(manifest, tr, "language"), languages)
    elif model is None or tests is None:
        raise ValidationError("softmax scoring needs the model and the test sequences")
    out = {}
    for cond in CONDITIONS:
        if backend == "softmax":
            seqs = tests[cond]
            ids = [s.utt_id for s in seqs]
            pred = [languages[k] for k in np.argmax(softmax_posteriors(model, seqs), axis=1)]
            truth = [s.language for s in seqs]
        else:
            te = sets[f"test-{cond}"]
            ids = [v.utt_id for v in te]
            pred = predict(_mat(te))
            truth = _lookup(manifest, te, "language")
        out[cond] = list(zip(ids, pred, truth))
    return out


def sre_report(system: str, condition: str, backend: str, rows) -> MetricReport:
    scores = np.array([r[2] for r in rows], dtype=np.float64)
    target = np.array([r[3] for r in rows], dtype=bool)
    eer, th = compute_eer(scores, target)
    return MetricReport(system, condition, backend, eer=eer, threshold_at_eer=th,
                        n_target=int(target.sum()), n_imposter=int((~target).sum()))


def lre_report(system: str, condition: str, backend: str, rows) -> MetricReport:
    idr, ide = compute_idr([r[1] for r in rows], [r[2] for r in rows])
    return MetricReport(system, condition, backend, idr=idr, ide=ide, n_ident=len(rows))


def evaluate_sre(model, cfg, corpus, system="sre", result=None) -> EvalResult:
    result = result or EvalResult()
    sets = extract_sets(model, cfg, corpus, "sre")
    for split, vecs in sets.items():
        result.rvectors[("sre", split)] = vecs
    for backend in SRE_BACKENDS:
        for cond, rows in score_sre(backend, sets, corpus.manifest, cfg).items():
            result.sre_scores[(cond, backend)] = rows
    for cond in CONDITIONS:
        for backend in SRE_BACKENDS:
            result.reports.append(sre_report(system, cond, backend, result.sre_scores[(cond, backend)]))
    return result


def evaluate_lre(model, cfg, corpus, system="lre", result=None) -> EvalResult:
    result = result or EvalResult()
    sets = extract_sets(model, cfg, corpus, "lre")
    for split, vecs in sets.items():
        result.rvectors[("lre", split)] = vecs
    tests = test_sets(cfg, corpus)
    for backend in LRE_BACKENDS:
        for cond, rows in decide_lre(backend, sets, corpus.manifest, cfg, model, tests).items():
            result.lre_decisions[(cond, backend)] = rows
    for cond in CONDITIONS:
        for backend in LRE_BACKENDS:
            result.reports.append(lre_report(system, cond, backend, result.lre_decisions[(cond, backend)]))
    return result


def evaluate_system(model, mode, cfg, corpus, system=None) -> EvalResult:
    system = system or mode
    result = EvalResult()
    if mode in ("sre", "multitask"):
        evaluate_sre(model, cfg, corpus, system, result)
    if mode in ("lre", "multitask"):
        evaluate_lre(model, cfg, corpus, system, result)
    return result


@dataclass
class SystemRun:
    mode: str
    routing: FeedbackRouting | None
    train: TrainResult
    evaluation: EvalResult

    @property
    def name(self) -> str:
        return self.mode if self.mode != "multitask" else f"mt-{self.routing.label()}"


def run_system(cfg: ExperimentConfig, mode: str, corpus: Corpus | None = None, routing=None) -> SystemRun:
    corpus = corpus or build_corpus(cfg)
    if mode == "multitask":
        routing = cfg.feedback() if routing is None else routing
    tr = train_system(cfg, mode, corpus, routing)
    run = SystemRun(mode, routing, tr, None)
    run.evaluation = evaluate_system(tr.model, mode, cfg, corpus, run.name)
    return run


def save_run(directory, run: SystemRun, cfg: ExperimentConfig):
    """Model, loss trace, r-vectors, score files and the metric report of one system."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
    model = run.train.model
    if isinstance(model, MultiTaskModel):
        save_model(os.path.join(directory, "model.txt"), model)
    else:
        labels = run.train.languages if run.mode == "lre" else run.train.speakers
        lstmp.save_params(os.path.join(directory, "model.txt"), model, labels)
    write_loss_trace(os.path.join(directory, "loss.tsv"), run.train.losses)
    ev = run.evaluation
    for (branch, split), vecs in ev.rvectors.items():
        write_rvectors(os.path.join(directory, f"rvectors.{branch}.{split}.txt"), vecs)
    for (cond, backend), rows in ev.sre_scores.items():
        write_sre_scores(os.path.join(directory, f"scores.sre.{cond}.{backend}.tsv"), rows)
        scores = np.array([r[2] for r in rows])
        target = np.array([r[3] for r in rows])
        metrics.write_det_points(os.path.join(directory, f"det.sre.{cond}.{backend}.tsv"), scores, target)
    for (cond, backend), rows in ev.lre_decisions.items():
        write_lre_decisions(os.path.join(directory, f"decisions.lre.{cond}.{backend}.tsv"), rows)
    metrics.write_reports(os.path.join(directory, "report.tsv"), ev.reports)


# --- ablation grid -----------------------------------------------------------------

@dataclass
class AblationResult:
    baseline_lre: SystemRun
    baseline_sre: SystemRun
    rows: dict   # sinks label -> SystemRun

    def values(self):
        """Row label -> {(column group, sub): value} for the ablation table."""
        out = {}

        def fill(row, run, task):
            cells = out.setdefault(row, {})
            for cond in CONDITIONS:
                if task == "sre":
                    for backend in SRE_BACKENDS:
                        r = run.evaluation.get("sre", cond, backend)
                        cells[(f"EER%-{cond}", backend)] = 100.0 * r.eer
                else:
                    for backend in LRE_BACKENDS:
                        r = run.evaluation.get("lre", cond, backend)
                        cells[(f"IDE-{cond}", backend)] = r.ide

        fill("r-vector baseline", self.baseline_sre, "sre")
        fill("r-vector baseline", self.baseline_lre, "lre")
        for label, run in self.rows.items():
            fill(label, run, "sre")
            fill(label, run, "lre")
        return out

    def table(self) -> str:
        cols = [(f"EER%-{c}", list(SRE_BACKENDS)) for c in CONDITIONS]
        cols += [(f"IDE-{c}", list(LRE_BACKENDS)) for c in CONDITIONS]
        rows = ["r-vector baseline"] + list(self.rows)
        vals = self.values()
        fmt_vals = {r: {k: (f"{v:.2f}" if isinstance(v, float) else str(v)) for k, v in c.items()}
                    for r, c in vals.items()}
        return metrics.format_table("feedback", rows, cols, fmt_vals)


def ablation_routings(cfg: ExperimentConfig, sinks=ABLATION_SINKS):
    sources = "".join(cfg.feedback().ordered_sources()) or "r"
    return {s: FeedbackRouting.parse(f"{s}/{sources}") for s in sinks}


def run_ablation(cfg: ExperimentConfig, corpus: Corpus | None = None, sinks=ABLATION_SINKS,
                 output_dir: str | None = None) -> AblationResult:
    corpus = corpus or build_corpus(cfg)
    base_l = run_system(cfg, "lre", corpus)
    base_s = run_system(cfg, "sre", corpus)
    rows = {}
    for label, routing in ablation_routings(cfg, sinks).items():
        rows[label] = run_system(cfg, "multitask", corpus, routing)
        log.info("ablation row %s done", label)
    result = AblationResult(base_l, base_s, rows)
    if output_dir:
        save_run(os.path.join(output_dir, "baseline-lre"), base_l, cfg)
        save_run(os.path.join(output_dir, "baseline-sre"), base_s, cfg)
        for label, run in rows.items():
            save_run(os.path.join(output_dir, f"mt-{label}"), run, cfg)
        with open(os.path.join(output_dir, "ablation_table.txt"), "w", encoding="utf-8") as fh:
            fh.write(result.table())
        metrics.write_reports(os.path.join(output_dir, "ablation_report.tsv"),
                              base_l.evaluation.reports + base_s.evaluation.reports +
                              [r for run in rows.values() for r in run.evaluation.reports])
    return result
