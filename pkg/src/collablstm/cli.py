"""Command-line entry point: ``collablstm <command> [options]``.

Every command reads an optional config file (``--config``) plus
``--set section.key=value`` overrides, so a run is reproducible from its
config and seeds alone.  Exit codes: 0 success, 1 invalid input or config,
2 numeric failure (including a failed gradient check), 3 I/O or archive
format error.
"""
from __future__ import annotations

import argparse
import logging
import os
import re
import sys

from . import lstmp, metrics, pipeline, serialization
from .config import ExperimentConfig, apply_overrides, load_config, save_config
from .embedding import read_rvectors, write_rvectors
from .errors import ArchiveFormatError, NumericError, ValidationError
from .features import load_archive, save_archive
from .multitask import FeedbackRouting, MultiTaskModel, loads_model, save_model
from .scoring import read_lre_decisions, read_sre_scores, write_lre_decisions, write_sre_scores
from .training import gradcheck, write_loss_trace

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
SPLIT_FILES = ("train", "enroll", "test-full", "test-short")

log = logging.getLogger("collablstm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return apply_overrides(cfg, overrides).validate()


def _corpus(args, cfg) -> pipeline.Corpus:
    if getattr(args, "archive", None):
        return pipeline.Corpus(*load_archive(args.archive))
    return pipeline.build_corpus(cfg)


def load_any_model(path):
    """A single-branch model or a collaborative one, depending on the file's kind."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    kind, _, _ = serialization.loads(text, lstmp.VECTOR_NAMES, path)
    if kind == "multitask":
        return loads_model(text, path)
    return lstmp.loads_params(text, path)[0]


def rvector_path(directory, branch, split):
    return os.path.join(directory, f"rvectors.{branch}.{split}.txt")


def score_path(directory, task, condition, backend):
    prefix = "scores" if task == "sre" else "decisions"
    return os.path.join(directory, f"{prefix}.{task}.{condition}.{backend}.tsv")


# --- commands ----------------------------------------------------------------------

def cmd_synth(args):
    cfg = _config(args)
    out = args.out or os.path.join(cfg.output_dir, "data")
    corpus = pipeline.build_corpus(cfg)
    save_archive(out, corpus.manifest, corpus.seqs)
    print(f"wrote {len(corpus.seqs)} utterances to {out}")


def cmd_train(args):
    cfg = _config(args)
    routing = FeedbackRouting.parse(args.routing) if args.routing else None
    corpus = _corpus(args, cfg)
    result = pipeline.train_system(cfg, args.mode, corpus, routing)
    name = args.mode if args.mode != "multitask" else f"mt-{(routing or cfg.feedback()).label()}"
    out = args.out or os.path.join(cfg.output_dir, name.replace("/", "-"))
    os.makedirs(out, exist_ok=True)
    save_config(os.path.join(out, "config.txt"), cfg)
    model_path = os.path.join(out, "model.txt")
    if isinstance(result.model, MultiTaskModel):
        save_model(model_path, result.model)
    else:
        labels = result.languages if args.mode == "lre" else result.speakers
        lstmp.save_params(model_path, result.model, labels)
    write_loss_trace(os.path.join(out, "loss.tsv"), result.losses)
    final = f"{result.losses[-1]:.4f}" if result.losses else "n/a"
    print(f"trained {name}: final epoch loss {final}; model at {model_path}")


def cmd_gradcheck(args):
    dims = dict(input=args.input, cell=args.cell, rproj=args.rproj, pproj=args.pproj,
                n_languages=2, n_speakers=3)
    routing = FeedbackRouting.parse(args.routing)
    report = gradcheck(dims=dims, routing=routing, T=args.steps, seed=args.seed)
    print(report.format())
    if not report.passed(args.tol):
        print(f"gradient check failed: max relative error {report.max_error:.3e} >= {args.tol:g}",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_extract(args):
    cfg = _config(args)
    model = load_any_model(args.model)
    corpus = pipeline.Corpus(*load_archive(args.archive))
    os.makedirs(args.out, exist_ok=True)
    for split, vecs in pipeline.extract_sets(model, cfg, corpus, args.branch).items():
        write_rvectors(rvector_path(args.out, args.branch, split), vecs)
    print(f"wrote {args.branch} r-vectors for {', '.join(SPLIT_FILES)} to {args.out}")


def _read_sets(directory, branch):
    return {split: read_rvectors(rvector_path(directory, branch, split)) for split in SPLIT_FILES}


def cmd_score(args):
    cfg = _config(args)
    task = args.task or {"lda": "sre", "svm": "lre", "softmax": "lre"}.get(args.backend)
    if task is None:
        raise ValidationError("--task is required with the cosine back-end")
    corpus = pipeline.Corpus(*load_archive(args.archive))
    model = load_any_model(args.model) if args.model else None
    if args.rvectors:
        sets = _read_sets(args.rvectors, task)
    elif model is not None:
        sets = pipeline.extract_sets(model, cfg, corpus, task)
    else:
        raise ValidationError("give --rvectors or --model")
    os.makedirs(args.out, exist_ok=True)
    if task == "sre":
        for cond, rows in pipeline.score_sre(args.backend, sets, corpus.manifest, cfg).items():
            write_sre_scores(score_path(args.out, "sre", cond, args.backend), rows)
    else:
        tests = pipeline.test_sets(cfg, corpus) if args.backend == "softmax" else None
        for cond, rows in pipeline.decide_lre(args.backend, sets, corpus.manifest, cfg, model, tests).items():
            write_lre_decisions(score_path(args.out, "lre", cond, args.backend), rows)
    print(f"wrote {task} {args.backend} scores to {args.out}")


_SCORE_NAME = re.compile(r"(scores|decisions)\.(sre|lre)\.([^.]+)\.([^.]+)\.tsv$")


def _read_score_file(path):
    """``(task, rows)``; speaker score files have four columns, language decisions three."""
    with open(path, "r", encoding="utf-8") as fh:
        first = next((line for line in fh if line.strip()), "")
    if first.count("\t") == 3:
        return "sre", read_sre_scores(path)
    if first.count("\t") == 2:
        return "lre", read_lre_decisions(path)
    raise ArchiveFormatError("not a score or decision file", path, 1)


def cmd_eval(args):
    reports = []
    for path in args.scores:
        task, rows = _read_score_file(path)
        m = _SCORE_NAME.search(os.path.basename(path))
        cond, backend = (m.group(3), m.group(4)) if m else ("unknown", "unknown")
        if task == "sre":
            reports.append(pipeline.sre_report(args.system, cond, backend, rows))
        else:
            reports.append(pipeline.lre_report(args.system, cond, backend, rows))
    if args.out:
        metrics.write_reports(args.out, reports)
    for r in reports:
        if r.eer is not None:
            print(f"{r.system}\t{r.condition}\t{r.backend}\tEER {100 * r.eer:.2f}%\t"
                  f"({r.n_target} target / {r.n_imposter} imposter)")
        else:
            print(f"{r.system}\t{r.condition}\t{r.backend}\tIDE {r.ide}\tIDR {100 * r.idr:.2f}%\t"
                  f"({r.n_ident} trials)")


def cmd_ablation(args):
    cfg = _config(args)
    sinks = tuple(args.sinks.split(",")) if args.sinks else pipeline.ABLATION_SINKS
    out = args.out or cfg.output_dir
    result = pipeline.run_ablation(cfg, _corpus(args, cfg), sinks, output_dir=out)
    print(result.table(), end="")


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="collablstm", description="Collaborative language/speaker LSTMP toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return p

    p = with_config(sub.add_parser("synth", help="generate the synthetic corpus archive"))
    p.add_argument("--out", help="archive directory (default: <output_dir>/data)")
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("train", help="train one system"))
    p.add_argument("--mode", required=True, choices=pipeline.MODES)
    p.add_argument("--routing", help="feedback routing for multitask, e.g. g/rp or ifog/r")
    p.add_argument("--archive", help="feature archive (default: regenerate from the config)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="compare BPTT gradients with finite differences")
    p.add_argument("--routing", default="g/rp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", type=int, default=3)
    p.add_argument("--cell", type=int, default=4)
    p.add_argument("--rproj", type=int, default=2)
    p.add_argument("--pproj", type=int, default=2)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = with_config(sub.add_parser("extract", help="write r-vectors of every split"))
    p.add_argument("--model", required=True)
    p.add_argument("--archive", required=True)
    p.add_argument("--branch", required=True, choices=("lre", "sre"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = with_config(sub.add_parser("score", help="score test r-vectors with one back-end"))
    p.add_argument("--backend", required=True, choices=("cosine", "lda", "svm", "softmax"))
    p.add_argument("--task", choices=("lre", "sre"), help="required for cosine")
    p.add_argument("--archive", required=True, help="archive supplying the labels")
    p.add_argument("--rvectors", help="directory written by extract")
    p.add_argument("--model", help="model file (needed for softmax)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="metric reports from score or decision files")
    p.add_argument("scores", nargs="+")
    p.add_argument("--system", default="system")
    p.add_argument("--out", help="report TSV")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("ablation", help="baselines plus every feedback sink"))
    p.add_argument("--sinks", help="comma list of sink sets (default i,f,o,g,ifog)")
    p.add_argument("--archive")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        code = args.func(args)
    except (ArchiveFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
