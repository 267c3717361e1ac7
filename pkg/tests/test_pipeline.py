import math

import numpy as np
import pytest

from collablstm import pipeline
from collablstm.config import ExperimentConfig
from collablstm.multitask import FeedbackRouting, mt_run
from collablstm.lstmp import run

SMALL = {
    "synth.n_speakers_per_language": 6, "synth.n_eval_speakers_per_language": 2,
    "synth.n_utts_per_speaker": 6, "synth.n_enroll_per_speaker": 2, "synth.frames_per_utt": (60, 90),
    "synth.dim": 8, "model.cell": 8, "model.rproj": 4, "model.pproj": 4, "train.epochs": 2,
    "train.batch_size": 8, "eval.short_frames": 20, "crop_frames": 30,
}


@pytest.fixture(scope="module")
def small():
    cfg = ExperimentConfig().replace(**SMALL)
    return cfg, pipeline.build_corpus(cfg)


def test_multitask_starts_equal_to_baselines(small):
    cfg, corpus = small
    languages, speakers = pipeline.label_tables(corpus)
    lre = pipeline.init_system(cfg, "lre", languages, speakers)
    sre = pipeline.init_system(cfg, "sre", languages, speakers)
    mt = pipeline.init_system(cfg, "multitask", languages, speakers, FeedbackRouting.parse("ifog/rp"))
    X = corpus.seqs[0].frames
    tl, ts = mt_run(mt, X)
    assert np.array_equal(tl.y, run(lre, X).y) and np.array_equal(ts.y, run(sre, X).y)


def test_system_reports_cover_conditions_and_backends(small):
    cfg, corpus = small
    res = pipeline.run_system(cfg, "multitask", corpus)
    seen = {(r.condition, r.backend, r.eer is not None) for r in res.evaluation.reports}
    for cond in ("full", "short"):
        for backend in ("cosine", "lda"):
            assert (cond, backend, True) in seen
        for backend in ("cosine", "svm", "softmax"):
            assert (cond, backend, False) in seen
    n_test = len(corpus.split("test"))
    n_enrolled = len(corpus.manifest.speakers("enroll"))
    rep = res.evaluation.get("sre", "full", "cosine")
    assert rep.n_target == n_test and rep.n_imposter == n_test * (n_enrolled - 1)
    assert res.evaluation.get("lre", "short", "softmax").n_ident == n_test
    assert res.name == "mt-g/rp"


def test_short_condition_crops_tests_only(small):
    cfg, corpus = small
    sets = pipeline.test_sets(cfg, corpus)
    assert all(s.num_frames == 20 for s in sets["short"])
    assert [s.utt_id for s in sets["short"]] == [s.utt_id for s in sets["full"]]


def test_save_run_layout(small, tmp_path):
    cfg, corpus = small
    res = pipeline.run_system(cfg, "sre", corpus)
    pipeline.save_run(tmp_path, res, cfg)
    names = {p.name for p in tmp_path.iterdir()}
    for f in ("config.txt", "model.txt", "loss.tsv", "report.tsv", "scores.sre.full.cosine.tsv",
              "det.sre.short.lda.tsv", "rvectors.sre.test-short.txt"):
        assert f in names


def test_ablation_with_zero_epochs_equals_untrained_baseline(small, tmp_path):
    cfg, corpus = small
    cfg = cfg.replace(**{"train.epochs": 0})
    result = pipeline.run_ablation(cfg, corpus, output_dir=tmp_path)
    values = result.values()
    assert list(values) == ["r-vector baseline", "i", "f", "o", "g", "ifog"]
    for row in values.values():
        assert row == values["r-vector baseline"]
    table = (tmp_path / "ablation_table.txt").read_text().splitlines()
    assert len(table) == 2 + 6
    header = table[0].split()
    assert header[0] == "feedback" and "EER%-full:cosine" in header and "IDE-short:softmax" in header


def test_default_language_system_beats_chance():
    cfg = ExperimentConfig()
    corpus = pipeline.build_corpus(cfg)
    result = pipeline.train_system(cfg, "lre", corpus)
    assert result.losses[-1] < math.log(2)
    assert result.losses[-1] < result.losses[0]
