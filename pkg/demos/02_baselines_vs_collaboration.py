"""Train the two single-task baselines and one collaborative system on the
default synthetic corpus, then compare their reports.

Takes a few minutes.  Run: python3 demos/02_baselines_vs_collaboration.py
"""
from collablstm import ExperimentConfig
from collablstm import pipeline
from collablstm.multitask import FeedbackRouting

cfg = ExperimentConfig()
corpus = pipeline.build_corpus(cfg)
print(f"corpus: {len(corpus.seqs)} utterances of {cfg.synth.dim}-dim features")

runs = [
    pipeline.run_system(cfg, "lre", corpus),
    pipeline.run_system(cfg, "sre", corpus),
    pipeline.run_system(cfg, "multitask", corpus, FeedbackRouting.parse("g/rp")),
]

for run in runs:
    print(f"\n{run.name}: final training loss {run.train.losses[-1]:.3f}")
    for r in run.evaluation.reports:
        if r.eer is not None:
            print(f"  speaker  {r.condition:<5} {r.backend:<7} EER {100 * r.eer:5.2f}%")
        else:
            print(f"  language {r.condition:<5} {r.backend:<7} IDR {100 * r.idr:5.2f}%  ({r.ide} errors)")

# Short test segments carry less evidence, so every EER above should rise from
# the full to the short condition.
