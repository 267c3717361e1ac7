"""Which gate should receive the other task's feedback?

Trains the baselines and one collaborative system per sink set (i, f, o, g,
ifog) with a reduced epoch budget so it runs in a few minutes, and prints
the ablation table.  Run: python3 demos/03_feedback_ablation.py
"""
from collablstm import ExperimentConfig
from collablstm import pipeline

cfg = ExperimentConfig().replace(**{"train.epochs": 4})
result = pipeline.run_ablation(cfg, pipeline.build_corpus(cfg))
print(result.table(), end="")
