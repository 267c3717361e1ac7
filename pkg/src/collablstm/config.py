"""Experiment configuration and its flat ``key = value`` text format.

Keys are ``section.field`` for the nested specs (``synth.dim = 40``,
``train.learning_rate = 0.5``, ``loss.task_weights = 1,1``) and bare names
for top-level fields (``routing = g/rp``).  ``#`` starts a comment.  Tuples
are comma separated.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ValidationError
from .features import SynthSpec
from .multitask import FeedbackRouting
from .training import LossSpec, OptimizerSpec


@dataclass(frozen=True)
class ModelSpec:
    cell: int = 32
    rproj: int = 16
    pproj: int = 16
    init_scale: float = 0.2
    cross_init_scale: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class EvalSpec:
    short_frames: int = 100
    short_offset: str = "head"
    lda_dim: int = 0
    svm_lambda: float = 1e-3
    svm_epochs: int = 20
    svm_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    train: OptimizerSpec = field(default_factory=OptimizerSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    routing: str = "g/rp"
    curriculum: str = "cropped"
    crop_frames: int = 100
    output_dir: str = "runs/default"

    def feedback(self) -> FeedbackRouting:
        return FeedbackRouting.parse(self.routing)

    def validate(self):
        self.synth.validate()
        for name in ("cell", "rproj", "pproj"):
            if getattr(self.model, name) < 1:
                raise ValidationError(f"model.{name} must be >= 1")
        if self.curriculum not in ("full", "cropped"):
            raise ValidationError(f"unknown curriculum {self.curriculum!r}")
        if self.eval.short_frames < 1 or self.crop_frames < 1:
            raise ValidationError("frame counts must be >= 1")
        if self.synth.n_speakers_per_language - self.synth.n_eval_speakers_per_language < 1:
            raise ValidationError("at least one training speaker per language is required")
        self.feedback()
        return self

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with ``section.field`` or top-level overrides."""
        return apply_overrides(self, changes)


SECTIONS = ("synth", "model", "loss", "train", "eval")


def _convert(value: str, current):
    value = value.strip()
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValidationError(f"expected a boolean, got {value!r}")
    if isinstance(current, tuple):
        parts = [p for p in value.replace(",", " ").split()]
        kinds = [type(c) for c in current] or [float]
        return tuple(kinds[min(k, len(kinds) - 1)](p) for k, p in enumerate(parts))
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    sections = {s: {} for s in SECTIONS}
    top = {}
    for key, value in overrides.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in SECTIONS:
                raise ValidationError(f"unknown config section {sec!r}")
            obj = getattr(cfg, sec)
            if name not in {f.name for f in dataclasses.fields(obj)}:
                raise ValidationError(f"unknown config key {key!r}")
            cur = getattr(obj, name)
            sections[sec][name] = _convert(value, cur) if isinstance(value, str) else value
        else:
            if key not in {f.name for f in dataclasses.fields(cfg)} or key in SECTIONS:
                raise ValidationError(f"unknown config key {key!r}")
            cur = getattr(cfg, key)
            top[key] = _convert(value, cur) if isinstance(value, str) else value
    try:
        for sec, changes in sections.items():
            if changes:
                top[sec] = dataclasses.replace(getattr(cfg, sec), **changes)
        return dataclasses.replace(cfg, **top)
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        overrides[key] = value
    return apply_overrides(base or ExperimentConfig(), overrides).validate()


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            lines.append(f"{sec}.{f.name} = {_fmt(getattr(obj, f.name))}")
    for f in dataclasses.fields(cfg):
        if f.name not in SECTIONS:
            lines.append(f"{f.name} = {_fmt(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(path, cfg: ExperimentConfig):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
