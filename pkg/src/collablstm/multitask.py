"""Collaborative two-branch model: language (``l``) and speaker (``s``) LSTMPs.

Each branch reads the other's previous-step projections.  For every
configured sink ``k`` and source ``q`` the language branch's pre-activation
``a_k`` gains ``W_ls_{k}{q} @ q^s_{t-1}`` and symmetrically for the speaker
branch with ``W_sl_*``.  With ``sinks={g}`` and ``sources={r, p}`` the
language candidate becomes::

    g^l_t = tanh(W_cx x + W_cr r^l_{t-1} + b_c + W_ls_cr r^s_{t-1} + W_ls_cp p^s_{t-1})

Cross matrices are named ``W_<dir>_<k><q>`` with ``k`` in ``i f c o`` (``c``
for the candidate sink ``g``) and ``q`` in ``r p``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import lstmp, serialization
from .errors import ValidationError
from .lstmp import LstmpParams, LstmpState, Prepared, StepOutput, TraceBuffer, cell_step, check_finite

SINK_NAMES = {
    "input_gate": "i",
    "forget_gate": "f",
    "output_gate": "o",
    "cell_candidate": "g",
}
SOURCE_NAMES = {"rproj": "r", "pproj": "p"}
SINK_ORDER = ("i", "f", "g", "o")
SOURCE_ORDER = ("r", "p")
DIRECTIONS = ("ls", "sl")
BRANCHES = ("lre", "sre")
_MATRIX_LETTER = {"i": "i", "f": "f", "g": "c", "o": "o"}


def _normalize(items, table, order, what):
    if isinstance(items, str):
        if "," in items or " " in items:
            items = items.replace(",", " ").split()
        elif items in table:
            items = [items]
        else:
            items = list(items)
    out = set()
    for item in items:
        key = table.get(item, item)
        if key not in order:
            raise ValidationError(f"unknown feedback {what} {item!r}")
        out.add(key)
    return frozenset(out)


@dataclass(frozen=True)
class FeedbackRouting:
    """Which pre-activations receive cross-task terms and from which projections.

    Sinks accept ``i f o g`` or the long names (``input_gate`` ...);
    sources accept ``r p`` or ``rproj pproj``.  Empty ``sinks`` disables
    feedback entirely.
    """

    sinks: frozenset = frozenset({"g"})
    sources: frozenset = frozenset({"r", "p"})

    def __post_init__(self):
        sinks = _normalize(self.sinks, SINK_NAMES, SINK_ORDER, "sink")
        sources = _normalize(self.sources, SOURCE_NAMES, SOURCE_ORDER, "source")
        if sinks and not sources:
            raise ValidationError("feedback enabled but no sources selected")
        if not sinks:
            sources = frozenset()
        object.__setattr__(self, "sinks", sinks)
        object.__setattr__(self, "sources", sources)

    @classmethod
    def none(cls) -> "FeedbackRouting":
        return cls(frozenset(), frozenset())

    @property
    def enabled(self) -> bool:
        return bool(self.sinks)

    def ordered_sinks(self):
        return [k for k in SINK_ORDER if k in self.sinks]

    def ordered_sources(self):
        return [q for q in SOURCE_ORDER if q in self.sources]

    def matrix_names(self) -> list:
        return [cross_name(d, k, q) for d in DIRECTIONS for k in self.ordered_sinks()
                for q in self.ordered_sources()]

    def label(self) -> str:
        if not self.enabled:
            return "none"
        return "".join(self.ordered_sinks()) + "/" + "".join(self.ordered_sources())

    @classmethod
    def parse(cls, text: str) -> "FeedbackRouting":
        """Parse ``"none"``, ``"g"``, ``"ifog/r"`` or ``"i,f/rproj,pproj"``."""
        text = text.strip()
        if text in ("", "none"):
            return cls.none()
        sinks, _, sources = text.partition("/")
        return cls(sinks, sources or "rp")


def cross_name(direction: str, sink: str, source: str) -> str:
    return f"W_{direction}_{_MATRIX_LETTER[sink]}{source}"


@dataclass(eq=False)
class MultiTaskModel:
    lre: LstmpParams
    sre: LstmpParams
    cross: dict = field(default_factory=dict)
    routing: FeedbackRouting = field(default_factory=FeedbackRouting)
    languages: tuple = ()
    speakers: tuple = ()

    def __post_init__(self):
        self.cross = {k: np.asarray(v, dtype=np.float64) for k, v in self.cross.items()}
        self.languages = tuple(self.languages)
        self.speakers = tuple(self.speakers)
        self.validate()

    def branch(self, name: str) -> LstmpParams:
        if name in ("lre", "l", "language"):
            return self.lre
        if name in ("sre", "s", "speaker"):
            return self.sre
        raise ValidationError(f"unknown branch {name!r}")

    def cross_shape(self, name: str) -> tuple:
        direction, spec = name.split("_")[1:]
        dst, src = (self.lre, self.sre) if direction == "ls" else (self.sre, self.lre)
        width = src.dims["rproj"] if spec[1] == "r" else src.dims["pproj"]
        return (dst.dims["cell"], width)

    def validate(self):
        if self.lre.dims["input"] != self.sre.dims["input"]:
            raise ValidationError("branches must share the input dimension")
        expected = set(self.routing.matrix_names())
        if set(self.cross) != expected:
            missing = sorted(expected - set(self.cross))
            extra = sorted(set(self.cross) - expected)
            raise ValidationError(f"cross weights do not match routing {self.routing.label()}: "
                                  f"missing {missing}, unexpected {extra}")
        for name, w in self.cross.items():
            if w.shape != self.cross_shape(name):
                raise ValidationError(f"{name} has shape {w.shape}, expected {self.cross_shape(name)}")
        if self.languages and len(self.languages) != self.lre.dims["out"]:
            raise ValidationError("language table size differs from the language branch output")
        if self.speakers and len(self.speakers) != self.sre.dims["out"]:
            raise ValidationError("speaker table size differs from the speaker branch output")
        return self

    def arrays(self) -> dict:
        out = {f"l.{k}": v for k, v in self.lre.arrays().items()}
        out.update({f"s.{k}": v for k, v in self.sre.arrays().items()})
        out.update({k: self.cross[k] for k in self.routing.matrix_names()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, routing, languages=(), speakers=()) -> "MultiTaskModel":
        lre = LstmpParams(**{k[2:]: v for k, v in arrays.items() if k.startswith("l.")})
        sre = LstmpParams(**{k[2:]: v for k, v in arrays.items() if k.startswith("s.")})
        cross = {k: v for k, v in arrays.items() if not k.startswith(("l.", "s."))}
        return cls(lre, sre, cross, routing, languages, speakers)

    def copy(self) -> "MultiTaskModel":
        return MultiTaskModel.from_arrays({k: v.copy() for k, v in self.arrays().items()},
                                          self.routing, self.languages, self.speakers)


def init_multitask(lre_dims: dict, sre_dims: dict, routing: FeedbackRouting | None = None,
                   init_scale: float = 0.1, seed: int = 0, warm_start=None,
                   cross_init_scale: float | None = None, languages=(), speakers=()) -> MultiTaskModel:
    """Build a collaborative model.

    ``warm_start`` is an optional ``(lre_params, sre_params)`` pair copied in
    place of random branches.  Cross weights are uniform in
    ``[-cross_init_scale, cross_init_scale]`` (defaults to ``init_scale``;
    pass 0 for an initially uncoupled model).
    """
    routing = routing if routing is not None else FeedbackRouting()
    seeds = np.random.SeedSequence(seed).spawn(3)
    if warm_start is not None:
        lre, sre = (p.copy() for p in warm_start)
        for p, dims, name in ((lre, lre_dims, "lre"), (sre, sre_dims, "sre")):
            if dims is not None and any(p.dims[k] != int(v) for k, v in dims.items()):
                raise ValidationError(f"warm-start {name} branch has dims {p.dims}, expected {dims}")
    else:
        lre = lstmp.init_params(lre_dims, init_scale, seeds[0])
        sre = lstmp.init_params(sre_dims, init_scale, seeds[1])
    scale = init_scale if cross_init_scale is None else cross_init_scale
    rng = np.random.default_rng(seeds[2])
    model = MultiTaskModel(lre, sre, {}, FeedbackRouting.none(), languages, speakers)
    cross = {}
    for name in routing.matrix_names():
        shape = model.cross_shape(name)
        cross[name] = rng.uniform(-scale, scale, shape) if scale > 0 else np.zeros(shape)
    return MultiTaskModel(lre, sre, cross, routing, languages, speakers)


def feedback_terms(model: MultiTaskModel, direction: str, prev: StepOutput | LstmpState | None):
    """Cross-task additions for one branch, from the other branch's previous outputs."""
    if not model.routing.enabled or prev is None:
        return None
    extra = {}
    for k in model.routing.ordered_sinks():
        total = None
        for q in model.routing.ordered_sources():
            term = getattr(prev, q) @ model.cross[cross_name(direction, k, q)].T
            total = term if total is None else total + term
        extra[k] = total
    return extra


def _zero_prev(params: LstmpParams, lead: tuple):
    d = params.dims
    return LstmpState(np.zeros(lead + (d["cell"],)), np.zeros(lead + (d["rproj"],)),
                      np.zeros(lead + (d["pproj"],)))


def mt_step(model: MultiTaskModel, state_l: LstmpState, state_s: LstmpState, x):
    """Advance both branches one step.

    The states must carry ``p`` (as produced by :func:`LstmpState.zeros`).
    Returns ``(state_l, state_s, out_l, out_s)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.lre.dims["input"]:
        raise ValidationError(f"input has dimension {x.shape[-1]}, model expects {model.lre.dims['input']}")
    for st in (state_l, state_s):
        if st.p is None:
            raise ValidationError("multitask states must carry the previous non-recurrent projection p")
    pl, ps = Prepared(model.lre), Prepared(model.sre)
    out_l = cell_step(pl, state_l.c, state_l.r, pl.project_inputs(x), feedback_terms(model, "ls", state_s))
    out_s = cell_step(ps, state_s.c, state_s.r, ps.project_inputs(x), feedback_terms(model, "sl", state_l))
    check_finite(out_l, "lre step: ")
    check_finite(out_s, "sre step: ")
    return (LstmpState(out_l.c, out_l.r, out_l.p), LstmpState(out_s.c, out_s.r, out_s.p), out_l, out_s)


def mt_run(model: MultiTaskModel, X):
    """Joint recursion over ``(T, D)`` or ``(T, B, D)`` input; returns two stacked traces."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim not in (2, 3) or X.shape[0] < 1:
        raise ValidationError("expected a non-empty (T, D) or (T, B, D) input")
    if X.shape[-1] != model.lre.dims["input"]:
        raise ValidationError(f"input has dimension {X.shape[-1]}, model expects {model.lre.dims['input']}")
    pl, ps = Prepared(model.lre), Prepared(model.sre)
    xl, xs = pl.project_inputs(X), ps.project_inputs(X)
    lead = X.shape[1:-1]
    prev_l, prev_s = _zero_prev(model.lre, lead), _zero_prev(model.sre, lead)
    buf_l = TraceBuffer(model.lre, X.shape[0], lead)
    buf_s = TraceBuffer(model.sre, X.shape[0], lead)
    with np.errstate(over="ignore", invalid="ignore"):  # reported by check_finite below
        for t in range(X.shape[0]):
            ol = cell_step(pl, prev_l.c, prev_l.r, xl[t], feedback_terms(model, "ls", prev_s))
            os_ = cell_step(ps, prev_s.c, prev_s.r, xs[t], feedback_terms(model, "sl", prev_l))
            buf_l.put(t, ol)
            buf_s.put(t, os_)
            prev_l, prev_s = ol, os_
    tl, ts = buf_l.trace(), buf_s.trace()
    check_finite(tl, "lre branch: ")
    check_finite(ts, "sre branch: ")
    return tl, ts


def mt_forward(model: MultiTaskModel, seq):
    """Per-frame outputs of both branches: ``(list_l, list_s)``."""
    tl, ts = mt_run(model, getattr(seq, "frames", seq))
    T = tl.y.shape[0]
    return [tl.at(t) for t in range(T)], [ts.at(t) for t in range(T)]


# --- serialization ----------------------------------------------------------

def dumps_model(model: MultiTaskModel) -> str:
    meta = {
        "sinks": model.routing.ordered_sinks() or ["-"],
        "sources": model.routing.ordered_sources() or ["-"],
        "lre_dims": [f"{k}={v}" for k, v in model.lre.dims.items()],
        "sre_dims": [f"{k}={v}" for k, v in model.sre.dims.items()],
        "languages": list(model.languages),
        "speakers": list(model.speakers),
    }
    return serialization.dumps("multitask", meta, model.arrays())


def loads_model(text: str, path=None) -> MultiTaskModel:
    kind, meta, arrays = serialization.loads(text, lstmp.VECTOR_NAMES, path)
    if kind != "multitask":
        raise ValidationError(f"expected a multitask model, found kind {kind!r}")
    sinks = [s for s in meta.get("sinks", []) if s != "-"]
    sources = [s for s in meta.get("sources", []) if s != "-"]
    routing = FeedbackRouting(frozenset(sinks), frozenset(sources))
    return MultiTaskModel.from_arrays(arrays, routing, meta.get("languages", ()), meta.get("speakers", ()))


def save_model(path, model: MultiTaskModel):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> MultiTaskModel:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_model(fh.read(), path)
