"""Projected LSTM with a recurrent projection ``r`` and a non-recurrent one ``p``.

One step::

    i = sigmoid(W_ix x + W_ir r' + W_ic * c' + b_i)
    f = sigmoid(W_fx x + W_fr r' + W_fc * c' + b_f)
    c = f * c' + i * tanh(W_cx x + W_cr r' + b_c)
    o = sigmoid(W_ox x + W_or r' + W_oc * c + b_o)
    m = o * tanh(c)
    r = W_rm m,   p = W_pm m
    y = W_yr r + W_yp p + b_y

where primes mark the previous step.  Peepholes ``W_ic, W_fc, W_oc`` are
diagonal and stored as vectors.  ``y`` is left as logits.

All step functions accept either single vectors or ``(batch, n)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import serialization
from .errors import NumericError, ValidationError

INPUT_WEIGHTS = ("W_ix", "W_fx", "W_cx", "W_ox")
RECURRENT_WEIGHTS = ("W_ir", "W_fr", "W_cr", "W_or")
PEEPHOLES = ("W_ic", "W_fc", "W_oc")
GATE_BIASES = ("b_i", "b_f", "b_c", "b_o")
VECTOR_NAMES = PEEPHOLES + GATE_BIASES + ("b_y",)
DIM_KEYS = ("input", "cell", "rproj", "pproj", "out")


@dataclass(eq=False)
class LstmpParams:
    W_ix: np.ndarray
    W_fx: np.ndarray
    W_cx: np.ndarray
    W_ox: np.ndarray
    W_ir: np.ndarray
    W_fr: np.ndarray
    W_cr: np.ndarray
    W_or: np.ndarray
    W_ic: np.ndarray
    W_fc: np.ndarray
    W_oc: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    W_rm: np.ndarray
    W_pm: np.ndarray
    W_yr: np.ndarray
    W_yp: np.ndarray
    b_y: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        self.validate()

    @property
    def dims(self) -> dict:
        return {
            "input": self.W_ix.shape[1],
            "cell": self.W_ix.shape[0],
            "rproj": self.W_rm.shape[0],
            "pproj": self.W_pm.shape[0],
            "out": self.W_yr.shape[0],
        }

    def validate(self):
        n, d = self.W_ix.shape
        nr, npj, no = self.W_rm.shape[0], self.W_pm.shape[0], self.W_yr.shape[0]
        expected = _shapes(dict(input=d, cell=n, rproj=nr, pproj=npj, out=no))
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValidationError(f"{name} has shape {got}, expected {shape}")
        return self

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "LstmpParams":
        return LstmpParams(**{k: v.copy() for k, v in self.arrays().items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


def _shapes(dims: dict) -> dict:
    n, d, nr, npj, no = dims["cell"], dims["input"], dims["rproj"], dims["pproj"], dims["out"]
    out = {}
    for name in INPUT_WEIGHTS:
        out[name] = (n, d)
    for name in RECURRENT_WEIGHTS:
        out[name] = (n, nr)
    for name in PEEPHOLES + GATE_BIASES:
        out[name] = (n,)
    out.update(W_rm=(nr, n), W_pm=(npj, n), W_yr=(no, nr), W_yp=(no, npj), b_y=(no,))
    return out


@dataclass
class LstmpState:
    """Carry between steps.  ``p`` is only needed when another branch reads it."""

    c: np.ndarray
    r: np.ndarray
    p: np.ndarray | None = None

    @classmethod
    def zeros(cls, params: LstmpParams, batch: int | None = None) -> "LstmpState":
        d = params.dims
        lead = () if batch is None else (batch,)
        return cls(np.zeros(lead + (d["cell"],)), np.zeros(lead + (d["rproj"],)),
                   np.zeros(lead + (d["pproj"],)))


@dataclass
class StepOutput:
    """Every intermediate of one step.

    ``a_*`` are gate pre-activations (``a_g`` feeds the candidate tanh);
    ``h = tanh(c)``.  When produced by a sequence pass the arrays carry an
    extra leading time axis.
    """

    a_i: np.ndarray
    a_f: np.ndarray
    a_g: np.ndarray
    a_o: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    h: np.ndarray
    m: np.ndarray
    r: np.ndarray
    p: np.ndarray
    y: np.ndarray

    @property
    def g_pre_act(self):
        return self.a_g

    def at(self, t) -> "StepOutput":
        return StepOutput(**{f.name: getattr(self, f.name)[t] for f in fields(self)})

    def map(self, fn) -> "StepOutput":
        return StepOutput(**{f.name: fn(getattr(self, f.name)) for f in fields(self)})


def init_params(dims: dict, init_scale: float = 0.1, seed: int = 0) -> LstmpParams:
    """Uniform random parameters in ``[-init_scale, init_scale]``."""
    for key in DIM_KEYS:
        if key not in dims or int(dims[key]) < 1:
            raise ValidationError(f"dimension {key!r} must be >= 1, got {dims.get(key)}")
    if init_scale < 0:
        raise ValidationError("init_scale must be >= 0")
    rng = np.random.default_rng(seed)
    shapes = _shapes({k: int(dims[k]) for k in DIM_KEYS})
    return LstmpParams(**{name: rng.uniform(-init_scale, init_scale, shape) if init_scale > 0
                          else np.zeros(shape) for name, shape in shapes.items()})


# --- recursion ----------------------------------------------------------------

class Prepared:
    """Per-sequence stacked views of a branch's weights (gate order i, f, g, o)."""

    __slots__ = ("params", "W_x", "b", "W_r", "n")

    def __init__(self, params: LstmpParams):
        self.params = params
        self.W_x = np.ascontiguousarray(np.concatenate([getattr(params, w) for w in INPUT_WEIGHTS]).T)
        self.b = np.concatenate([getattr(params, b) for b in GATE_BIASES])
        self.W_r = np.ascontiguousarray(np.concatenate([getattr(params, w) for w in RECURRENT_WEIGHTS]).T)
        self.n = params.W_ix.shape[0]

    def project_inputs(self, X):
        """Input contributions plus biases of all four gates, shape ``(..., 4 * cell)``."""
        return X @ self.W_x + self.b


def sigmoid(a):
    return 0.5 * np.tanh(0.5 * a) + 0.5


def cell_step(prep: Prepared, c_prev, r_prev, xin, extra=None) -> StepOutput:
    """Advance one step given the precomputed input projection ``xin``.

    ``extra`` optionally maps gate letters ``i, f, g, o`` to additive terms
    for the corresponding pre-activation.
    """
    p, n = prep.params, prep.n
    a = xin + r_prev @ prep.W_r
    a_i = a[..., :n] + p.W_ic * c_prev
    a_f = a[..., n:2 * n] + p.W_fc * c_prev
    a_g = a[..., 2 * n:3 * n]
    if extra:
        if "i" in extra:
            a_i = a_i + extra["i"]
        if "f" in extra:
            a_f = a_f + extra["f"]
        if "g" in extra:
            a_g = a_g + extra["g"]
    i = sigmoid(a_i)
    f = sigmoid(a_f)
    g = np.tanh(a_g)
    c = f * c_prev + i * g
    a_o = a[..., 3 * n:] + p.W_oc * c
    if extra and "o" in extra:
        a_o = a_o + extra["o"]
    o = sigmoid(a_o)
    h = np.tanh(c)
    m = o * h
    r = m @ p.W_rm.T
    pp = m @ p.W_pm.T
    y = r @ p.W_yr.T + pp @ p.W_yp.T + p.b_y
    return StepOutput(a_i, a_f, a_g, a_o, i, f, g, o, c, h, m, r, pp, y)


class TraceBuffer:
    """Preallocated time-major storage for the outputs of a sequence pass."""

    def __init__(self, params: LstmpParams, T: int, lead: tuple):
        d = params.dims
        size = {"r": d["rproj"], "p": d["pproj"], "y": d["out"]}
        self.arrays = {f.name: np.empty((T,) + lead + (size.get(f.name, d["cell"]),))
                       for f in fields(StepOutput)}

    def put(self, t: int, out: StepOutput):
        for name, arr in self.arrays.items():
            arr[t] = getattr(out, name)

    def trace(self) -> StepOutput:
        return StepOutput(**self.arrays)


def check_finite(trace: StepOutput, label: str = ""):
    """Raise :class:`NumericError` at the first step with a non-finite cell or output."""
    for name in ("c", "y"):
        arr = getattr(trace, name)
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(arr))[0]
            t = int(bad[0]) if arr.ndim > 1 else 0
            raise NumericError(f"{label}non-finite {name} at step {t}", block=name, step=t)


def _as_frames(seq):
    frames = getattr(seq, "frames", seq)
    return np.asarray(frames, dtype=np.float64)


def step(params: LstmpParams, state: LstmpState, x):
    """One step from ``state``; returns ``(new_state, StepOutput)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.dims["input"]:
        raise ValidationError(f"input has dimension {x.shape[-1]}, model expects {params.dims['input']}")
    prep = Prepared(params)
    out = cell_step(prep, state.c, state.r, prep.project_inputs(x))
    check_finite(out, "step: ")
    return LstmpState(out.c, out.r, out.p), out


def run(params: LstmpParams, X) -> StepOutput:
    """Unrolled recursion over ``X`` of shape ``(T, D)`` or ``(T, B, D)`` from a zero state.

    Returns a time-stacked :class:`StepOutput`.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim not in (2, 3) or X.shape[0] < 1:
        raise ValidationError("expected a non-empty (T, D) or (T, B, D) input")
    if X.shape[-1] != params.dims["input"]:
        raise ValidationError(f"input has dimension {X.shape[-1]}, model expects {params.dims['input']}")
    prep = Prepared(params)
    xin = prep.project_inputs(X)
    batch = None if X.ndim == 2 else X.shape[1]
    state = LstmpState.zeros(params, batch)
    c, r = state.c, state.r
    buf = TraceBuffer(params, X.shape[0], X.shape[1:-1])
    with np.errstate(over="ignore", invalid="ignore"):  # reported by check_finite below
        for t in range(X.shape[0]):
            out = cell_step(prep, c, r, xin[t])
            c, r = out.c, out.r
            buf.put(t, out)
    trace = buf.trace()
    check_finite(trace)
    return trace


def forward_sequence(params: LstmpParams, seq) -> list:
    """Per-frame :class:`StepOutput` list for one utterance (or ``T x D`` matrix)."""
    trace = run(params, _as_frames(seq))
    return [trace.at(t) for t in range(trace.y.shape[0])]


# --- serialization ----------------------------------------------------------

def dumps_params(params: LstmpParams, labels=None) -> str:
    meta = {"dims": [f"{k}={v}" for k, v in params.dims.items()]}
    if labels is not None:
        meta["labels"] = list(labels)
    return serialization.dumps("lstmp", meta, params.arrays())


def loads_params(text: str, path=None):
    """Returns ``(params, labels)``; ``labels`` is ``None`` if absent."""
    kind, meta, arrays = serialization.loads(text, VECTOR_NAMES, path)
    if kind != "lstmp":
        raise ValidationError(f"expected an lstmp model, found kind {kind!r}")
    labels = meta.get("labels")
    return LstmpParams(**arrays), labels


def save_params(path, params: LstmpParams, labels=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_params(params, labels))


def load_params(path):
    with open(path, "r", encoding="utf-8") as fh:
        return loads_params(fh.read(), path)
