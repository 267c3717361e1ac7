"""r-vectors: per-utterance means of the concatenated projections ``[r_t, p_t]``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lstmp
from .errors import ArchiveFormatError, ValidationError
from .multitask import MultiTaskModel, mt_run

TASKS = ("language", "speaker")


@dataclass(eq=False)
class RVector:
    values: np.ndarray
    task: str
    utt_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}, got {self.task!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError(f"{self.utt_id}: non-finite r-vector")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(eq=False)
class EnrollModel:
    label: str
    centroid: np.ndarray
    n_utts: int


def _task_of(model, branch):
    if isinstance(model, MultiTaskModel):
        if branch in ("lre", "language", "l"):
            return "lre", "language"
        if branch in ("sre", "speaker", "s"):
            return "sre", "speaker"
        raise ValidationError(f"unknown branch {branch!r}")
    if branch in ("lre", "language", "l"):
        return None, "language"
    if branch in ("sre", "speaker", "s"):
        return None, "speaker"
    raise ValidationError(f"single-task extraction needs branch 'lre' or 'sre', got {branch!r}")


def branch_traces(model, seqs, branch: str, batch_size: int = 64):
    """Yield ``(chunk, trace, mask)`` for zero-padded batches of ``seqs``.

    For a collaborative model the coupled recursion runs and the trace of the
    requested branch is returned.
    """
    which, _ = _task_of(model, branch)
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start:start + batch_size]
        mats = [np.asarray(getattr(s, "frames", s), dtype=np.float64) for s in chunk]
        T = max(m.shape[0] for m in mats)
        X = np.zeros((T, len(chunk), mats[0].shape[1]))
        mask = np.zeros((T, len(chunk)))
        for b, m in enumerate(mats):
            X[:m.shape[0], b] = m
            mask[:m.shape[0], b] = 1.0
        if which is None:
            trace = lstmp.run(model, X)
        else:
            tl, ts = mt_run(model, X)
            trace = tl if which == "lre" else ts
        yield chunk, trace, mask


def extract_rvector(model, seq, branch: str = "sre") -> RVector:
    """Mean over all frames of ``concat(r_t, p_t)`` for one utterance."""
    frames = np.asarray(getattr(seq, "frames", seq), dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValidationError("cannot extract an r-vector from an empty sequence")
    which, task = _task_of(model, branch)
    if which is None:
        trace = lstmp.run(model, frames)
    else:
        tl, ts = mt_run(model, frames)
        trace = tl if which == "lre" else ts
    values = np.concatenate([trace.r, trace.p], axis=-1).mean(axis=0)
    return RVector(values, task, getattr(seq, "utt_id", "utt"))


def extract_rvectors(model, seqs, branch: str = "sre", batch_size: int = 64) -> list:
    """Batched :func:`extract_rvector`; padding frames are excluded from the mean."""
    _, task = _task_of(model, branch)
    out = []
    for chunk, trace, mask in branch_traces(model, list(seqs), branch, batch_size):
        rp = np.concatenate([trace.r, trace.p], axis=-1)
        sums = (rp * mask[..., None]).sum(axis=0)
        means = sums / mask.sum(axis=0)[:, None]
        out.extend(RVector(means[b], task, s.utt_id) for b, s in enumerate(chunk))
    return out


def enroll(groups: dict) -> list:
    """One centroid per label from ``{label: [RVector or array, ...]}``."""
    models = []
    for label, members in groups.items():
        if len(members) == 0:
            raise ValidationError(f"enrollment group {label!r} is empty")
        mat = np.stack([getattr(v, "values", v) for v in members]).astype(np.float64)
        models.append(EnrollModel(label, mat.mean(axis=0), len(members)))
    return models


def group_by(rvectors, labels) -> dict:
    groups = {}
    for v, lab in zip(rvectors, labels):
        groups.setdefault(lab, []).append(v)
    return groups


def write_rvectors(path, rvectors):
    with open(path, "w", encoding="utf-8") as fh:
        for v in rvectors:
            fh.write(f"{v.utt_id} {v.task} {v.dim} " + " ".join(repr(x) for x in v.values.tolist()) + "\n")


def read_rvectors(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise ArchiveFormatError("expected 'utt_id task dim v1 ... vdim'", path, lineno)
            utt, task, dim = parts[0], parts[1], parts[2]
            try:
                dim = int(dim)
                values = [float(x) for x in parts[3:]]
            except ValueError:
                raise ArchiveFormatError("non-numeric field", path, lineno) from None
            if len(values) != dim:
                raise ArchiveFormatError(f"{utt}: declared dim {dim} but found {len(values)} values", path, lineno)
            try:
                out.append(RVector(np.array(values), task, utt))
            except ValidationError as exc:
                raise ArchiveFormatError(str(exc), path, lineno) from None
    return out
