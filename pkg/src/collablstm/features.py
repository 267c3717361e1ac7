"""Feature sequences, the synthetic speaker x language corpus and text archives.

A corpus is a list of :class:`FeatureSequence` objects plus a
:class:`CorpusManifest` assigning every utterance to a split.  Frame ``t`` of
a generated utterance is::

    x_t = mu_language + mu_speaker + e_t,   e_t = a * e_{t-1} + innovation

so language and speaker separability are both directly tunable.

Archive layout (one block per utterance)::

    utt_id speaker language T D
    v_11 v_12 ... v_1D
    ...
    v_T1 v_T2 ... v_TD

Values are written with ``repr`` so a save/load cycle is exact.
"""
from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import ArchiveFormatError, ValidationError

SPLITS = ("train", "enroll", "test")
FRAMES_PER_SECOND = 100
SHORT_FRAMES = FRAMES_PER_SECOND


@dataclass(eq=False)
class FeatureSequence:
    utt_id: str
    speaker: str
    language: str
    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2:
            raise ValidationError(f"{self.utt_id}: frames must be a T x D matrix")
        if self.frames.shape[0] < 1:
            raise ValidationError(f"{self.utt_id}: empty sequence")
        if not np.all(np.isfinite(self.frames)):
            raise ValidationError(f"{self.utt_id}: non-finite feature values")
        for name in ("utt_id", "speaker", "language"):
            _check_token(getattr(self, name), name)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.num_frames

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.utt_id == other.utt_id
            and self.speaker == other.speaker
            and self.language == other.language
            and self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
        )

    def __repr__(self):
        return (f"FeatureSequence({self.utt_id!r}, speaker={self.speaker!r}, "
                f"language={self.language!r}, T={self.num_frames}, D={self.dim})")


class ManifestEntry(NamedTuple):
    utt_id: str
    speaker: str
    language: str
    split: str


@dataclass
class CorpusManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.entries = [ManifestEntry(*e) for e in self.entries]
        seen = set()
        for e in self.entries:
            if e.utt_id in seen:
                raise ValidationError(f"duplicate utt_id {e.utt_id!r} in manifest")
            seen.add(e.utt_id)
            if e.split not in SPLITS:
                raise ValidationError(f"{e.utt_id}: unknown split {e.split!r}")
            for name in ("utt_id", "speaker", "language"):
                _check_token(getattr(e, name), name)

    def __len__(self):
        return len(self.entries)

    def split_ids(self, split: str) -> list:
        return [e.utt_id for e in self.entries if e.split == split]

    def speakers(self, split: str | None = None) -> list:
        return _ordered_unique(e.speaker for e in self.entries
                               if split is None or e.split == split)

    def languages(self) -> list:
        return sorted(set(e.language for e in self.entries))

    def select(self, seqs: Sequence[FeatureSequence], split: str) -> list:
        wanted = set(self.split_ids(split))
        return [s for s in seqs if s.utt_id in wanted]


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic corpus.

    ``channel_noise_scale`` is the marginal per-dimension standard deviation
    of the AR(1) noise, so ``temporal_mixing`` changes correlation but not
    level.  The last ``n_eval_speakers_per_language`` speakers of each
    language are held out of training; their first ``n_enroll_per_speaker``
    utterances are enrollment, the rest are test.
    """

    n_speakers_per_language: int = 20
    n_utts_per_speaker: int = 16
    frames_per_utt: tuple = (150, 300)
    dim: int = 40
    language_shift_scale: float = 2.0
    speaker_shift_scale: float = 3.0
    channel_noise_scale: float = 1.0
    temporal_mixing: float = 0.5
    seed: int = 0
    n_languages: int = 2
    n_eval_speakers_per_language: int = 8
    n_enroll_per_speaker: int = 4

    def validate(self):
        def positive(name):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")

        for name in ("n_speakers_per_language", "n_utts_per_speaker", "n_languages"):
            positive(name)
        lo, hi = self.frames_per_utt
        if not (1 <= lo <= hi):
            raise ValidationError(f"frames_per_utt must satisfy 1 <= min <= max, got {self.frames_per_utt}")
        if self.dim < 2:
            raise ValidationError(f"dim must be >= 2, got {self.dim}")
        for name in ("language_shift_scale", "speaker_shift_scale", "channel_noise_scale"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be a finite value >= 0, got {v}")
        if not (0 <= self.temporal_mixing < 1):
            raise ValidationError(f"temporal_mixing must lie in [0, 1), got {self.temporal_mixing}")
        if not (0 <= self.n_eval_speakers_per_language <= self.n_speakers_per_language):
            raise ValidationError("n_eval_speakers_per_language must lie in [0, n_speakers_per_language]")
        if not (0 <= self.n_enroll_per_speaker <= self.n_utts_per_speaker):
            raise ValidationError("n_enroll_per_speaker must lie in [0, n_utts_per_speaker]")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        return self


def _check_token(value, name):
    if not isinstance(value, str) or not value or any(ch.isspace() for ch in value):
        raise ValidationError(f"{name} must be a non-empty string without whitespace, got {value!r}")


def _ordered_unique(items: Iterable) -> list:
    return list(dict.fromkeys(items))


def language_names(n: int) -> list:
    return [f"lang{k}" for k in range(n)]


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate_corpus(spec: SynthSpec):
    """Draw a synthetic corpus; a pure function of ``spec``.

    Language means are centred across languages and rescaled so each sits at
    distance ``language_shift_scale`` from the grand mean (two languages end
    up antipodal).  Speaker means are isotropic directions of norm
    ``speaker_shift_scale``.

    Returns ``(manifest, sequences)``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    langs = language_names(spec.n_languages)

    raw = rng.standard_normal((spec.n_languages, spec.dim))
    if spec.n_languages > 1:
        raw -= raw.mean(axis=0)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    lang_means = spec.language_shift_scale * raw / norms

    a = spec.temporal_mixing
    gain = spec.channel_noise_scale * math.sqrt(1.0 - a * a)
    lo, hi = spec.frames_per_utt
    n_train_spk = spec.n_speakers_per_language - spec.n_eval_speakers_per_language

    entries, seqs = [], []
    for li, lang in enumerate(langs):
        for k in range(spec.n_speakers_per_language):
            spk = f"{lang}-spk{k:03d}"
            spk_mean = spec.speaker_shift_scale * _unit(rng, spec.dim)
            held_out = k >= n_train_spk
            for u in range(spec.n_utts_per_speaker):
                utt = f"{spk}-utt{u:03d}"
                T = int(rng.integers(lo, hi + 1))
                e0 = spec.channel_noise_scale * rng.standard_normal(spec.dim)
                innov = rng.standard_normal((T, spec.dim))
                noise = lfilter([gain], [1.0, -a], innov, axis=0, zi=(a * e0)[None, :])[0]
                frames = lang_means[li] + spk_mean + noise
                if not held_out:
                    split = "train"
                elif u < spec.n_enroll_per_speaker:
                    split = "enroll"
                else:
                    split = "test"
                entries.append(ManifestEntry(utt, spk, lang, split))
                seqs.append(FeatureSequence(utt, spk, lang, frames))
    return CorpusManifest(entries), seqs


def crop_short(seq: FeatureSequence, n_frames: int = SHORT_FRAMES, offset_rule: str = "head",
               seed: int = 0) -> FeatureSequence:
    """Return a contiguous window of ``min(T, n_frames)`` frames.

    ``offset_rule`` is ``head``, ``centered`` or ``seeded-random``; the random
    window depends only on ``seed`` and the utterance id.
    """
    if n_frames < 1:
        raise ValidationError(f"n_frames must be >= 1, got {n_frames}")
    T = seq.num_frames
    if T <= n_frames:
        return seq
    slack = T - n_frames
    if offset_rule == "head":
        start = 0
    elif offset_rule == "centered":
        start = slack // 2
    elif offset_rule in ("seeded-random", "random"):
        rng = np.random.default_rng([seed, zlib.crc32(seq.utt_id.encode())])
        start = int(rng.integers(0, slack + 1))
    else:
        raise ValidationError(f"unknown offset_rule {offset_rule!r}")
    return FeatureSequence(seq.utt_id, seq.speaker, seq.language,
                           seq.frames[start:start + n_frames].copy())


# --- text archives -----------------------------------------------------------

def _fmt_row(row) -> str:
    return " ".join(repr(v) for v in row.tolist())


def write_features(path, seqs: Sequence[FeatureSequence]):
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(f"{s.utt_id} {s.speaker} {s.language} {s.num_frames} {s.dim}\n")
            for row in s.frames:
                fh.write(_fmt_row(row))
                fh.write("\n")


def read_features(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    seqs, seen, dim = [], set(), None
    n = 0
    while n < len(lines):
        lineno = n + 1
        parts = lines[n].split()
        prev = f" (after utterance {seqs[-1].utt_id!r})" if seqs else ""
        if len(parts) != 5:
            raise ArchiveFormatError(f"malformed header, expected 'utt_id speaker language T D'{prev}",
                                     path, lineno)
        utt, spk, lang, t_str, d_str = parts
        try:
            T, D = int(t_str), int(d_str)
        except ValueError:
            raise ArchiveFormatError(f"malformed header for {utt!r}: T and D must be integers{prev}",
                                     path, lineno) from None
        if T < 1 or D < 1:
            raise ArchiveFormatError(f"utterance {utt!r}: T and D must be >= 1", path, lineno)
        if utt in seen:
            raise ArchiveFormatError(f"duplicate utt_id {utt!r}", path, lineno)
        if dim is not None and D != dim:
            raise ArchiveFormatError(f"utterance {utt!r}: dimension {D} differs from corpus dimension {dim}",
                                     path, lineno)
        if n + T > len(lines) - 1:
            raise ArchiveFormatError(
                f"utterance {utt!r}: header declares {T} frames but only {len(lines) - n - 1} lines remain",
                path, lineno)
        frames = np.empty((T, D))
        for t in range(T):
            row = lines[n + 1 + t].split()
            if len(row) != D:
                raise ArchiveFormatError(
                    f"utterance {utt!r}: frame {t} has {len(row)} values, expected {D} "
                    f"(frame count in header may be wrong)", path, n + 2 + t)
            try:
                frames[t] = [float(v) for v in row]
            except ValueError:
                raise ArchiveFormatError(f"utterance {utt!r}: non-numeric value in frame {t}",
                                         path, n + 2 + t) from None
        try:
            seqs.append(FeatureSequence(utt, spk, lang, frames))
        except ValidationError as exc:
            raise ArchiveFormatError(str(exc), path, lineno) from None
        seen.add(utt)
        dim = D
        n += T + 1
    return seqs


def write_manifest(path, manifest: CorpusManifest):
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.entries:
            fh.write("\t".join(e) + "\n")


def read_manifest(path) -> CorpusManifest:
    entries, seen = [], set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ArchiveFormatError("expected utt_id<TAB>speaker<TAB>language<TAB>split", path, lineno)
            if parts[0] in seen:
                raise ArchiveFormatError(f"duplicate utt_id {parts[0]!r}", path, lineno)
            if parts[3] not in SPLITS:
                raise ArchiveFormatError(f"unknown split {parts[3]!r}", path, lineno)
            seen.add(parts[0])
            entries.append(ManifestEntry(*parts))
    return CorpusManifest(entries)


FEATS_NAME = "feats.txt"
MANIFEST_NAME = "manifest.tsv"


def save_archive(directory, manifest: CorpusManifest, seqs: Sequence[FeatureSequence]):
    """Write ``feats.txt`` and ``manifest.tsv`` under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    write_features(os.path.join(directory, FEATS_NAME), seqs)
    write_manifest(os.path.join(directory, MANIFEST_NAME), manifest)


def load_archive(directory):
    manifest = read_manifest(os.path.join(directory, MANIFEST_NAME))
    seqs = read_features(os.path.join(directory, FEATS_NAME))
    ids = {s.utt_id for s in seqs}
    missing = [e.utt_id for e in manifest.entries if e.utt_id not in ids]
    if missing:
        raise ArchiveFormatError(f"manifest lists {len(missing)} utterances absent from features, "
                                 f"first {missing[0]!r}", os.path.join(directory, MANIFEST_NAME))
    return manifest, seqs
