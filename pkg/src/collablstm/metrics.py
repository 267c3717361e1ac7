"""Trial construction, EER for verification and IDR/IDE for identification."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ValidationError


@dataclass(eq=False)
class TrialSet:
    """Full cross product of enrollment labels and test utterances.

    ``target[e, t]`` is true when test utterance ``t`` belongs to
    enrollment label ``e``.
    """

    enroll_labels: list
    test_ids: list
    target: np.ndarray

    @property
    def n_target(self) -> int:
        return int(self.target.sum())

    @property
    def n_imposter(self) -> int:
        return int(self.target.size - self.target.sum())

    def __len__(self):
        return self.target.size

    def __iter__(self):
        for e, lab in enumerate(self.enroll_labels):
            for t, utt in enumerate(self.test_ids):
                yield lab, utt, bool(self.target[e, t])


def build_sre_trials(enroll_labels, test_utts) -> TrialSet:
    """Pair every enrollment label with every test utterance.

    ``enroll_labels`` may hold labels or objects with a ``label`` attribute;
    ``test_utts`` holds ``(utt_id, speaker)`` pairs or objects with
    ``utt_id`` and ``speaker``.
    """
    labels = [getattr(e, "label", e) for e in enroll_labels]
    pairs = [(u.utt_id, u.speaker) if hasattr(u, "speaker") else tuple(u) for u in test_utts]
    if not labels or not pairs:
        raise ValidationError("trial construction needs non-empty enrollment and test sets")
    ids = [p[0] for p in pairs]
    spk = np.array([p[1] for p in pairs], dtype=object)
    target = np.stack([spk == lab for lab in labels]).astype(bool)
    return TrialSet(labels, ids, target)


# --- EER ---------------------------------------------------------------------------

def _split(scores, is_target):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    is_target = np.asarray(is_target, dtype=bool).ravel()
    if scores.shape != is_target.shape:
        raise ValidationError("scores and target flags differ in length")
    tar, non = np.sort(scores[is_target]), np.sort(scores[~is_target])
    if len(tar) == 0 or len(non) == 0:
        raise ValidationError("EER needs at least one target and one imposter trial")
    return scores, tar, non


def candidate_thresholds(scores) -> np.ndarray:
    """Lowest score, midpoints between consecutive distinct scores, and a value above the highest.

    A midpoint of two adjacent floats rounds onto the lower one; the upper
    score is used instead, which yields the same operating point.
    """
    u = np.unique(scores)
    top = np.nextafter(u[-1], np.inf)
    mid = (u[:-1] + u[1:]) / 2.0
    mid = np.where(mid > u[:-1], mid, u[1:])
    return np.concatenate([u[:1], mid, [top]])


def det_points(scores, is_target):
    """``(thresholds, far, frr)`` at every candidate threshold.

    ``frr`` counts targets strictly below the threshold, ``far`` imposters at
    or above it.
    """
    scores, tar, non = _split(scores, is_target)
    th = candidate_thresholds(scores)
    frr = np.searchsorted(tar, th, side="left") / len(tar)
    far = (len(non) - np.searchsorted(non, th, side="left")) / len(non)
    return th, far, frr


def compute_eer(scores, is_target):
    """Equal error rate and its threshold.

    Finds the first candidate threshold where FRR >= FAR and interpolates
    linearly against the previous one.  Returns ``(eer, threshold)``.
    """
    th, far, frr = det_points(scores, is_target)
    j = int(np.argmax(frr >= far))
    if j == 0:
        return float(frr[0]), float(th[0])
    d0 = far[j - 1] - frr[j - 1]
    d1 = far[j] - frr[j]
    alpha = d0 / (d0 - d1)
    eer = frr[j - 1] + alpha * (frr[j] - frr[j - 1])
    threshold = th[j - 1] + alpha * (th[j] - th[j - 1])
    return float(eer), float(threshold)


def write_det_points(path, scores, is_target):
    th, far, frr = det_points(scores, is_target)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("threshold\tfar\tfrr\n")
        for a, b, c in zip(th, far, frr):
            fh.write(f"{a!r}\t{b!r}\t{c!r}\n")


# --- identification -------------------------------------------------------------------

def compute_idr(predictions, truths):
    """``(idr, ide)``: error fraction and error count."""
    predictions, truths = list(predictions), list(truths)
    if len(predictions) != len(truths):
        raise ValidationError("predictions and truths differ in length")
    if not truths:
        raise ValidationError("no identification trials")
    ide = sum(p != t for p, t in zip(predictions, truths))
    return ide / len(truths), ide


# --- reports ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    system: str
    condition: str
    backend: str
    eer: float | None = None
    threshold_at_eer: float | None = None
    idr: float | None = None
    ide: int | None = None
    n_target: int | None = None
    n_imposter: int | None = None
    n_ident: int | None = None

    def __post_init__(self):
        if self.eer is not None and not 0 <= self.eer <= 1:
            raise ValidationError(f"EER {self.eer} outside [0, 1]")
        if self.ide is not None and self.n_ident is not None and self.ide > self.n_ident:
            raise ValidationError("more identification errors than trials")


REPORT_FIELDS = [f.name for f in fields(MetricReport)]


def _cell(v):
    if v is None:
        return "-"
    return repr(v) if isinstance(v, float) else str(v)


def write_reports(path, reports):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(REPORT_FIELDS) + "\n")
        for r in reports:
            fh.write("\t".join(_cell(getattr(r, k)) for k in REPORT_FIELDS) + "\n")


def read_reports(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            vals = dict(zip(header, line.rstrip("\n").split("\t")))
            kw = {}
            for k, v in vals.items():
                if v == "-":
                    kw[k] = None
                elif k in ("eer", "threshold_at_eer", "idr"):
                    kw[k] = float(v)
                elif k in ("ide", "n_target", "n_imposter", "n_ident"):
                    kw[k] = int(v)
                else:
                    kw[k] = v
            out.append(MetricReport(**kw))
    return out


def format_table(title, row_labels, col_groups, values, fmt="{}") -> str:
    """Aligned grid: ``col_groups`` is ``[(group, [sub, ...]), ...]`` and
    ``values[row][(group, sub)]`` holds the cell value."""
    headers = [f"{g}:{s}" for g, subs in col_groups for s in subs]
    keys = [(g, s) for g, subs in col_groups for s in subs]
    label_w = max([len(title)] + [len(r) for r in row_labels])
    widths = [max(len(h), 6) for h in headers]
    lines = [title.ljust(label_w) + "  " + "  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    lines.append("-" * len(lines[0]))
    for r in row_labels:
        cells = []
        for k, w in zip(keys, widths):
            v = values.get(r, {}).get(k)
            cells.append(("-" if v is None else fmt.format(v)).rjust(w))
        lines.append(r.ljust(label_w) + "  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def report_dict(r: MetricReport) -> dict:
    return asdict(r)
