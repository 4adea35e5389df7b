"""Anomaly scores, AUC/pAUC, standardization, ensembling and noise-burst contamination."""

from __future__ import annotations

import csv
import io
import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .data import FrameSequence, rng_for
from .density import logpdf_batch
from .errors import InvalidArgument, ParseError
from .network import ModelWeights, head_outputs
from .training import recording_windows

SCORE_COLUMNS = ("recording_id", "machine_id", "model_id", "score", "label")
EVAL_COLUMNS = ("machine_id", "model_id", "auc", "pauc", "p", "n_neg", "n_pos")
DEFAULT_P = 0.1


@dataclass
class ScoreReport:
    recording_id: str
    machine_id: str
    model_id: str
    score: float
    n_windows: int = 1
    label: str = "unknown"

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise InvalidArgument(f"score for {self.recording_id!r} is not finite")
        if self.n_windows < 1:
            raise InvalidArgument("a score needs at least one window")


@dataclass
class EvalResult:
    auc: float
    pauc: float
    p: float
    n_neg: int
    n_pos: int
    machine_id: str = ""
    model_id: str = ""


# ---------------------------------------------------------------------------
# scoring


def window_nll(weights: ModelWeights, recording) -> np.ndarray:
    """NLL of every next-frame prediction in a recording."""
    values = recording.values if isinstance(recording, FrameSequence) else np.asarray(recording, dtype=np.float64)
    x, y = recording_windows(values, weights.config.seq_len)
    return -logpdf_batch(y, head_outputs(x, weights))


def anomaly_score(weights: ModelWeights, recording: FrameSequence, model_id: str = "") -> ScoreReport:
    """Mean next-frame NLL over all stride-1 windows of the recording."""
    nll = window_nll(weights, recording)
    return ScoreReport(
        recording.recording_id, recording.machine_id, model_id, float(np.mean(nll)), len(nll), recording.label
    )


def score_recordings(weights: ModelWeights, recordings, model_id: str = ""):
    """Score every long-enough recording; returns ``(reports, skipped ids)``."""
    reports, skipped = [], []
    need = weights.config.seq_len + 1
    for rec in recordings:
        if rec.n_frames < need:
            skipped.append(rec.recording_id)
            continue
        reports.append(anomaly_score(weights, rec, model_id))
    return reports, skipped


# ---------------------------------------------------------------------------
# ROC metrics; H(0) = 0, ties earn nothing


def _check_classes(neg, pos):
    neg = np.asarray(neg, dtype=np.float64).ravel()
    pos = np.asarray(pos, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise InvalidArgument("AUC needs at least one negative and one positive score")
    return neg, pos


def _n_top(p: float, n_neg: int) -> int:
    if not 0 < p <= 1:
        raise InvalidArgument(f"p must lie in (0, 1], got {p}")
    k = math.floor(p * n_neg)
    if k < 1:
        raise InvalidArgument(f"floor(p * N-) = floor({p} * {n_neg}) = 0; pAUC undefined")
    return k


def _wins(neg_sorted: np.ndarray, pos: np.ndarray) -> int:
    # number of (neg, pos) pairs with pos strictly above neg
    return int(np.searchsorted(neg_sorted, pos, side="left").sum())


def auc(neg, pos) -> float:
    neg, pos = _check_classes(neg, pos)
    return _wins(np.sort(neg), pos) / (neg.size * pos.size)


def pauc(neg, pos, p: float = DEFAULT_P) -> float:
    """AUC with thresholds limited to the ``floor(p * N-)`` highest normal scores."""
    neg, pos = _check_classes(neg, pos)
    k = _n_top(p, neg.size)
    top = np.sort(neg)[neg.size - k :]
    return _wins(top, pos) / (k * pos.size)


def auc_reference(neg, pos) -> float:
    """Double-loop definition, for testing the sort-based version."""
    neg, pos = _check_classes(neg, pos)
    count = 0
    for a in neg:
        for b in pos:
            if b - a > 0:
                count += 1
    return count / (neg.size * pos.size)


def pauc_reference(neg, pos, p: float = DEFAULT_P) -> float:
    neg, pos = _check_classes(neg, pos)
    k = _n_top(p, neg.size)
    ranked = sorted(neg.tolist(), reverse=True)[:k]
    count = 0
    for a in ranked:
        for b in pos:
            if b - a > 0:
                count += 1
    return count / (k * pos.size)


def evaluate(reports, p: float = DEFAULT_P):
    """One EvalResult per (machine_id, model_id), in first-seen order.

    Labels must be ``normal`` or ``anomaly``.
    """
    groups = OrderedDict()
    for r in reports:
        if r.label not in ("normal", "anomaly"):
            raise InvalidArgument(f"recording {r.recording_id!r} has label {r.label!r}; evaluation needs normal/anomaly")
        groups.setdefault((r.machine_id, r.model_id), ([], []))[r.label == "anomaly"].append(r.score)
    out = []
    for (machine, model), (neg, pos) in groups.items():
        out.append(EvalResult(auc(neg, pos), pauc(neg, pos, p), p, len(neg), len(pos), machine, model))
    return out


# ---------------------------------------------------------------------------
# standardization and ensembling


def standardize(train_scores, eval_scores) -> np.ndarray:
    """Centre and scale by the mean and population std of ``train_scores``."""
    train = np.asarray(train_scores, dtype=np.float64)
    if train.size == 0:
        raise InvalidArgument("no training scores")
    std = float(np.std(train))
    if not std > 0:
        raise InvalidArgument("training scores have zero variance")
    return (np.asarray(eval_scores, dtype=np.float64) - np.mean(train)) / std


def standardize_reports(train_reports, eval_reports):
    """Standardize each machine's eval scores with that machine's training scores."""
    by_machine = {}
    for r in train_reports:
        by_machine.setdefault(r.machine_id, []).append(r.score)
    out = []
    for r in eval_reports:
        if r.machine_id not in by_machine:
            raise InvalidArgument(f"no training scores for machine {r.machine_id!r}")
        z = float(standardize(by_machine[r.machine_id], [r.score])[0])
        out.append(ScoreReport(r.recording_id, r.machine_id, r.model_id, z, r.n_windows, r.label))
    return out


def _combine(stack: np.ndarray, mode: str) -> np.ndarray:
    if mode == "mean":
        return stack.mean(axis=0)
    if mode == "max":
        return stack.max(axis=0)
    raise InvalidArgument(f"ensemble mode must be 'mean' or 'max', got {mode!r}")


def ensemble(score_lists, mode: str = "mean", model_id: str | None = None):
    """Elementwise mean or max over k score lists.

    Lists of ScoreReport are aligned by recording id (the output follows the
    first list's order); plain numeric sequences must have equal length.
    """
    if len(score_lists) == 0:
        raise InvalidArgument("ensemble needs at least one score list")
    first = score_lists[0]
    if len(first) and isinstance(first[0], ScoreReport):
        ids = [r.recording_id for r in first]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("duplicate recording ids in a score list")
        columns = []
        for lst in score_lists:
            table = {r.recording_id: r for r in lst}
            if len(table) != len(lst) or set(table) != set(ids):
                raise InvalidArgument("score lists cover different recordings")
            columns.append([table[i].score for i in ids])
        combined = _combine(np.array(columns), mode)
        name = model_id if model_id is not None else f"{mode}(" + "+".join(sorted({r.model_id for lst in score_lists for r in lst})) + ")"
        return [
            ScoreReport(r.recording_id, r.machine_id, name, float(v), r.n_windows, r.label)
            for r, v in zip(first, combined)
        ]
    arrays = [np.asarray(s, dtype=np.float64) for s in score_lists]
    if any(a.shape != arrays[0].shape for a in arrays):
        raise InvalidArgument("score lists have different lengths")
    return _combine(np.stack(arrays), mode)


# ---------------------------------------------------------------------------
# contamination


def burst_mask(lengths, fraction: float, seed: int, mean_burst: float = 5.0):
    """Choose exactly ``floor(fraction * sum(lengths))`` frames in contiguous bursts.

    Each burst starts at a uniformly chosen clean frame and extends over a
    geometric number of frames (mean ``mean_burst``) inside its recording,
    skipping frames already chosen and stopping at the remaining budget.
    """
    if not 0 <= fraction <= 1:
        raise InvalidArgument(f"fraction must lie in [0, 1], got {fraction}")
    if mean_burst < 1:
        raise InvalidArgument("mean burst length must be >= 1")
    lengths = [int(n) for n in lengths]
    total = sum(lengths)
    budget = math.floor(fraction * total)
    flat = np.zeros(total, dtype=bool)
    bounds = np.cumsum([0] + lengths)
    owner = np.repeat(np.arange(len(lengths)), lengths)
    rng = rng_for(seed, "bursts")
    remaining = budget
    while remaining > 0:
        free = np.flatnonzero(~flat)
        start = int(free[rng.integers(free.size)])
        length = int(rng.geometric(1.0 / mean_burst))
        end = min(bounds[owner[start] + 1], start + length)
        seg = np.flatnonzero(~flat[start:end])[:remaining] + start
        flat[seg] = True
        remaining -= seg.size
    return [flat[bounds[i] : bounds[i + 1]] for i in range(len(lengths))]


def inject_noise_bursts(data, fraction: float = 0.10, sigma2: float = 5.0, seed: int = 0, mean_burst: float = 5.0):
    """Add N(0, sigma2) noise to every feature of bursty selected frames.

    Returns ``(contaminated copies, masks)`` with one boolean mask per recording.
    """
    if not sigma2 > 0:
        raise InvalidArgument("sigma2 must be positive")
    seqs = list(data)
    masks = burst_mask([_n_frames(r) for r in seqs], fraction, seed, mean_burst)
    rng = rng_for(seed, "burst-noise")
    sd = math.sqrt(sigma2)
    out = []
    for rec, mask in zip(seqs, masks):
        values = (rec.values if isinstance(rec, FrameSequence) else np.asarray(rec, dtype=np.float64)).copy()
        k = int(mask.sum())
        if k:
            values[mask] += sd * rng.standard_normal((k, values.shape[1]))
        out.append(rec.with_values(values) if isinstance(rec, FrameSequence) else values)
    return out, masks


def _n_frames(rec) -> int:
    return rec.n_frames if isinstance(rec, FrameSequence) else np.asarray(rec).shape[0]


# ---------------------------------------------------------------------------
# CSV tables


def format_scores(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCORE_COLUMNS)
    for r in reports:
        w.writerow([r.recording_id, r.machine_id, r.model_id, "%.17g" % r.score, r.label])
    return buf.getvalue()


def parse_scores(text: str):
    """Parse a score table. Error row numbers count data rows from 1."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != SCORE_COLUMNS:
        raise ParseError(f"score table header must be {','.join(SCORE_COLUMNS)}", row=0)
    out = []
    for i, row in enumerate(reader, start=1):
        if not row:
            continue
        if len(row) != len(SCORE_COLUMNS):
            raise ParseError(f"row {i} has {len(row)} fields, expected {len(SCORE_COLUMNS)}", row=i)
        rid, machine, model, score, label = row
        try:
            value = float(score)
        except ValueError:
            raise ParseError(f"row {i} has a non-numeric score", row=i) from None
        if label not in ("normal", "anomaly", "unknown"):
            raise ParseError(f"row {i} has unknown label {label!r}", row=i)
        try:
            out.append(ScoreReport(rid, machine, model, value, 1, label))
        except InvalidArgument as exc:
            raise ParseError(f"row {i}: {exc}", row=i) from None
    return out


def format_eval(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for r in results:
        w.writerow([r.machine_id, r.model_id, "%.17g" % r.auc, "%.17g" % r.pauc, "%.17g" % r.p, r.n_neg, r.n_pos])
    return buf.getvalue()
