"""Post-processing, event decoding and detection metrics.

Scoring follows the intersection-based PSDS recipe: detections are matched
to ground truth by intersection ratios (``dtc``, ``gtc``, ``cttc``), per-class
ROC staircases are built over a threshold grid, and the score is the
normalised area under the effective TPR curve up to ``e_max`` false
positives per hour.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .model import Predictions, heads_from_logits
from .synthdata import FRAME_SECONDS, ClipAnnotation, Event

log = logging.getLogger(__name__)

TEMPERATURE = 2.1
MEDIAN_SCALE = 0.55
# class-wise lengths for the ten DCASE 2021 classes (alarm bell ... vacuum cleaner)
DCASE_MEDIAN_LENGTHS = (3, 28, 7, 4, 7, 22, 48, 19, 10, 50)
THRESHOLDS = np.linspace(0.01, 0.99, 50)


@dataclass(frozen=True)
class PsdsParams:
    dtc: float = 0.7
    gtc: float = 0.7
    cttc: float = 1.0
    alpha_ct: float = 0.0
    alpha_st: float = 1.0
    e_max: float = 100.0

    def __post_init__(self):
        for name in ("dtc", "gtc", "cttc"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.alpha_ct < 0 or self.alpha_st < 0:
            raise ConfigError("penalty weights must be non-negative")
        if self.e_max <= 0:
            raise ConfigError("e_max must be positive")


PSDS1 = PsdsParams(dtc=0.7, gtc=0.7, cttc=1.0, alpha_ct=0.0, alpha_st=1.0, e_max=100.0)
PSDS2 = PsdsParams(dtc=0.1, gtc=0.1, cttc=0.3, alpha_ct=0.5, alpha_st=1.0, e_max=100.0)


# ---------------------------------------------------------------- post-processing

def temperature_scale(preds: Predictions, tau: float) -> Predictions:
    """Recompute probabilities from logits divided by ``tau``."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if preds.strong_logits is None or preds.att_logits is None:
        raise ConfigError("temperature scaling needs the logits")
    sl = preds.strong_logits / tau
    al = preds.att_logits / tau
    strong, weak, _ = heads_from_logits(sl, al)
    return Predictions(strong, weak, preds.strong_logits, preds.att_logits)


def ensemble(preds_list) -> Predictions:
    """Element-wise mean of strong and weak probabilities across models."""
    preds_list = list(preds_list)
    if not preds_list:
        raise ConfigError("nothing to ensemble")
    shapes = {(p.strong.shape, p.weak.shape) for p in preds_list}
    if len(shapes) != 1:
        raise ShapeError(f"prediction shapes differ: {sorted(shapes)}")
    if len(preds_list) == 1:
        return preds_list[0]
    return Predictions(np.mean([p.strong for p in preds_list], axis=0),
                       np.mean([p.weak for p in preds_list], axis=0))


def median_length(avg_duration: float, frame_dur: float = FRAME_SECONDS) -> int:
    """0.55 * avg / frame, rounded and bumped to the next odd integer (at least 1)."""
    n = int(np.floor(MEDIAN_SCALE * avg_duration / frame_dur + 0.5))
    if n % 2 == 0:
        n += 1
    return max(n, 1)


def median_lengths_from_annotations(annotations, n_classes, frame_dur=FRAME_SECONDS):
    """Formula-derived filter length per class from mean event durations."""
    durs = [[] for _ in range(n_classes)]
    for ann in annotations:
        for e in ann.events:
            if e.onset is not None:
                durs[e.cls].append(e.offset - e.onset)
    return [median_length(float(np.mean(d)) if d else 0.0, frame_dur) for d in durs]


def median_filter(decisions, lengths, strict=True):
    """Class-wise 1-D median filter over time with edge replication.

    Output frame t takes the element of rank n//2 in the window that starts
    n//2 frames before t, so even windows lean one frame to the past. The
    edges are replicated as far as needed, also for windows longer than the
    signal. ``strict`` rejects even lengths; explicit per-class overrides may
    pass ``strict=False`` to use even windows as given.
    """
    decisions = np.asarray(decisions)
    lengths = [int(v) for v in np.broadcast_to(lengths, (decisions.shape[-1],))]
    out = np.empty_like(decisions)
    for c, n in enumerate(lengths):
        if n < 1 or (strict and n % 2 == 0):
            raise ConfigError(f"median filter length for class {c} must be a positive odd integer, got {n}")
        col = decisions[..., c]
        if n == 1:
            out[..., c] = col
            continue
        pad = [(0, 0)] * (col.ndim - 1) + [(n // 2, n - 1 - n // 2)]
        windows = np.lib.stride_tricks.sliding_window_view(np.pad(col, pad, mode="edge"), n, axis=-1)
        out[..., c] = np.partition(windows, n // 2, axis=-1)[..., n // 2]
    return out


def decode_events(strong_probs, threshold=0.5, frame_dur=FRAME_SECONDS, lengths=1, strict=True):
    """Binarise one clip's (T', C) probabilities, smooth, and extract runs as events."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    binary = (np.asarray(strong_probs) > threshold).astype(np.int8)
    binary = median_filter(binary, lengths, strict=strict)
    events = []
    for c in range(binary.shape[1]):
        col = np.concatenate([[0], binary[:, c], [0]])
        edges = np.flatnonzero(np.diff(col))
        for start, stop in zip(edges[::2], edges[1::2]):
            events.append(Event(c, float(start * frame_dur), float(stop * frame_dur)))
    events.sort(key=lambda e: (e.onset, e.cls))
    return events


def decode_batch(strong_probs, clip_ids, threshold=0.5, frame_dur=FRAME_SECONDS, lengths=1, strict=True):
    return {cid: decode_events(p, threshold, frame_dur, lengths, strict) for cid, p in zip(clip_ids, strong_probs)}


# ---------------------------------------------------------------- matching

def _overlap(a_on, a_off, b_on, b_off):
    return max(0.0, min(a_off, b_off) - max(a_on, b_on))


@dataclass
class MatchCounts:
    tp: np.ndarray        # (C,) ground-truth events detected
    fp: np.ndarray        # (C,) detections failing the detection tolerance
    ct: np.ndarray        # (C, C) cross-triggers: detection class -> ground-truth class
    n_gt: np.ndarray      # (C,)


def intersection_match(detections, ground_truth, n_classes, dtc, gtc, cttc=1.0) -> MatchCounts:
    """Count TP/FP/CT at one operating point.

    ``detections`` and ``ground_truth`` map clip_id -> list of Event.
    """
    tp = np.zeros(n_classes, dtype=int)
    fp = np.zeros(n_classes, dtype=int)
    ct = np.zeros((n_classes, n_classes), dtype=int)
    n_gt = np.zeros(n_classes, dtype=int)
    for clip_id in set(ground_truth) | set(detections):
        gts = ground_truth.get(clip_id, [])
        dets = detections.get(clip_id, [])
        for g in gts:
            n_gt[g.cls] += 1
        accepted = []
        for d in dets:
            dur = d.offset - d.onset
            same = sum(_overlap(d.onset, d.offset, g.onset, g.offset) for g in gts if g.cls == d.cls)
            if dur > 0 and same >= dtc * dur:
                accepted.append(d)
                continue
            fp[d.cls] += 1
            for c in range(n_classes):
                if c == d.cls:
                    continue
                cross = sum(_overlap(d.onset, d.offset, g.onset, g.offset) for g in gts if g.cls == c)
                if dur > 0 and cross > 0 and cross >= cttc * dur:
                    ct[d.cls, c] += 1
        for g in gts:
            covered = sum(_overlap(d.onset, d.offset, g.onset, g.offset) for d in accepted if d.cls == g.cls)
            if covered >= gtc * (g.offset - g.onset):
                tp[g.cls] += 1
    return MatchCounts(tp, fp, ct, n_gt)


def roc_points(counts_per_threshold, params: PsdsParams, duration_hours: float):
    """Per-class (eFPR, TPR) operating points, one row per threshold; classes without GT are dropped."""
    tpr, efpr = [], []
    for m in counts_per_threshold:
        valid = m.n_gt > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            rate_tp = np.where(valid, m.tp / np.maximum(m.n_gt, 1), 0.0)
        fpr = m.fp / duration_hours
        n = len(m.tp)
        if n > 1:
            ct_rate = (m.ct.sum(axis=1) - np.diag(m.ct)) / duration_hours / (n - 1)
        else:
            ct_rate = np.zeros(n)
        tpr.append(rate_tp)
        efpr.append(fpr + params.alpha_ct * ct_rate)
    valid = counts_per_threshold[0].n_gt > 0
    if not valid.all():
        log.warning("classes %s have no ground truth and are excluded", np.flatnonzero(~valid).tolist())
    return np.array(efpr)[:, valid], np.array(tpr)[:, valid]


def _staircase(efpr, tpr, grid):
    """Best TPR achievable at each eFPR in ``grid`` (ROC as a step function)."""
    order = np.argsort(efpr, kind="stable")
    x = efpr[order]
    y = np.maximum.accumulate(tpr[order])
    pos = np.searchsorted(x, grid, side="right") - 1
    return np.where(pos >= 0, y[np.clip(pos, 0, None)], 0.0)


def psds_from_points(efpr, tpr, params: PsdsParams) -> float:
    """Normalised area under mean-minus-std TPR over [0, e_max]."""
    if efpr.shape[1] == 0:
        return 0.0
    breaks = np.unique(np.concatenate([[0.0], efpr[(efpr >= 0) & (efpr < params.e_max)].ravel()]))
    widths = np.diff(np.append(breaks, params.e_max))
    per_class = np.stack([_staircase(efpr[:, c], tpr[:, c], breaks) for c in range(efpr.shape[1])], axis=1)
    effective = per_class.mean(axis=1) - params.alpha_st * per_class.std(axis=1)
    effective = np.clip(effective, 0.0, 1.0)
    return float(np.sum(effective * widths) / params.e_max)


def psds(counts_per_threshold, params: PsdsParams, duration_hours: float) -> float:
    if len(counts_per_threshold) < 1:
        raise ConfigError("need at least one operating point")
    efpr, tpr = roc_points(counts_per_threshold, params, duration_hours)
    return psds_from_points(efpr, tpr, params)


def psds_curve(counts_per_threshold, params, duration_hours, thresholds):
    """Rows (threshold, class, tpr, efpr) for the raw ROC CSV."""
    efpr, tpr = roc_points(counts_per_threshold, params, duration_hours)
    rows = []
    for i, th in enumerate(thresholds):
        for c in range(tpr.shape[1]):
            rows.append((float(th), c, float(tpr[i, c]), float(efpr[i, c])))
    return rows


def psds_from_probs(strong_probs, clip_ids, ground_truth, n_classes, params: PsdsParams,
                    lengths=1, thresholds=THRESHOLDS, frame_dur=FRAME_SECONDS, clip_seconds=10.0,
                    strict=True, return_counts=False):
    counts = []
    for th in thresholds:
        dets = decode_batch(strong_probs, clip_ids, th, frame_dur, lengths, strict)
        counts.append(intersection_match(dets, ground_truth, n_classes, params.dtc, params.gtc, params.cttc))
    hours = len(clip_ids) * clip_seconds / 3600.0
    score = psds(counts, params, hours)
    return (score, counts) if return_counts else score


# ---------------------------------------------------------------- collar F1

def event_f1(detections, ground_truth, n_classes, collar=0.2):
    """Collar-based event F1 per class and macro average.

    A detection matches an unmatched ground-truth event of the same class when
    its onset is within ``collar`` and its offset within max(collar, 0.2 x GT
    duration). Matching is greedy in onset order. Classes absent from both the
    ground truth and the detections are left out of the macro average.
    """
    tp = np.zeros(n_classes)
    n_det = np.zeros(n_classes)
    n_ref = np.zeros(n_classes)
    for clip_id in set(ground_truth) | set(detections):
        refs = sorted(ground_truth.get(clip_id, []), key=lambda e: (e.onset, e.offset))
        dets = sorted(detections.get(clip_id, []), key=lambda e: (e.onset, e.offset))
        used = [False] * len(refs)
        for g in refs:
            n_ref[g.cls] += 1
        for d in dets:
            n_det[d.cls] += 1
            for j, g in enumerate(refs):
                if used[j] or g.cls != d.cls:
                    continue
                off_tol = max(collar, 0.2 * (g.offset - g.onset))
                if abs(d.onset - g.onset) <= collar and abs(d.offset - g.offset) <= off_tol:
                    used[j] = True
                    tp[d.cls] += 1
                    break
    per_class = np.full(n_classes, np.nan)
    active = (n_ref + n_det) > 0
    per_class[active] = 2 * tp[active] / (n_ref[active] + n_det[active])
    macro = float(np.nanmean(per_class)) if active.any() else 0.0
    return per_class, macro


def annotations_to_events(annotations) -> dict:
    return {a.clip_id: list(a.events) for a in annotations}


def events_to_annotations(events: dict, split="strong") -> list[ClipAnnotation]:
    return [ClipAnnotation(cid, split, list(ev)) for cid, ev in events.items()]


def score_predictions(preds: Predictions, clip_ids, annotations, n_classes, lengths=1, temperature=TEMPERATURE,
                      threshold=0.5, strict=True, with_curves=False) -> dict:
    """The full evaluation chain: temperature, median filter, decoding, PSDS1/PSDS2 and collar F1.

    ``annotations`` are the ground-truth ClipAnnotations of ``clip_ids``. Returns a dict with
    ``psds1``, ``psds2``, ``macro_f1`` and ``f1_per_class``; with ``with_curves`` also the raw
    ROC rows per scenario.
    """
    if temperature != 1.0:
        preds = temperature_scale(preds, temperature)
    gt = annotations_to_events(annotations)
    dets = decode_batch(preds.strong, clip_ids, threshold, lengths=lengths, strict=strict)
    per_class, macro = event_f1(dets, gt, n_classes)
    out = {"macro_f1": macro, "f1_per_class": [None if np.isnan(v) else float(v) for v in per_class]}
    for name, params in (("psds1", PSDS1), ("psds2", PSDS2)):
        score, counts = psds_from_probs(preds.strong, clip_ids, gt, n_classes, params, lengths,
                                        strict=strict, return_counts=True)
        out[name] = score
        if with_curves:
            out[f"{name}_curve"] = psds_curve(counts, params, len(clip_ids) * 10.0 / 3600.0, THRESHOLDS)
    return out
