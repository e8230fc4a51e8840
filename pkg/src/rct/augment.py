"""Hard mixup, RandomWarping and the matching label transforms.

Feature arrays keep time on axis -2 and mel on axis -1, so every function
works on a single clip (T, K) or a batch (B, T, K). Labels follow the same
convention: strong labels (T', C) or (B, T', C), weak labels (C,) or (B, C).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError
from .features import HOP, SAMPLE_RATE, MelClip, denormalize, hz_to_mel, mel_band_edges, normalize

METHODS = ("time_shift", "time_mask", "pitch_shift")
POOL_FACTOR = 4
INPUT_FRAME_SECONDS = HOP / SAMPLE_RATE  # 16 ms
OUTPUT_FRAME_SECONDS = POOL_FACTOR * INPUT_FRAME_SECONDS  # 64 ms
MASK_FRAMES = int(0.1 / INPUT_FRAME_SECONDS)  # 6
HARDEN_HI = 0.95
HARDEN_LO = 0.05
MIXUP_ALPHA = 0.2


@dataclass(frozen=True)
class WarpChoice:
    method: str
    d: int
    direction: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown warp method {self.method!r}")
        if not 1 <= self.d <= 9:
            raise ConfigError(f"warp magnitude must be in 1..9, got {self.d}")


@dataclass(frozen=True)
class MixSet:
    indices: tuple[int, ...]

    def __post_init__(self):
        if len(self.indices) not in (2, 3) or len(set(self.indices)) != len(self.indices):
            raise ConfigError(f"mix set needs 2 or 3 distinct indices, got {self.indices}")


# ---------------------------------------------------------------- mixup

def hard_mix_arrays(values, lo, hi, sets):
    """Power-domain mix of normalised log-mels.

    ``values`` is (B, T, K) with per-clip ``lo``/``hi``; ``sets`` gives, for each
    output clip, the tuple of source indices. Returns (values, lo, hi) of the mixes.
    """
    raw = denormalize(values, np.asarray(lo)[:, None, None], np.asarray(hi)[:, None, None])
    out = np.empty((len(sets),) + values.shape[1:])
    out_lo = np.empty(len(sets))
    out_hi = np.empty(len(sets))
    for n, idx in enumerate(sets):
        mixed = np.logaddexp.reduce(raw[list(idx)], axis=0)
        out[n], out_lo[n], out_hi[n] = normalize(mixed)
    return out, out_lo, out_hi


def or_labels(labels):
    """Element-wise OR (max) across the first axis."""
    return np.max(np.stack(labels), axis=0)


def hard_mixup(clips, weak_labels, strong_labels):
    """Mix 2-3 clips by adding their mel powers; labels are the union of the inputs."""
    if not 2 <= len(clips) <= 3:
        raise ConfigError(f"hard mixup takes 2 or 3 clips, got {len(clips)}")
    shapes = {c.values.shape for c in clips}
    if len(shapes) != 1:
        raise ShapeError(f"clips differ in shape: {sorted(shapes)}")
    for labels in (weak_labels, strong_labels):
        if labels is not None and len({np.shape(y) for y in labels}) != 1:
            raise ShapeError("label shapes differ across mixed clips")
    values, lo, hi = hard_mix_arrays(
        np.stack([c.values for c in clips]),
        [c.norm_lo for c in clips], [c.norm_hi for c in clips], [tuple(range(len(clips)))])
    weak = or_labels(weak_labels) if weak_labels is not None else None
    strong = or_labels(strong_labels) if strong_labels is not None else None
    return MelClip(values[0], float(lo[0]), float(hi[0])), weak, strong


def vanilla_mixup(clip_a, clip_b, labels_a, labels_b, lam: float):
    """Linear interpolation of features (normalised domain) and of labels."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"mixing weight must be in [0, 1], got {lam}")
    a = clip_a.values if isinstance(clip_a, MelClip) else np.asarray(clip_a)
    b = clip_b.values if isinstance(clip_b, MelClip) else np.asarray(clip_b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot mix shapes {a.shape} and {b.shape}")
    mixed = lam * a + (1.0 - lam) * b
    labels = lam * np.asarray(labels_a, dtype=float) + (1.0 - lam) * np.asarray(labels_b, dtype=float)
    if isinstance(clip_a, MelClip):
        mixed = MelClip(mixed, clip_a.norm_lo, clip_a.norm_hi)
    return mixed, labels


def draw_mix_sets(groups, rng, p_three: float = 0.5):
    """For every sample, pick 1 or 2 partners from its own annotation group.

    ``groups`` is a list of index arrays partitioning the batch. Returns a list
    of index tuples ordered by sample index; the sample itself comes first.
    """
    n = sum(len(g) for g in groups)
    sets = [None] * n
    for g in groups:
        g = np.asarray(g)
        for i in g:
            others = g[g != i]
            if len(others) == 0:
                sets[i] = (int(i),)
                continue
            k = 2 if (len(others) >= 2 and rng.random() < p_three) else 1
            partners = rng.choice(others, size=k, replace=False)
            sets[i] = (int(i),) + tuple(int(j) for j in partners)
    return sets


def draw_pairs(groups, rng, alpha: float = MIXUP_ALPHA):
    """Partner index and Beta(alpha, alpha) weight per sample, within groups."""
    n = sum(len(g) for g in groups)
    partner = np.arange(n)
    lam = np.ones(n)
    for g in groups:
        g = np.asarray(g)
        for i in g:
            others = g[g != i]
            if len(others):
                partner[i] = rng.choice(others)
                lam[i] = rng.beta(alpha, alpha)
    return partner, lam


# ---------------------------------------------------------------- warping

def shift_frames(d: float, out_frame: float = OUTPUT_FRAME_SECONDS) -> int:
    """Output-frame shift for a ``d`` second time shift (quantised to whole output frames)."""
    return int(np.floor(d / out_frame + 0.5))


def _values(clip):
    return clip.values if isinstance(clip, MelClip) else np.asarray(clip)


def _rewrap(clip, values):
    return MelClip(values, clip.norm_lo, clip.norm_hi) if isinstance(clip, MelClip) else values


def roll_frames(x, n: int):
    return np.roll(x, n, axis=-2)


def time_shift(clip, strong_label, d, pool_factor: int = POOL_FACTOR):
    """Circularly shift features and strong labels by ``d`` seconds (quantised).

    Weak labels are unaffected.
    """
    if d < 1:
        raise ConfigError(f"time shift magnitude must be >= 1, got {d}")
    n_out = shift_frames(d, pool_factor * INPUT_FRAME_SECONDS)
    shifted = _rewrap(clip, roll_frames(_values(clip), n_out * pool_factor))
    label = None if strong_label is None else roll_frames(strong_label, n_out)
    return shifted, label


def time_mask(clip, d: int, rng, width: int = MASK_FRAMES):
    """Zero ``5 d`` randomly placed intervals of ``width`` frames (overlaps allowed)."""
    if d < 1:
        raise ConfigError(f"time mask magnitude must be >= 1, got {d}")
    x = _values(clip).copy()
    batch = x.reshape((-1,) + x.shape[-2:])
    t = batch.shape[1]
    for b in batch:
        for s in rng.integers(0, t - width + 1, size=5 * d):
            b[s:s + width] = 0.0
    return _rewrap(clip, batch.reshape(x.shape))


def mel_remap_positions(ratio: float, n_mels: int = 128, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Fractional source-bin index for every mel bin after scaling frequency by ``ratio``."""
    centres = mel_band_edges(n_mels, sr)[1:-1]
    centre_mels = hz_to_mel(centres)
    src_mels = hz_to_mel(centres / ratio)
    return np.interp(src_mels, centre_mels, np.arange(n_mels), left=-np.inf, right=np.inf)


def remap(values, ratio: float):
    """Move spectral content by a frequency ratio along the mel axis."""
    values = np.asarray(values)
    k = values.shape[-1]
    pos = mel_remap_positions(ratio, k)
    inside = np.isfinite(pos)
    lo_idx = np.clip(np.floor(np.where(inside, pos, 0)).astype(int), 0, k - 1)
    hi_idx = np.clip(lo_idx + 1, 0, k - 1)
    frac = np.where(inside, pos - lo_idx, 0.0)
    out = values[..., lo_idx] * (1.0 - frac) + values[..., hi_idx] * frac
    fill = values.min(axis=(-2, -1), keepdims=True)
    return np.where(inside, out, fill)


def pitch_shift(clip, d: int, direction: int = 1):
    """Raise (direction=+1) or lower (-1) pitch by ``d`` half-semitones on the mel axis."""
    if d < 1:
        raise ConfigError(f"pitch shift magnitude must be >= 1, got {d}")
    if direction not in (-1, 1):
        raise ConfigError(f"direction must be +1 or -1, got {direction}")
    return _rewrap(clip, remap(_values(clip), 2.0 ** (direction * d / 24.0)))


def draw_warp(d_max: int, rng) -> WarpChoice:
    if not 1 <= d_max <= 9:
        raise ConfigError(f"d_max must be in 1..9, got {d_max}")
    method = METHODS[int(rng.integers(len(METHODS)))]
    d = int(rng.integers(1, d_max + 1))
    direction = int(rng.choice((-1, 1))) if method == "pitch_shift" else 1
    return WarpChoice(method, d, direction)


def apply_warp(values, choice: WarpChoice, rng):
    if choice.method == "time_shift":
        return time_shift(values, None, choice.d)[0]
    if choice.method == "time_mask":
        return time_mask(values, choice.d, rng)
    return pitch_shift(values, choice.d, choice.direction)


def random_warp(batch, d_max: int, rng):
    """Draw one (method, d) for the whole mini-batch and apply it to every clip."""
    choice = draw_warp(d_max, rng)
    return apply_warp(batch, choice, rng), choice


# ---------------------------------------------------------------- label algebra

def harden(pred):
    """Snap values above 0.95 to 1 and below 0.05 to 0; others pass through."""
    pred = np.asarray(pred, dtype=float)
    if np.any((pred < 0.0) | (pred > 1.0)) or not np.all(np.isfinite(pred)):
        raise DomainError("harden expects probabilities in [0, 1]")
    return np.where(pred > HARDEN_HI, 1.0, np.where(pred < HARDEN_LO, 0.0, pred))


def harden_grad(pred):
    pred = np.asarray(pred)
    return ((pred >= HARDEN_LO) & (pred <= HARDEN_HI)).astype(float)


def mixup_label_transform(preds):
    """Combine predictions of the mixed samples: max over harden(pred_i)."""
    preds = [np.asarray(p, dtype=float) for p in preds]
    if not 2 <= len(preds) <= 3:
        raise ConfigError(f"mixup label transform takes 2 or 3 predictions, got {len(preds)}")
    if len({p.shape for p in preds}) != 1:
        raise ShapeError("prediction shapes differ")
    return np.max(np.stack([harden(p) for p in preds]), axis=0)


@dataclass
class LabelTransform:
    """Prediction-space counterpart of one augmentation branch.

    ``kind`` is ``identity``, ``shift`` (strong rows rolled by ``shift``) or
    ``mixup`` (per-sample index sets combined with harden + OR).
    """

    kind: str
    shift: int = 0
    sets: list = field(default_factory=list)

    def weak(self, y):
        if self.kind == "mixup":
            return self._mix(y)[0]
        return y

    def strong(self, y):
        if self.kind == "shift":
            return roll_frames(y, self.shift)
        if self.kind == "mixup":
            return self._mix(y)[0]
        return y

    def _mix(self, y):
        h = harden(np.clip(y, 0.0, 1.0))
        out = np.empty((len(self.sets),) + y.shape[1:], dtype=h.dtype)
        arg = np.empty(out.shape, dtype=int)
        for n, idx in enumerate(self.sets):
            stacked = h[list(idx)]
            k = np.argmax(stacked, axis=0)
            out[n] = np.take_along_axis(stacked, k[None], axis=0)[0]
            arg[n] = np.asarray(idx)[k]
        return out, arg

    def vjp(self, y, g, strong: bool):
        """Gradient w.r.t. ``y`` of <g, transform(y)> (batch-first arrays)."""
        if self.kind == "identity" or (self.kind == "shift" and not strong):
            return g
        if self.kind == "shift":
            return roll_frames(g, -self.shift)
        _, arg = self._mix(y)
        dy = np.zeros_like(y)
        local = g * np.take_along_axis(harden_grad(y), arg, axis=0)
        rest = np.indices(y.shape[1:])
        for n in range(len(self.sets)):
            np.add.at(dy, (arg[n],) + tuple(rest), local[n])
        return dy


def label_transform_for(choice, pool_factor: int = POOL_FACTOR) -> LabelTransform:
    """The prediction transform matching an augmentation choice.

    ``choice`` is a WarpChoice, a MixSet, a list of per-sample index tuples, or None.
    """
    if choice is None:
        return LabelTransform("identity")
    if isinstance(choice, WarpChoice):
        if choice.method == "time_shift":
            return LabelTransform("shift", shift=shift_frames(choice.d, pool_factor * INPUT_FRAME_SECONDS))
        return LabelTransform("identity")
    if isinstance(choice, MixSet):
        return LabelTransform("mixup", sets=[choice.indices])
    return LabelTransform("mixup", sets=[tuple(s) for s in choice])
