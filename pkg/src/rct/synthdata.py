"""Synthetic polyphonic sound-event corpus with weak, strong and unlabeled splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ParseError
from .features import CLIP_SAMPLES, CLIP_SECONDS, SAMPLE_RATE, Waveform

SPLITS = ("weak", "strong", "unlabeled")
ARCHETYPES = ("tone", "harmonic-tone", "noise-band", "chirp", "am-noise")
EVENT_RMS = 0.3 / np.sqrt(2.0)  # a 0.3-peak sinusoid; the SNR is a power ratio against this level
RAMP_SECONDS = 0.01
FRAME_SECONDS = 0.064  # model output frame: hop 256 x pool 4 at 16 kHz


class Event(NamedTuple):
    cls: int
    onset: float | None = None
    offset: float | None = None


@dataclass(frozen=True)
class EventClass:
    id: int
    archetype: str
    params: tuple
    dur_range: tuple[float, float]


@dataclass
class ClipAnnotation:
    clip_id: str
    split: str
    events: list[Event] = field(default_factory=list)

    @property
    def classes(self) -> list[int]:
        return sorted({e.cls for e in self.events})


@dataclass
class GenConfig:
    n_classes: int = 4
    n_weak: int = 60
    n_strong: int = 60
    n_unlabeled: int = 240
    events_per_clip: tuple[int, int] = (1, 3)
    snr_db: float = 6.0
    seed: int = 0
    id_prefix: str = ""
    classes: tuple[EventClass, ...] | None = None

    def counts(self) -> dict[str, int]:
        return {"weak": self.n_weak, "strong": self.n_strong, "unlabeled": self.n_unlabeled}


# (archetype, params, duration range) cycled to build any number of classes;
# later cycles shift frequencies so every class keeps a distinct signature.
_CLASS_TEMPLATES = [
    ("tone", (600.0,), (0.5, 1.5)),
    ("harmonic-tone", (180.0,), (1.5, 4.0)),
    ("noise-band", (2500.0, 3500.0), (0.5, 2.0)),
    ("chirp", (900.0, 1500.0), (0.8, 2.5)),
    ("am-noise", (5000.0, 7000.0, 6.0), (2.0, 5.0)),
]


def default_classes(n_classes: int) -> tuple[EventClass, ...]:
    out = []
    for c in range(n_classes):
        archetype, params, dur = _CLASS_TEMPLATES[c % len(_CLASS_TEMPLATES)]
        cycle = c // len(_CLASS_TEMPLATES)
        if cycle:
            scale = 1.0 + 0.37 * cycle
            if archetype == "am-noise":
                params = (params[0] * (1 - 0.15 * cycle), params[1] * (1 - 0.1 * cycle), params[2] + 3 * cycle)
            else:
                params = tuple(p * scale for p in params)
        out.append(EventClass(c, archetype, params, dur))
    return tuple(out)


def _validate(cfg: GenConfig, classes) -> None:
    if cfg.n_classes < 2:
        raise ConfigError("need at least two event classes")
    if min(cfg.n_weak, cfg.n_strong, cfg.n_unlabeled) < 0:
        raise ConfigError("split counts must be non-negative")
    lo, hi = cfg.events_per_clip
    if lo < 0 or hi < lo:
        raise ConfigError(f"bad events_per_clip range {cfg.events_per_clip}")
    for ec in classes:
        dmin, dmax = ec.dur_range
        if dmin > CLIP_SECONDS:
            raise ConfigError(f"class {ec.id}: minimum duration {dmin} s exceeds clip length")
        if dmin < 0.5 or dmax < dmin:
            raise ConfigError(f"class {ec.id}: invalid duration range {ec.dur_range}")
        freqs = [p for p in ec.params[:2]]
        if any(not 0 < f < SAMPLE_RATE / 2 for f in freqs):
            raise ConfigError(f"class {ec.id}: frequencies must lie in (0, 8000) Hz")


def _band_noise(rng, n, f_lo, f_hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec[(freqs < f_lo) | (freqs > f_hi)] = 0.0
    return np.fft.irfft(spec, n)


def render_event(ec: EventClass, duration: float, rng) -> np.ndarray:
    n = int(round(duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    if ec.archetype == "tone":
        x = np.sin(2 * np.pi * ec.params[0] * t)
    elif ec.archetype == "harmonic-tone":
        f0 = ec.params[0]
        x = sum(np.sin(2 * np.pi * k * f0 * t) / k for k in range(1, 6))
    elif ec.archetype == "noise-band":
        x = _band_noise(rng, n, *ec.params[:2])
    elif ec.archetype == "chirp":
        f0, f1 = ec.params[:2]
        x = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / duration * t**2))
    elif ec.archetype == "am-noise":
        f_lo, f_hi, rate = ec.params
        x = _band_noise(rng, n, f_lo, f_hi) * (0.55 + 0.45 * np.sin(2 * np.pi * rate * t))
    else:
        raise ConfigError(f"unknown archetype {ec.archetype!r}")
    rms = np.sqrt(np.mean(x ** 2))
    if rms > 0:
        x = x * (EVENT_RMS / rms)
    ramp = min(int(RAMP_SECONDS * SAMPLE_RATE), n // 2)
    if ramp:
        env = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        x[:ramp] *= env
        x[n - ramp:] *= env[::-1]
    return x


def _render_clip(cfg: GenConfig, classes, split_code: int, index: int):
    rng = np.random.default_rng([cfg.seed, split_code, index])
    lo, hi = cfg.events_per_clip
    n_events = int(rng.integers(lo, hi + 1))
    noise_rms = EVENT_RMS * 10.0 ** (-cfg.snr_db / 20.0)
    audio = noise_rms * rng.standard_normal(CLIP_SAMPLES)
    events = []
    for _ in range(n_events):
        ec = classes[int(rng.integers(len(classes)))]
        dur = float(rng.uniform(*ec.dur_range))
        dur = min(dur, CLIP_SECONDS)
        onset = float(rng.uniform(0.0, CLIP_SECONDS - dur))
        start = int(round(onset * SAMPLE_RATE))
        x = render_event(ec, dur, rng)[: CLIP_SAMPLES - start]
        audio[start:start + len(x)] += x
        events.append(Event(ec.id, start / SAMPLE_RATE, (start + len(x)) / SAMPLE_RATE))
    # overlapping instances of one class are annotated as a single event: a class is either active or not
    events = [Event(c, on, off) for c in sorted({e.cls for e in events}) for on, off in _merged_intervals(events, c)]
    events.sort(key=lambda e: (e.onset, e.cls))
    return Waveform(np.clip(audio, -1.0, 1.0 - 1.0 / 32768.0)), events


def gen_dataset(cfg: GenConfig):
    """Render every clip of every split.

    Returns ``(waveforms, annotations)``: a dict clip_id -> Waveform and a list of
    ClipAnnotation in split order. Each clip draws from its own generator seeded
    by (seed, split, index), so output does not depend on rendering order.
    Unlabeled clips keep their true events in memory; the manifest writer drops them.
    Same-class events that overlap are merged into one annotated event.
    """
    classes = cfg.classes or default_classes(cfg.n_classes)
    _validate(cfg, classes)
    waves, anns = {}, []
    for split_code, split in enumerate(SPLITS):
        for i in range(cfg.counts()[split]):
            clip_id = f"{cfg.id_prefix}{split}_{i:05d}"
            wave_, events = _render_clip(cfg, classes, split_code, i)
            waves[clip_id] = wave_
            anns.append(ClipAnnotation(clip_id, split, events))
    return waves, anns


def annotation_record(ann: ClipAnnotation) -> dict:
    rec = {"clip_id": ann.clip_id, "split": ann.split}
    if ann.split == "weak":
        rec["events"] = [{"class": c} for c in ann.classes]
    elif ann.split == "strong":
        rec["events"] = [{"class": e.cls, "onset": e.onset, "offset": e.offset} for e in ann.events]
    return rec


def write_manifest(annotations, path) -> None:
    with open(path, "w") as f:
        for ann in annotations:
            f.write(json.dumps(annotation_record(ann)) + "\n")


def _parse_event(obj, split):
    cls = obj["class"]
    if not isinstance(cls, int):
        raise ValueError(f"class must be an integer, got {cls!r}")
    if split == "weak":
        return Event(cls)
    onset, offset = float(obj["onset"]), float(obj["offset"])
    if not 0.0 <= onset < offset <= CLIP_SECONDS:
        raise ValueError(f"bad event times ({onset}, {offset})")
    return Event(cls, onset, offset)


def read_manifest(path) -> list[ClipAnnotation]:
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                split = obj["split"]
                if split not in SPLITS:
                    raise ValueError(f"unknown split {split!r}")
                events = [_parse_event(e, split) for e in obj.get("events", [])]
                out.append(ClipAnnotation(str(obj["clip_id"]), split, events))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from exc
    return out


def _merged_intervals(events, cls):
    spans = sorted((e.onset, e.offset) for e in events if e.cls == cls)
    merged = []
    for on, off in spans:
        if merged and on <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], off)
        else:
            merged.append([on, off])
    return merged


def labels_from_annotation(ann: ClipAnnotation, n_frames: int, n_classes: int,
                           frame_dur: float = FRAME_SECONDS):
    """Weak (C,) and strong (n_frames, C) binary labels.

    A frame is active for class c when class-c events cover at least half of it.
    Weak-split annotations carry no times; their strong label is all zeros and
    the weak label is the class set.
    """
    strong = np.zeros((n_frames, n_classes))
    weak = np.zeros(n_classes)
    if ann.split == "weak" or any(e.onset is None for e in ann.events):
        weak[ann.classes] = 1.0
        return weak, strong
    starts = np.arange(n_frames) * frame_dur
    ends = starts + frame_dur
    for c in range(n_classes):
        cover = np.zeros(n_frames)
        for on, off in _merged_intervals(ann.events, c):
            cover += np.clip(np.minimum(ends, off) - np.maximum(starts, on), 0.0, None)
        # tolerance keeps exact half-frame coverage stable under float rounding
        strong[:, c] = cover >= 0.5 * frame_dur - 1e-9
    weak = strong.max(axis=0) if n_frames else weak
    return weak, strong


def shift_events(events, seconds: float, period: float):
    """Circularly shift events in time, splitting any that wrap past ``period``."""
    out = []
    for e in events:
        on, off = e.onset, min(e.offset, period)
        if on >= period:
            continue
        on, off = on + seconds, off + seconds
        k = np.floor(on / period)
        on, off = on - k * period, off - k * period
        if off <= period:
            out.append(Event(e.cls, on, off))
        else:
            out.append(Event(e.cls, on, period))
            out.append(Event(e.cls, 0.0, off - period))
    return out


def save_dataset(out_dir, waves, annotations, manifest_names=None) -> dict[str, Path]:
    """Write ``audio/<clip_id>.wav`` plus one JSONL manifest per split."""
    from .features import write_wav

    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    for clip_id, w in waves.items():
        write_wav(out_dir / "audio" / f"{clip_id}.wav", w)
    names = manifest_names or {s: f"{s}.jsonl" for s in SPLITS}
    paths = {}
    for split, name in names.items():
        paths[split] = out_dir / name
        write_manifest([a for a in annotations if a.split == split], paths[split])
    return paths
