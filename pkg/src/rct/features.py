"""Log-mel front end: WAV loading, STFT power, mel filterbank, per-clip normalisation.

Defaults reproduce a 626 x 128 feature matrix for a 10 s clip at 16 kHz
(2048-point FFT, hop 256, 128 HTK mel bands).
"""
from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0
CLIP_SAMPLES = int(SAMPLE_RATE * CLIP_SECONDS)
N_FFT = 2048
HOP = 256
N_MELS = 128
LOG_EPS = 1e-10

CACHE_MAGIC = b"RCTF"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIIIdd")


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise FormatError(f"sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise NumericalError("waveform contains non-finite samples")


@dataclass
class MelClip:
    """Normalised log-mel matrix (time x mel) plus the raw log-mel range.

    ``norm_lo``/``norm_hi`` are the min/max of the raw log-mel values before
    mapping to [-1, 1]; they allow the raw values to be recovered exactly.
    """

    values: np.ndarray
    norm_lo: float
    norm_hi: float

    @property
    def shape(self):
        return self.values.shape

    def raw(self) -> np.ndarray:
        return denormalize(self.values, self.norm_lo, self.norm_hi)


def fit_length(samples: np.ndarray, n: int = CLIP_SAMPLES) -> np.ndarray:
    if len(samples) >= n:
        return samples[:n]
    return np.concatenate([samples, np.zeros(n - len(samples), dtype=samples.dtype)])


def resample_linear(samples: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    """Linear-interpolation resampler (not band-limited)."""
    if sr_in == sr_out:
        return samples
    n_out = int(round(len(samples) * sr_out / sr_in))
    positions = np.arange(n_out) * (sr_in / sr_out)
    return np.interp(positions, np.arange(len(samples)), samples)


def load_wav(path) -> Waveform:
    """Read a PCM16 WAV file as a mono, 16 kHz, 10 s waveform."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            sr = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError, struct.error) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if n_channels not in (1, 2):
        raise FormatError(f"{path}: unsupported channel count {n_channels}")
    if sr <= 0:
        raise FormatError(f"{path}: invalid sample rate {sr}")
    pcm = np.frombuffer(raw, dtype="<i2")
    if len(pcm) % n_channels:
        raise FormatError(f"{path}: truncated frame data")
    samples = pcm.reshape(-1, n_channels).astype(np.float64).mean(axis=1) / 32768.0
    samples = resample_linear(samples, sr, SAMPLE_RATE)
    return Waveform(fit_length(samples), SAMPLE_RATE)


def write_wav(path, wave_: Waveform) -> None:
    pcm = np.clip(np.round(wave_.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(wave_.sample_rate))
        wf.writeframes(pcm.tobytes())


@lru_cache(maxsize=4)
def hann_window(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(wave_: Waveform | np.ndarray, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """Squared-magnitude STFT, frames centred with reflect padding; shape (T, n_fft // 2 + 1)."""
    x = wave_.samples if isinstance(wave_, Waveform) else np.asarray(wave_, dtype=np.float64)
    pad = n_fft // 2
    x = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    spec = np.fft.rfft(frames * hann_window(n_fft), axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int = N_MELS, sr: int = SAMPLE_RATE) -> np.ndarray:
    """The n_mels + 2 filter corner frequencies in Hz (equally spaced on the mel scale)."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sr / 2.0), n_mels + 2))


@lru_cache(maxsize=8)
def mel_matrix(n_mels: int = N_MELS, sr: int = SAMPLE_RATE, n_fft: int = N_FFT) -> np.ndarray:
    """HTK-scale triangular filterbank with unit peaks, shape (n_mels, n_fft // 2 + 1)."""
    edges = mel_band_edges(n_mels, sr)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.setflags(write=False)
    return weights


def normalize(raw: np.ndarray):
    """Map raw log-mel values to [-1, 1]; returns (values, lo, hi)."""
    lo = float(raw.min())
    hi = float(raw.max())
    if hi == lo:
        return np.zeros_like(raw), lo, hi
    return 2.0 * (raw - lo) / (hi - lo) - 1.0, lo, hi


def denormalize(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return lo + (np.asarray(values, dtype=np.float64) + 1.0) * 0.5 * (hi - lo)


def logmel(power_spec: np.ndarray, n_mels: int = N_MELS, sr: int = SAMPLE_RATE) -> np.ndarray:
    power_spec = np.asarray(power_spec, dtype=np.float64)
    if not np.all(np.isfinite(power_spec)):
        raise NumericalError("power spectrogram contains NaN or Inf")
    n_fft = 2 * (power_spec.shape[1] - 1)
    return np.log(power_spec @ mel_matrix(n_mels, sr, n_fft).T + LOG_EPS)


def logmel_normalize(power_spec: np.ndarray, n_mels: int = N_MELS, sr: int = SAMPLE_RATE) -> MelClip:
    values, lo, hi = normalize(logmel(power_spec, n_mels, sr))
    return MelClip(values, lo, hi)


def extract(wave_: Waveform) -> MelClip:
    """Full front end: waveform -> normalised 626 x 128 MelClip."""
    return logmel_normalize(stft_power(wave_))


def write_feature(path, clip: MelClip) -> None:
    t, k = clip.values.shape
    header = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, t, k, clip.norm_lo, clip.norm_hi)
    Path(path).write_bytes(header + np.ascontiguousarray(clip.values, dtype="<f4").tobytes())


def read_feature(path) -> MelClip:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise FormatError(f"{path}: truncated feature record")
    magic, version, t, k, lo, hi = _CACHE_HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = data[_CACHE_HEADER.size:]
    if len(body) != 4 * t * k:
        raise FormatError(f"{path}: expected {t}x{k} values, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").reshape(t, k).astype(np.float64)
    return MelClip(values, lo, hi)
