import wave

import numpy as np
import pytest

from rct.errors import FormatError, NumericalError
from rct.features import (
    CLIP_SAMPLES, MelClip, Waveform, denormalize, extract, load_wav, logmel, logmel_normalize, mel_matrix,
    normalize, read_feature, stft_power, write_feature,
)


def _write_pcm(path, samples, sr=16000, channels=1, width=2):
    data = np.asarray(samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(sr)
        if width == 2:
            wf.writeframes(data.astype("<i2").tobytes())
        else:
            wf.writeframes(data.astype(np.uint8).tobytes())


def _tone(freq, amp=1.0, n=CLIP_SAMPLES, sr=16000):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / sr)


# ---------------------------------------------------------------- load_wav

def test_load_wav_identity_length(tmp_path):
    x = (np.random.default_rng(0).uniform(-0.5, 0.5, CLIP_SAMPLES) * 32768).astype(int)
    _write_pcm(tmp_path / "a.wav", x)
    w = load_wav(tmp_path / "a.wav")
    assert w.samples.shape == (160000,)
    assert w.sample_rate == 16000
    np.testing.assert_array_equal(w.samples, x / 32768.0)


def test_load_wav_pads_short_clip(tmp_path):
    x = np.full(80000, 1000)
    _write_pcm(tmp_path / "short.wav", x)
    w = load_wav(tmp_path / "short.wav")
    assert len(w.samples) == 160000
    assert np.all(w.samples[80000:] == 0)
    assert np.all(w.samples[:80000] == 1000 / 32768)


def test_load_wav_truncates_long_clip(tmp_path):
    _write_pcm(tmp_path / "long.wav", np.arange(200000) % 1000)
    assert len(load_wav(tmp_path / "long.wav").samples) == 160000


def test_load_wav_upsamples_8k_linearly(tmp_path):
    rng = np.random.default_rng(3)
    x = rng.integers(-20000, 20000, size=80000)
    _write_pcm(tmp_path / "lo.wav", x, sr=8000)
    w = load_wav(tmp_path / "lo.wav")
    assert len(w.samples) == 160000
    orig = x / 32768.0
    # direct index arithmetic: even output samples sit on input samples,
    # odd ones halfway between neighbours
    np.testing.assert_allclose(w.samples[0::2], orig, rtol=0, atol=1e-15)
    np.testing.assert_allclose(w.samples[1:-1:2], 0.5 * (orig[:-1] + orig[1:]), atol=1e-15)


def test_load_wav_mixes_stereo(tmp_path):
    left = np.full(1000, 2000)
    right = np.full(1000, -1000)
    inter = np.stack([left, right], axis=1).ravel()
    _write_pcm(tmp_path / "st.wav", inter, channels=2)
    w = load_wav(tmp_path / "st.wav")
    np.testing.assert_allclose(w.samples[:1000], 500 / 32768.0)


def test_load_wav_rejects_8bit(tmp_path):
    _write_pcm(tmp_path / "u8.wav", np.full(100, 128), width=1)
    with pytest.raises(FormatError):
        load_wav(tmp_path / "u8.wav")


def test_load_wav_rejects_garbage(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF\x00\x00junkjunkjunk")
    with pytest.raises(FormatError):
        load_wav(tmp_path / "bad.wav")


# ---------------------------------------------------------------- stft

def test_stft_frame_count():
    assert stft_power(Waveform(np.zeros(CLIP_SAMPLES))).shape == (626, 1025)


def test_stft_zero_is_zero():
    assert not np.any(stft_power(Waveform(np.zeros(CLIP_SAMPLES))))


def test_stft_tone_argmax_bin():
    p = stft_power(Waveform(_tone(1000.0)))
    peak = np.argmax(p, axis=1)
    # windows fully inside the clip; the two frames at each end see the
    # reflect-padded (phase-flipped) sine and split the peak to bin 127/129
    interior = slice(4, 622)
    assert np.all(peak[interior] == round(1000 * 2048 / 16000))
    assert np.all(np.abs(peak - 128) <= 1)


def test_stft_matches_direct_dft():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(CLIP_SAMPLES)
    p = stft_power(Waveform(x))
    # frame 100 starts at 100 * 256 - 1024 in the unpadded signal
    n = np.arange(2048)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * n / 2048)
    seg = x[100 * 256 - 1024: 100 * 256 + 1024] * win
    k = np.arange(1025)[:, None]
    dft = (seg[None, :] * np.exp(-2j * np.pi * k * n[None, :] / 2048)).sum(axis=1)
    np.testing.assert_allclose(p[100], np.abs(dft) ** 2, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------- mel

def test_mel_matrix_shape_and_support():
    m = mel_matrix()
    assert m.shape == (128, 1025)
    assert np.all(m.sum(axis=1) > 0)
    assert np.all((m > 0).sum(axis=0) <= 2)
    assert m.max() <= 1.0 + 1e-12


def test_mel_peaks_increase():
    peaks = np.argmax(mel_matrix(), axis=1)
    assert np.all(np.diff(peaks) > 0)


# ---------------------------------------------------------------- normalisation

def test_normalised_range_exact():
    clip = extract(Waveform(_tone(440.0, 0.3) + 0.01 * np.random.default_rng(1).standard_normal(CLIP_SAMPLES)))
    assert clip.values.shape == (626, 128)
    assert clip.values.min() == -1.0
    assert clip.values.max() == 1.0


def test_all_zero_power_gives_zero_clip():
    clip = logmel_normalize(np.zeros((626, 1025)))
    assert not np.any(clip.values)
    assert clip.norm_lo == clip.norm_hi


def test_normalize_round_trip():
    raw = np.random.default_rng(2).normal(-5, 3, size=(626, 128))
    v, lo, hi = normalize(raw)
    np.testing.assert_allclose(denormalize(v, lo, hi), raw, rtol=0, atol=1e-9)


def test_non_finite_power_rejected():
    p = np.zeros((626, 1025))
    p[3, 4] = np.nan
    with pytest.raises(NumericalError):
        logmel_normalize(p)


# ---------------------------------------------------------------- properties

def test_determinism():
    x = np.random.default_rng(5).uniform(-0.3, 0.3, CLIP_SAMPLES)
    a, b = extract(Waveform(x)), extract(Waveform(x.copy()))
    assert a.values.tobytes() == b.values.tobytes()


@pytest.mark.parametrize("gain", [1.5, 4.0, 20.0])
def test_gain_keeps_argmax_mel_bin(gain):
    x = _tone(1000.0, 0.05) + 0.01 * np.random.default_rng(6).standard_normal(CLIP_SAMPLES)
    ref = np.argmax(extract(Waveform(x)).values, axis=1)
    np.testing.assert_array_equal(np.argmax(extract(Waveform(gain * x)).values, axis=1), ref)


def test_padding_consistency():
    rng = np.random.default_rng(7)
    short = rng.uniform(-0.5, 0.5, 80000)
    padded = np.concatenate([short, np.zeros(80000)])
    full = rng.uniform(-0.5, 0.5, CLIP_SAMPLES)
    full[:80000] = short
    a = logmel(stft_power(Waveform(padded)))
    b = logmel(stft_power(Waveform(full)))
    # frames whose window lies inside [0, 80000): centre t*256 with half-width 1024,
    # and away from the left reflect padding
    inside = [t for t in range(626) if t * 256 - 1024 >= 0 and t * 256 + 1024 <= 80000]
    np.testing.assert_allclose(a[inside], b[inside], rtol=0, atol=1e-9)


def test_feature_cache_round_trip(tmp_path):
    clip = extract(Waveform(_tone(700.0, 0.2)))
    write_feature(tmp_path / "c.rctf", clip)
    back = read_feature(tmp_path / "c.rctf")
    assert back.values.shape == (626, 128)
    np.testing.assert_array_equal(back.values, clip.values.astype(np.float32))
    assert (back.norm_lo, back.norm_hi) == (clip.norm_lo, clip.norm_hi)
    raw = (tmp_path / "c.rctf").read_bytes()
    assert raw[:4] == b"RCTF"
    assert len(raw) == 4 + 4 * 3 + 16 + 626 * 128 * 4


def test_feature_cache_rejects_bad_magic(tmp_path):
    (tmp_path / "x.rctf").write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(FormatError):
        read_feature(tmp_path / "x.rctf")


def test_melclip_raw_inverts_normalisation():
    raw = np.random.default_rng(8).normal(size=(10, 4))
    v, lo, hi = normalize(raw)
    np.testing.assert_allclose(MelClip(v, lo, hi).raw(), raw, atol=1e-12)
