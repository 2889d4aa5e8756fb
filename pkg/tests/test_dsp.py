import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abt.dsp import (AudioError, MelConfig, Spectrogram, Waveform, crop_or_pad, frames_span_ms,
                     hz_to_mel, load_audio, logmel, mel_center_frequencies, mel_filterbank,
                     mel_to_hz, n_frames_for, read_wav, resample, span_ms_to_frames, write_wav)

from oracles import mel_bin_of


def sine(freq, sr, seconds, amp=0.5):
    t = np.arange(int(sr * seconds)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def peak_hz(x, sr):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    return np.argmax(spec) * sr / len(x), sr / len(x)


def test_mel_config_defaults():
    cfg = MelConfig()
    assert cfg.win_length == 1024
    assert cfg.hop_length == 160
    assert cfg.silence_value == pytest.approx(math.log(1e-8))


@pytest.mark.parametrize("kw", [dict(fmin_hz=8000.0), dict(fmax_hz=9000.0),
                                dict(window_ms=5.0), dict(sample_rate_hz=0), dict(n_mels=0)])
def test_mel_config_rejects_invalid(kw):
    with pytest.raises(ValueError):
        MelConfig(**kw)


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]), 16000)
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0)


def test_resample_length_3_to_1():
    w = Waveform(sine(440, 48000, 1.0), 48000)
    out = resample(w, 16000)
    assert out.sample_rate == 16000
    assert len(out.samples) == 16000


def test_resample_identity():
    w = Waveform(sine(440, 16000, 0.1), 16000)
    out = resample(w, 16000)
    np.testing.assert_array_equal(out.samples, w.samples)


def test_resample_empty():
    with pytest.raises(AudioError, match="empty waveform"):
        resample(Waveform(np.zeros(0), 48000), 16000)


def test_resample_preserves_peak_frequency():
    x = sine(440, 48000, 1.0)
    y = resample(Waveform(x, 48000), 16000).samples
    f_in, _ = peak_hz(x, 48000)
    f_out, bin_out = peak_hz(y, 16000)
    assert abs(f_out - 440) <= bin_out
    assert abs(f_out - f_in) <= bin_out


def test_resample_duration_within_one_sample():
    w = Waveform(sine(300, 44100, 0.73), 44100)
    out = resample(w, 16000)
    assert abs(len(out.samples) / 16000 - w.duration_s) <= 1 / 16000


def test_logmel_frame_count_one_second():
    # no centre padding: floor((16000 - 1024) / 160) + 1 = 94
    s = logmel(Waveform(sine(440, 16000, 1.0), 16000))
    assert s.values.shape == (64, 94)
    assert n_frames_for(16000, MelConfig()) == 94


def test_logmel_too_short():
    with pytest.raises(AudioError, match="clip too short"):
        logmel(Waveform(np.zeros(1023), 16000))


def test_logmel_wrong_rate():
    with pytest.raises(AudioError):
        logmel(Waveform(np.zeros(4000), 8000))


def test_logmel_silence_is_constant_floor():
    s = logmel(Waveform(np.zeros(16000), 16000))
    np.testing.assert_allclose(s.values, math.log(1e-8), rtol=0, atol=1e-12)


def test_logmel_440_argmax_matches_reference_mel_bin():
    s = logmel(Waveform(sine(440, 16000, 1.0), 16000))
    expected = mel_bin_of(440.0)
    assert np.all(np.argmax(s.values, axis=0) == expected)


def test_mel_scale_roundtrip_and_centres():
    f = np.array([60.0, 440.0, 1000.0, 7800.0])
    np.testing.assert_allclose(mel_to_hz(hz_to_mel(f)), f, rtol=1e-12)
    centres = mel_center_frequencies(MelConfig())
    assert centres.shape == (64,)
    assert np.all(np.diff(centres) > 0)
    assert 60 < centres[0] and centres[-1] < 7800


def test_mel_filterbank_peaks():
    fb = mel_filterbank(MelConfig())
    assert fb.shape == (64, 513)
    assert fb.min() >= 0 and fb.max() <= 1 + 1e-12
    assert np.all(fb.sum(axis=1) > 0)


def test_logmel_deterministic():
    w = Waveform(np.random.default_rng(0).uniform(-1, 1, 8000), 16000)
    np.testing.assert_array_equal(logmel(w).values, logmel(w).values)


@settings(max_examples=25, deadline=None)
@given(st.floats(1.01, 20.0), st.integers(0, 2**31 - 1))
def test_logmel_monotone_in_amplitude(c, seed):
    x = np.random.default_rng(seed).uniform(-0.04, 0.04, 2048)
    a = logmel(Waveform(x, 16000)).values
    b = logmel(Waveform(c * x, 16000)).values
    assert np.all(b >= a - 1e-12)


def test_crop_is_contiguous_subwindow():
    s = Spectrogram(np.arange(64 * 120, dtype=float).reshape(64, 120))
    out = crop_or_pad(s, 96, np.random.default_rng(3)).values
    start = int(out[0, 0])
    np.testing.assert_array_equal(out, s.values[:, start:start + 96])


def test_crop_exact_size_identity():
    v = np.random.default_rng(0).normal(size=(64, 96))
    np.testing.assert_array_equal(crop_or_pad(Spectrogram(v), 96, np.random.default_rng(0)).values, v)


def test_pad_uses_silence_value():
    v = np.random.default_rng(0).normal(size=(64, 50))
    out = crop_or_pad(Spectrogram(v), 96, np.random.default_rng(0)).values
    np.testing.assert_array_equal(out[:, :50], v)
    assert np.all(out[:, 50:] == math.log(1e-8))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 200), st.integers(1, 200), st.integers(0, 1000))
def test_crop_or_pad_shape(F, T, target, seed):
    s = Spectrogram(np.zeros((F, T)))
    assert crop_or_pad(s, target, np.random.default_rng(seed)).values.shape == (F, target)


def test_span_bookkeeping():
    assert frames_span_ms(96) == 950
    assert span_ms_to_frames(950) == 96


def test_wav_roundtrip_and_stereo(tmp_path):
    x = sine(440, 16000, 0.2)
    write_wav(tmp_path / "a.wav", Waveform(x, 16000))
    back = read_wav(tmp_path / "a.wav")
    np.testing.assert_allclose(back.samples, x, atol=1 / 32767)

    from scipy.io import wavfile
    st2 = np.stack([x, -x + 0.1], axis=1).astype(np.float32)
    wavfile.write(str(tmp_path / "s.wav"), 48000, st2)
    w = load_audio(tmp_path / "s.wav", 16000)
    assert w.sample_rate == 16000
    assert len(w.samples) == math.ceil(len(x) / 3)  # polyphase output length rounds up
