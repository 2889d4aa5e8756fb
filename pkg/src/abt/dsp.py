"""Audio front end: WAV ingest, resampling and log-mel spectrograms.

Frame-count convention: frames lie fully inside the signal (no centre
padding), so a clip of ``n`` samples yields
``floor((n - window) / hop) + 1`` frames. One second of 16 kHz audio with
the default 64 ms window and 10 ms hop gives ``(16000 - 1024) // 160 + 1 = 94``
frames.

Log-mel values are ``ln(mel_power + log_floor)`` where ``mel_power`` is a
triangular (HTK mel scale) filterbank applied to the Hann-windowed power
spectrum.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class MelConfig:
    sample_rate_hz: int = 16000
    window_ms: float = 64.0
    hop_ms: float = 10.0
    n_mels: int = 64
    fmin_hz: float = 60.0
    fmax_hz: float = 7800.0
    log_floor: float = 1e-8

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not 0 <= self.fmin_hz < self.fmax_hz <= self.sample_rate_hz / 2:
            raise ValueError("need 0 <= fmin < fmax <= sample_rate / 2")
        if self.window_ms < self.hop_ms:
            raise ValueError("window_ms must be >= hop_ms")
        if self.n_mels <= 0 or self.log_floor <= 0:
            raise ValueError("n_mels and log_floor must be positive")

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate_hz * self.window_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate_hz * self.hop_ms / 1000))

    @property
    def silence_value(self) -> float:
        """Log-mel value of an all-zero waveform."""
        return math.log(self.log_floor)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise AudioError("waveform must be mono")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    values: np.ndarray  # F x T, natural-log mel power
    frame_hop_ms: float = 10.0

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def frames_span_ms(n_frames: int, hop_ms: float = 10.0) -> float:
    """Time between the first and last frame starts, e.g. 96 frames -> 950 ms."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    return (n_frames - 1) * hop_ms


def span_ms_to_frames(span_ms: float, hop_ms: float = 10.0) -> int:
    return int(round(span_ms / hop_ms)) + 1


def read_wav(path: str | Path) -> Waveform:
    """Read a mono or multi-channel WAV (16-bit PCM or 32-bit float)."""
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise AudioError(f"unsupported WAV sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return Waveform(samples, int(rate))


def write_wav(path: str | Path, w: Waveform) -> None:
    """Write 16-bit PCM."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype("<i2")
    wavfile.write(str(path), w.sample_rate, pcm)


def load_audio(path: str | Path, target_rate: int = 16000) -> Waveform:
    w = read_wav(path)
    if w.sample_rate != target_rate:
        w = resample(w, target_rate)
    return w


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase windowed-sinc resampling."""
    if target_rate <= 0:
        raise AudioError("target_rate must be positive")
    if len(w.samples) == 0:
        raise AudioError("empty waveform")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    ratio = Fraction(target_rate, w.sample_rate)
    out = signal.resample_poly(w.samples, ratio.numerator, ratio.denominator,
                               window=("kaiser", 5.0))
    return Waveform(out, target_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz),
                                  cfg.n_mels + 2))
    return edges[1:-1]


def mel_filterbank(cfg: MelConfig, n_fft: int | None = None) -> np.ndarray:
    """Triangular filters, shape ``(n_mels, n_fft // 2 + 1)``, peak value 1."""
    n_fft = n_fft or cfg.win_length
    fft_freqs = np.arange(n_fft // 2 + 1) * cfg.sample_rate_hz / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz),
                                  cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def n_frames_for(n_samples: int, cfg: MelConfig) -> int:
    if n_samples < cfg.win_length:
        return 0
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def logmel(w: Waveform, cfg: MelConfig = MelConfig()) -> Spectrogram:
    if w.sample_rate != cfg.sample_rate_hz:
        raise AudioError(f"expected {cfg.sample_rate_hz} Hz audio, got {w.sample_rate} Hz")
    n_frames = n_frames_for(len(w.samples), cfg)
    if n_frames == 0:
        raise AudioError("clip too short")
    win, hop = cfg.win_length, cfg.hop_length
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop][:n_frames]
    spec = np.fft.rfft(frames * signal.get_window("hann", win, fftbins=True), axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mel = mel_filterbank(cfg, win) @ power.T
    return Spectrogram(np.log(mel + cfg.log_floor), cfg.hop_ms)


def crop_or_pad(s: Spectrogram, t_target: int, rng: np.random.Generator,
                pad_value: float = math.log(MelConfig.log_floor)) -> Spectrogram:
    """Random contiguous crop of ``t_target`` frames, or right-pad with silence.

    Padding uses the log-domain silence value ``ln(log_floor)`` rather than a
    literal 0.0, which would be a loud constant in log-mel space.
    """
    if t_target <= 0:
        raise ValueError("t_target must be positive")
    values = s.values
    T = values.shape[1]
    if T > t_target:
        start = int(rng.integers(0, T - t_target + 1))
        out = values[:, start:start + t_target].copy()
    elif T < t_target:
        out = np.full((values.shape[0], t_target), pad_value, dtype=values.dtype)
        out[:, :T] = values
    else:
        out = values.copy()
    return Spectrogram(out, s.frame_hop_ms)
