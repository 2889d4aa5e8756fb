"""Manifests, dataset statistics and a synthetic audio corpus."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .dsp import MelConfig, Spectrogram, Waveform, load_audio, logmel, read_wav, write_wav

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    duration_s: float
    label: str | list[str] | None = None

    def to_json(self) -> dict:
        d = {"clip_id": self.clip_id, "path": self.path, "duration_s": self.duration_s}
        if self.label is not None:
            d["label"] = self.label
        return d


@dataclass
class Manifest:
    entries: list[ManifestEntry]

    def __post_init__(self):
        ids = [e.clip_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate clip_id in manifest")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list:
        return [e.label for e in self.entries]

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps(e.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, check_paths: bool = True) -> "Manifest":
        path = Path(path)
        entries = []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    entry = ManifestEntry(d["clip_id"], d["path"], float(d["duration_s"]),
                                          d.get("label"))
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DataError(f"{path}:{lineno}: bad manifest line ({exc})") from None
                p = Path(entry.path)
                if not p.is_absolute():
                    entry.path = str(path.parent / p)
                if check_paths and not Path(entry.path).exists():
                    raise DataError(f"{path}:{lineno}: missing audio file {entry.path}")
                entries.append(entry)
        return cls(entries)


def build_manifest(root_dir: str | Path) -> Manifest:
    """One entry per readable WAV under ``root_dir``, sorted by path."""
    root = Path(root_dir)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    entries = []
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.suffix.lower() != ".wav":
            continue
        try:
            w = read_wav(p)
        except Exception as exc:  # scipy raises a zoo of types for bad headers
            log.warning("skipping unreadable file %s: %s", p, exc)
            continue
        clip_id = p.relative_to(root).with_suffix("").as_posix()
        entries.append(ManifestEntry(clip_id, str(p), w.duration_s))
    if not entries:
        raise DataError("no audio files")
    return Manifest(entries)


@dataclass
class Moments:
    """Mergeable count / mean / sum-of-squared-deviations (Chan et al.)."""
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, x: np.ndarray) -> "Moments":
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.size == 0:
            return cls()
        mean = math.fsum(x) / x.size
        return cls(int(x.size), mean, math.fsum((x - mean) ** 2))

    def merge(self, other: "Moments") -> "Moments":
        if self.n == 0:
            return Moments(other.n, other.mean, other.m2)
        if other.n == 0:
            return Moments(self.n, self.mean, self.m2)
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return Moments(n, mean, m2)

    @property
    def std(self) -> float:
        return math.sqrt(max(self.m2, 0.0) / self.n) if self.n else 0.0


@dataclass
class DatasetStats:
    mean: float | np.ndarray
    std: float | np.ndarray
    n_cells: int
    mel_config_hash: str = ""

    def to_json(self) -> dict:
        def enc(v):
            return v.tolist() if isinstance(v, np.ndarray) else float(v)
        return {"mean": enc(self.mean), "std": enc(self.std), "n_cells": self.n_cells,
                "mel_config_hash": self.mel_config_hash}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetStats":
        def dec(v):
            return np.asarray(v, dtype=np.float64) if isinstance(v, list) else float(v)
        return cls(dec(d["mean"]), dec(d["std"]), int(d["n_cells"]), d.get("mel_config_hash", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetStats":
        return cls.from_json(json.loads(Path(path).read_text()))


def stats_from_spectrograms(specs: Iterable[np.ndarray], per_bin: bool = False,
                            mel_config_hash: str = "") -> DatasetStats:
    """Exact population moments over every cell (or every cell of each mel bin)."""
    total = None
    for s in specs:
        s = np.asarray(s, dtype=np.float64)
        if per_bin:
            part = [Moments.of(row) for row in s]
            total = part if total is None else [a.merge(b) for a, b in zip(total, part)]
        else:
            part = Moments.of(s)
            total = part if total is None else total.merge(part)
    if total is None:
        raise DataError("no spectrograms")
    if per_bin:
        mean = np.array([m.mean for m in total])
        std = np.array([m.std for m in total])
        n = sum(m.n for m in total)
        degenerate = bool(np.any(std == 0))
    else:
        mean, std, n = total.mean, total.std, total.n
        degenerate = std == 0
    if degenerate:
        raise DataError("degenerate dataset statistics")
    return DatasetStats(mean, std, n, mel_config_hash)


def load_spectrogram(entry: ManifestEntry, cfg: MelConfig) -> Spectrogram:
    w = load_audio(entry.path, cfg.sample_rate_hz)
    if len(w.samples) < cfg.win_length:
        w = Waveform(np.pad(w.samples, (0, cfg.win_length - len(w.samples))), w.sample_rate)
    return logmel(w, cfg)


def dataset_stats(m: Manifest, cfg: MelConfig = MelConfig(), per_bin: bool = False) -> DatasetStats:
    if len(m) == 0:
        raise DataError("empty manifest")
    return stats_from_spectrograms((load_spectrogram(e, cfg).values for e in m),
                                   per_bin=per_bin, mel_config_hash=cfg.digest())


# -- synthetic corpus ---------------------------------------------------------

@dataclass
class SynthClass:
    name: str
    kind: str  # tone | chirp | noise
    f_lo: float
    f_hi: float
    duration_s: float = 1.5
    snr_db: float = 20.0

    def __post_init__(self):
        if self.kind not in ("tone", "chirp", "noise"):
            raise ValueError(f"unknown synth class kind {self.kind!r}")
        if not 0 < self.f_lo <= self.f_hi:
            raise ValueError("need 0 < f_lo <= f_hi")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")


def default_classes() -> list[SynthClass]:
    return [
        SynthClass("tone", "tone", 300.0, 500.0),
        SynthClass("chirp", "chirp", 900.0, 1800.0),
        SynthClass("noise", "noise", 3000.0, 5000.0),
    ]


@dataclass
class SynthSpec:
    n_clips: int = 60
    classes: list[SynthClass] = field(default_factory=default_classes)
    seed: int = 0
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_clips <= 0:
            raise ValueError("n_clips must be positive")
        if not self.classes:
            raise ValueError("at least one class required")
        self.classes = [c if isinstance(c, SynthClass) else SynthClass(**c) for c in self.classes]

    def check_band(self, cfg: MelConfig) -> None:
        for c in self.classes:
            if c.f_lo < cfg.fmin_hz or c.f_hi > cfg.fmax_hz:
                raise DataError(f"class {c.name} lies outside the mel range")

    def to_json(self) -> dict:
        return asdict(self)


def synth_clip(c: SynthClass, rng: np.random.Generator, sample_rate: int) -> np.ndarray:
    n = int(round(c.duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    if c.kind == "tone":
        f0 = rng.uniform(c.f_lo, c.f_hi)
        x = np.sin(2 * np.pi * f0 * t + rng.uniform(0, 2 * np.pi))
    elif c.kind == "chirp":
        f_start, f_end = (c.f_lo, c.f_hi) if rng.random() < 0.5 else (c.f_hi, c.f_lo)
        phase = 2 * np.pi * (f_start * t + (f_end - f_start) * t ** 2 / (2 * c.duration_s))
        x = np.sin(phase + rng.uniform(0, 2 * np.pi))
    else:
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1 / sample_rate)
        spec[(freqs < c.f_lo) | (freqs > c.f_hi)] = 0
        x = np.fft.irfft(spec, n)
        # burst envelope: random on/off gating at ~100 ms granularity
        gate = np.repeat(rng.random(n // 1600 + 1) < 0.7, 1600)[:n].astype(np.float64)
        gate[: min(n, 1600)] = 1.0
        x = x * np.convolve(gate, np.hanning(161) / np.hanning(161).sum(), mode="same")
    x = x / (np.sqrt(np.mean(x ** 2)) + 1e-12)
    noise = rng.standard_normal(n) * 10 ** (-c.snr_db / 20)
    x = x + noise
    gain = rng.uniform(0.2, 0.5)
    return gain * x / np.max(np.abs(x))


def synth_dataset(spec: SynthSpec, out_dir: str | Path) -> tuple[Manifest, list[str]]:
    """Write ``spec.n_clips`` WAVs (classes assigned round-robin) and a manifest."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(spec.n_clips):
        c = spec.classes[i % len(spec.classes)]
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, i]))
        samples = synth_clip(c, rng, spec.sample_rate)
        clip_id = f"{c.name}_{i:05d}"
        path = out / "audio" / f"{clip_id}.wav"
        write_wav(path, Waveform(samples, spec.sample_rate))
        entries.append(ManifestEntry(clip_id, str(Path("audio") / path.name),
                                     len(samples) / spec.sample_rate, c.name))
    manifest = Manifest(entries)
    manifest.save(out / "manifest.jsonl")
    for e in manifest.entries:
        e.path = str(out / e.path)
    return manifest, [e.label for e in manifest.entries]
