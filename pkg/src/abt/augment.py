"""View generation: normalisation, Mixup, random resize crop, linear fader, noise,
and MAE-style patch masking.

All blocks operate on ``F x T`` float arrays of log-mel values and take an
explicit :class:`numpy.random.Generator`.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .data import DatasetStats


@dataclass
class AugmentConfig:
    use_mixup: bool = True
    mixup_alpha: float = 0.4
    mixup_queue_len: int = 2048
    use_rrc: bool = True
    rrc_freq_scale: tuple[float, float] = (0.6, 1.5)
    rrc_time_scale: tuple[float, float] = (0.6, 1.5)
    rrc_fill: float = 0.0
    use_rlf: bool = True
    rlf_gain_range: tuple[float, float] = (-1.0, 1.0)
    use_noise: bool = False
    noise_alpha: float = 0.2
    norm_mode: str = "dataset"  # dataset | pre_post

    def __post_init__(self):
        self.rrc_freq_scale = tuple(self.rrc_freq_scale)
        self.rrc_time_scale = tuple(self.rrc_time_scale)
        self.rlf_gain_range = tuple(self.rlf_gain_range)
        if not 0 <= self.mixup_alpha <= 0.5:
            raise ValueError("mixup_alpha must lie in [0, 0.5] so the incoming clip stays dominant")
        if self.mixup_queue_len < 1:
            raise ValueError("mixup_queue_len must be >= 1")
        for name in ("rrc_freq_scale", "rrc_time_scale"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < lo <= hi")
        lo, hi = self.rlf_gain_range
        if lo > hi:
            raise ValueError("rlf_gain_range must satisfy lo <= hi")
        if self.noise_alpha < 0:
            raise ValueError("noise_alpha must be >= 0")
        if self.norm_mode not in ("dataset", "pre_post"):
            raise ValueError("norm_mode must be 'dataset' or 'pre_post'")

    @classmethod
    def disabled(cls, **kw) -> "AugmentConfig":
        return cls(use_mixup=False, use_rrc=False, use_rlf=False, use_noise=False, **kw)


class MixupQueue:
    """FIFO memory of recent normalised spectrograms.

    Single-writer: confine to one worker. ``sample`` reads the current
    contents, ``push`` appends (evicting the oldest when full).
    """

    def __init__(self, capacity: int = 2048):
        self.capacity = capacity
        self._items: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._items)

    def push(self, s: np.ndarray) -> None:
        if self._items and s.shape != self._items[0].shape:
            raise ValueError(f"shape {s.shape} does not match queue shape {self._items[0].shape}")
        self._items.append(np.array(s, copy=True))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self._items[int(rng.integers(len(self._items)))]

    def to_array(self) -> np.ndarray:
        if not self._items:
            return np.zeros((0, 0, 0))
        return np.stack(list(self._items))

    @classmethod
    def from_array(cls, capacity: int, arr: np.ndarray) -> "MixupQueue":
        q = cls(capacity)
        for s in arr:
            q.push(s)
        return q


@dataclass
class MaskPlan:
    kept_indices: np.ndarray
    masked_indices: np.ndarray
    r: float

    @property
    def n_patches(self) -> int:
        return len(self.kept_indices) + len(self.masked_indices)


def normalize(s: np.ndarray, stats: DatasetStats) -> np.ndarray:
    mean, std = stats.mean, stats.std
    if isinstance(mean, np.ndarray):
        mean, std = mean[:, None], std[:, None]
    return (s - mean) / std


def pre_post_norm(batch: list[np.ndarray]) -> list[np.ndarray]:
    """Standardise a batch with moments pooled over every cell of every item."""
    if not batch:
        raise ValueError("empty batch")
    stacked = np.stack(batch).astype(np.float64)
    mean, std = stacked.mean(), stacked.std()
    if std == 0:
        raise ValueError("degenerate batch")
    return list((stacked - mean) / std)


def mixup(s: np.ndarray, q: MixupQueue, rng: np.random.Generator, alpha: float = 0.4,
          lam: float | None = None, push: bool = True) -> np.ndarray:
    """Log-mixup-exp with a background drawn from the queue.

    ``out = ln((1 - lam) e^s + lam e^m)`` with ``lam ~ U(0, alpha)``; the
    input is pushed into the queue afterwards. An empty queue returns ``s``.
    """
    if len(q) == 0:
        out = s.copy()
    else:
        m = q.sample(rng)
        if m.shape != s.shape:
            raise ValueError(f"mixup partner shape {m.shape} != {s.shape}")
        if lam is None:
            lam = rng.uniform(0.0, alpha)
        if lam == 0:
            out = s.copy()
        else:
            out = np.logaddexp(math.log1p(-lam) + s, math.log(lam) + m)
    if push:
        q.push(s)
    return out


def resized_crop(s: np.ndarray, top: float, left: float, h: int, w: int,
                 out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Bilinear resize of the window ``s[top:top+h, left:left+w]`` to ``out_shape``.

    Corner-aligned sampling: output row ``o`` reads source row
    ``top + o * (h - 1) / (H_out - 1)``, so a full-size window is an exact copy.
    Sample positions are clamped to the array.
    """
    H, W = out_shape or s.shape

    def coords(start, size, n_out, n_src):
        pos = start + np.arange(n_out) * ((size - 1) / (n_out - 1) if n_out > 1 else 0.0)
        pos = np.clip(pos, 0, n_src - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_src - 1)
        return i0, i1, pos - i0

    r0, r1, fr = coords(top, h, H, s.shape[0])
    c0, c1, fc = coords(left, w, W, s.shape[1])
    fr, fc = fr[:, None], fc[None, :]
    top_row = s[r0][:, c0] * (1 - fc) + s[r0][:, c1] * fc
    bot_row = s[r1][:, c0] * (1 - fc) + s[r1][:, c1] * fc
    return top_row * (1 - fr) + bot_row * fr


def rrc(s: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random resize crop over a virtual canvas.

    The canvas is the input centred in an ``F x round(T * max(1, time_hi))``
    field of ``cfg.rrc_fill``; a crop of sampled size is taken at a uniform
    offset and resized back to ``F x T``.
    """
    F, T = s.shape
    canvas_w = int(round(T * max(1.0, cfg.rrc_time_scale[1])))
    canvas = np.full((F, canvas_w), cfg.rrc_fill, dtype=np.float64)
    x0 = (canvas_w - T) // 2
    canvas[:, x0:x0 + T] = s
    h = min(max(int(round(rng.uniform(*cfg.rrc_freq_scale) * F)), 1), F)
    w = min(max(int(round(rng.uniform(*cfg.rrc_time_scale) * T)), 1), canvas_w)
    top = int(rng.integers(0, F - h + 1))
    left = int(rng.integers(0, canvas_w - w + 1))
    return resized_crop(canvas, top, left, h, w, (F, T))


def rlf(s: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
        gain: float | None = None) -> np.ndarray:
    """Add a linear log-domain ramp from 0 (first frame) to ``gain`` (last frame)."""
    if gain is None:
        gain = rng.uniform(*cfg.rlf_gain_range)
    T = s.shape[1]
    ramp = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    return s + gain * ramp[None, :]


def add_noise(s: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
              variance: float | None = None) -> np.ndarray:
    """Add i.i.d. N(0, lam) noise, ``lam ~ U(0, noise_alpha)`` read as a variance."""
    if variance is None:
        variance = rng.uniform(0.0, cfg.noise_alpha) if cfg.noise_alpha > 0 else 0.0
    if variance == 0:
        return s.copy()
    return s + rng.normal(0.0, math.sqrt(variance), size=s.shape)


def view_rngs(clip_seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    return tuple(np.random.default_rng(np.random.SeedSequence([clip_seed, v])) for v in (0, 1))


def augment_view(s: np.ndarray, cfg: AugmentConfig, q: MixupQueue,
                 rng: np.random.Generator) -> np.ndarray:
    v = s
    if cfg.use_mixup:
        v = mixup(v, q, rng, cfg.mixup_alpha, push=False)
    if cfg.use_rrc:
        v = rrc(v, cfg, rng)
    if cfg.use_rlf:
        v = rlf(v, cfg, rng)
    if cfg.use_noise:
        v = add_noise(v, cfg, rng)
    return v if v is not s else s.copy()


def make_views(s: np.ndarray, cfg: AugmentConfig, q: MixupQueue, clip_seed: int,
               stats: DatasetStats | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views of one raw log-mel clip.

    In ``dataset`` mode ``s`` is normalised with ``stats`` first; in
    ``pre_post`` mode ``s`` must already be batch-normalised and the caller
    applies the post-normalisation (see :func:`make_batch_views`). The
    normalised input is pushed to the Mixup queue once both views are made.
    """
    if cfg.norm_mode == "dataset":
        if stats is None:
            raise ValueError("dataset normalisation needs DatasetStats")
        s = normalize(s, stats)
    rng1, rng2 = view_rngs(clip_seed)
    v1 = augment_view(s, cfg, q, rng1)
    v2 = augment_view(s, cfg, q, rng2)
    if cfg.use_mixup:
        q.push(s)
    return v1, v2


def make_batch_views(specs: list[np.ndarray], cfg: AugmentConfig, q: MixupQueue,
                     clip_seeds: list[int], stats: DatasetStats | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Views for a batch, returned as two ``B x F x T`` arrays."""
    if cfg.norm_mode == "pre_post":
        specs = pre_post_norm(specs)
    pairs = [make_views(s, cfg, q, seed, stats) for s, seed in zip(specs, clip_seeds)]
    v1 = [p[0] for p in pairs]
    v2 = [p[1] for p in pairs]
    if cfg.norm_mode == "pre_post":
        v1, v2 = pre_post_norm(v1), pre_post_norm(v2)
    return np.stack(v1), np.stack(v2)


def n_masked(n_patches: int, r: float) -> int:
    """``round(r * N)`` with halves rounded up."""
    return int(math.floor(r * n_patches + 0.5))


def mask_patches(n_patches: int, r: float, rng: np.random.Generator) -> MaskPlan:
    """Shuffle patch indices and drop the last ``round(r * N)``."""
    if not 0 <= r < 1:
        raise ValueError("masking ratio must lie in [0, 1)")
    if n_patches <= 0:
        raise ValueError("n_patches must be positive")
    order = rng.permutation(n_patches)
    m = n_masked(n_patches, r)
    return MaskPlan(order[: n_patches - m], order[n_patches - m:], r)


def masking_ratio_at(epoch: int, beta: float, total_epochs: int, warmup_epochs: int) -> float:
    """Zero during warm-up, then a quarter-sine ramp reaching ``beta`` at ``total_epochs``."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError("epoch out of range")
    if warmup_epochs > total_epochs:
        raise ValueError("warmup_epochs must not exceed total_epochs")
    if epoch < warmup_epochs:
        return 0.0
    if total_epochs == warmup_epochs:
        return beta
    return beta * math.sin(math.pi / 2 * (epoch - warmup_epochs) / (total_epochs - warmup_epochs))
