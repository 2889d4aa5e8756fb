"""Frozen-embedding extraction and the shallow-MLP probe."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__
from .augment import normalize
from .data import DatasetStats
from .dsp import MelConfig, Spectrogram, Waveform, crop_or_pad, logmel

log = logging.getLogger(__name__)


# -- extraction ------------------------------------------------------------------

@dataclass
class EmbeddingRecord:
    clip_id: str
    vector: np.ndarray
    timestamp_ms: float | None = None


class Embedder:
    """Frozen encoder plus the preprocessing it was trained with."""

    def __init__(self, encoder: nn.Module, stats: DatasetStats, mel_cfg: MelConfig = MelConfig(),
                 crop_frames: int = 96, pooling: str = "mean", dtype=torch.float32):
        if pooling not in ("mean", "max"):
            raise ValueError("pooling must be 'mean' or 'max'")
        self.encoder = encoder.eval()
        self.stats = stats
        self.mel_cfg = mel_cfg
        self.crop_frames = crop_frames
        self.pooling = pooling
        self.dtype = dtype

    @classmethod
    def from_checkpoint(cls, path: str | Path, pooling: str = "mean") -> "Embedder":
        from .train import load_checkpoint

        ck = load_checkpoint(path)
        if ck.stats is None:
            raise ValueError("checkpoint carries no dataset statistics")
        return cls(ck.state.model.encoder, ck.stats, ck.mel_cfg, ck.cfg.crop_frames, pooling,
                   ck.cfg.dtype)

    @torch.no_grad()
    def encode_windows(self, windows: np.ndarray) -> np.ndarray:
        """Raw log-mel windows ``(n, F, crop_frames)`` -> representations ``(n, d)``."""
        x = torch.from_numpy(normalize(windows, self.stats)).to(self.dtype)
        return self.encoder(x).double().numpy()

    def _pad(self, values: np.ndarray, n_frames: int) -> np.ndarray:
        return crop_or_pad(Spectrogram(values), n_frames, np.random.default_rng(0),
                           pad_value=self.mel_cfg.silence_value).values

    def scene_embedding(self, spec: np.ndarray) -> np.ndarray:
        """Split into consecutive ``crop_frames`` windows (last one silence-padded),
        encode each and pool."""
        T = spec.shape[1]
        if T < 1:
            raise ValueError("clip shorter than one frame")
        n_win = math.ceil(T / self.crop_frames)
        padded = self._pad(spec, n_win * self.crop_frames)
        windows = np.stack([padded[:, i * self.crop_frames:(i + 1) * self.crop_frames]
                            for i in range(n_win)])
        reps = self.encode_windows(windows)
        return reps.mean(axis=0) if self.pooling == "mean" else reps.max(axis=0)

    def waveform_logmel(self, w: Waveform) -> np.ndarray:
        if len(w.samples) < self.mel_cfg.win_length:
            w = Waveform(np.pad(w.samples, (0, self.mel_cfg.win_length - len(w.samples))),
                         w.sample_rate)
        return logmel(w, self.mel_cfg).values


def extract_scene_embeddings(embedder: Embedder, clips: list[tuple[str, np.ndarray]]
                             ) -> list[EmbeddingRecord]:
    """``clips`` are ``(clip_id, raw log-mel F x T)`` pairs."""
    return [EmbeddingRecord(cid, embedder.scene_embedding(spec)) for cid, spec in clips]


def timestamp_segments(duration_ms: float, segment_ms: float = 950.0,
                       hop_ms: float = 50.0) -> list[tuple[float, float]]:
    """``(start_ms, center_ms)`` of each segment; short clips get one padded segment."""
    if duration_ms < segment_ms:
        return [(0.0, segment_ms / 2)]
    count = int(math.floor((duration_ms - segment_ms) / hop_ms + 1e-9)) + 1
    return [(k * hop_ms, k * hop_ms + segment_ms / 2) for k in range(count)]


def extract_timestamp_embeddings(embedder: Embedder, clip_id: str, w: Waveform,
                                 segment_ms: float = 950.0, hop_ms: float = 50.0
                                 ) -> list[EmbeddingRecord]:
    """One embedding per segment, timestamped at the segment centre.

    A segment of ``segment_ms`` spans ``segment_ms / frame_hop + 1`` frames
    (950 ms -> 96 frames at a 10 ms hop).
    """
    frame_hop = embedder.mel_cfg.hop_ms
    seg_frames = int(round(segment_ms / frame_hop)) + 1
    spec = embedder.waveform_logmel(w)
    segs = timestamp_segments(1000.0 * w.duration_s, segment_ms, hop_ms)
    last_start = int(round(segs[-1][0] / frame_hop))
    spec = embedder._pad(spec, max(spec.shape[1], last_start + seg_frames))
    windows = []
    for start_ms, _ in segs:
        s0 = int(round(start_ms / frame_hop))
        win = spec[:, s0:s0 + seg_frames]
        windows.append(embedder._pad(win, embedder.crop_frames) if seg_frames != embedder.crop_frames
                       else win)
    reps = embedder.encode_windows(np.stack(windows))
    return [EmbeddingRecord(clip_id, r, center) for (_, center), r in zip(segs, reps)]


def write_embeddings(prefix: str | Path, records: list[EmbeddingRecord], checkpoint_hash: str = "",
                     config_hash: str = "", csv: bool = False) -> tuple[Path, Path]:
    """``<prefix>.f32`` (little-endian float32, row-major) plus ``<prefix>.json`` sidecar."""
    prefix = Path(prefix)
    mat = np.stack([r.vector for r in records]).astype("<f4")
    bin_path, meta_path = prefix.with_suffix(".f32"), prefix.with_suffix(".json")
    bin_path.write_bytes(mat.tobytes())
    has_ts = any(r.timestamp_ms is not None for r in records)
    meta = {"clip_ids": [r.clip_id for r in records],
            "timestamps": [r.timestamp_ms for r in records] if has_ts else None,
            "dim": int(mat.shape[1]), "n_rows": int(mat.shape[0]),
            "checkpoint_hash": checkpoint_hash, "config_hash": config_hash,
            "code_version": __version__}
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")
    if csv:
        with open(prefix.with_suffix(".csv"), "w") as f:
            for r, row in zip(records, mat):
                ts = "" if r.timestamp_ms is None else f"{r.timestamp_ms:g}"
                f.write(",".join([r.clip_id, ts] + [f"{v:.8g}" for v in row]) + "\n")
    return bin_path, meta_path


def read_embeddings(prefix: str | Path) -> tuple[np.ndarray, dict]:
    prefix = Path(prefix)
    meta = json.loads(prefix.with_suffix(".json").read_text())
    mat = np.frombuffer(prefix.with_suffix(".f32").read_bytes(), dtype="<f4")
    return mat.reshape(meta["n_rows"], meta["dim"]).astype(np.float64), meta


# -- metrics ---------------------------------------------------------------------

def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(positives, dtype=bool)[order]
    if not hits.any():
        raise ValueError("no positives")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def compute_metric(scores: np.ndarray, labels: np.ndarray, kind: str) -> float:
    """``accuracy``: top-1 over ``(n, K)`` scores vs integer labels.
    ``mAP``: macro AP over ``(n, K)`` scores vs a ``(n, K)`` 0/1 matrix; classes
    without positives are skipped."""
    scores = np.asarray(scores, dtype=np.float64)
    if kind == "accuracy":
        return float(np.mean(scores.argmax(axis=1) == np.asarray(labels)))
    if kind == "mAP":
        labels = np.asarray(labels)
        aps = []
        for k in range(labels.shape[1]):
            if not labels[:, k].any():
                log.info("class %d has no positives; excluded from mAP", k)
                continue
            aps.append(average_precision(scores[:, k], labels[:, k]))
        if not aps:
            raise ValueError("no class has positives")
        return float(np.mean(aps))
    raise ValueError(f"unknown metric {kind!r}")


# -- probe ----------------------------------------------------------------------

@dataclass
class ProbeConfig:
    hidden_layers: int = 1
    hidden_width: int = 1024
    max_epochs: int = 500
    check_every: int = 3
    patience: int = 20
    lr: float = 1e-3
    batch_size: int = 1024
    init_scale: float = 1.0
    weight_decay: float = 0.0
    task_type: str = "multiclass"  # multiclass | multilabel
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1 or self.check_every < 1 or self.max_epochs < 1:
            raise ValueError("patience, check_every and max_epochs must be >= 1")
        if self.task_type not in ("multiclass", "multilabel"):
            raise ValueError("task_type must be multiclass or multilabel")

    @property
    def config_id(self) -> str:
        return (f"h{self.hidden_layers}_w{self.hidden_width}_lr{self.lr:g}"
                f"_init{self.init_scale:g}")


def default_probe_grid(task_type: str = "multiclass", **overrides) -> list[ProbeConfig]:
    """8 configs: hidden layers {1, 2} x lr {1e-3, 3e-4} x init scale {1, 0.1}."""
    return [ProbeConfig(hidden_layers=h, lr=lr, init_scale=s, task_type=task_type, **overrides)
            for h in (1, 2) for lr in (1e-3, 3e-4) for s in (1.0, 0.1)]


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        sets = [set(map(int, a)) for a in (self.train, self.val, self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("train/val/test splits overlap")


def stratified_split(labels, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Split:
    rng = np.random.default_rng(seed)
    keys = [l if isinstance(l, str) else json.dumps(l) for l in labels]
    parts = ([], [], [])
    for k in sorted(set(keys)):
        idx = rng.permutation([i for i, kk in enumerate(keys) if kk == k])
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        parts[0].extend(idx[:n_tr])
        parts[1].extend(idx[n_tr:n_tr + n_va])
        parts[2].extend(idx[n_tr + n_va:])
    return Split(*(np.sort(np.array(p, dtype=int)) for p in parts))


@dataclass
class ProbeRun:
    config_id: str
    val_score: float
    best_epoch: int
    epochs_run: int
    model: nn.Module = field(repr=False)


@dataclass
class ProbeReport:
    task_name: str
    metric_name: str
    value: float
    chosen_config_id: str
    n_train: int
    n_val: int
    n_test: int
    val_scores: dict
    best_epoch: int
    epochs_run: int
    code_version: str = __version__

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")


def _mlp(d_in: int, n_out: int, cfg: ProbeConfig) -> nn.Module:
    layers, d = [], d_in
    for _ in range(cfg.hidden_layers):
        layers += [nn.Linear(d, cfg.hidden_width), nn.ReLU()]
        d = cfg.hidden_width
    layers.append(nn.Linear(d, n_out))
    net = nn.Sequential(*layers)
    if cfg.init_scale != 1.0:
        with torch.no_grad():
            for m in net.modules():
                if isinstance(m, nn.Linear):
                    m.weight.mul_(cfg.init_scale)
    return net.double()


def _score(model: nn.Module, X: torch.Tensor, y: np.ndarray, cfg: ProbeConfig) -> float:
    return _evaluate(model, X, y, cfg)[0]


def _evaluate(model: nn.Module, X: torch.Tensor, y: np.ndarray, cfg: ProbeConfig
              ) -> tuple[float, float]:
    """(metric, loss) on a held-out set."""
    model.eval()
    with torch.no_grad():
        out = model(X)
        if cfg.task_type == "multiclass":
            loss = nn.functional.cross_entropy(out, torch.from_numpy(np.asarray(y, dtype=np.int64)))
        else:
            loss = nn.functional.binary_cross_entropy_with_logits(
                out, torch.from_numpy(np.asarray(y, dtype=np.float64)))
    kind = "accuracy" if cfg.task_type == "multiclass" else "mAP"
    return compute_metric(out.numpy(), y, kind), float(loss)


def fit_probe(X_tr, y_tr, X_va, y_va, n_out: int, cfg: ProbeConfig) -> ProbeRun:
    """Adam training with validation checks every ``check_every`` epochs; stops
    after ``patience`` checks without improvement and restores the best model.

    A check improves when the validation metric rises, or when it ties and the
    validation loss falls. The tie rule keeps training going once a coarse
    metric such as accuracy saturates.
    """
    torch.manual_seed(cfg.seed)
    model = _mlp(X_tr.shape[1], n_out, cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.task_type == "multiclass":
        target = torch.from_numpy(np.asarray(y_tr, dtype=np.int64))
        loss_fn = nn.CrossEntropyLoss()
    else:
        target = torch.from_numpy(np.asarray(y_tr, dtype=np.float64))
        loss_fn = nn.BCEWithLogitsLoss()
    gen = torch.Generator().manual_seed(cfg.seed)
    n = X_tr.shape[0]
    best, best_loss, best_state, best_epoch, bad, epoch = -math.inf, math.inf, None, 0, 0, 0
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        for idx in torch.randperm(n, generator=gen).split(cfg.batch_size):
            opt.zero_grad()
            loss_fn(model(X_tr[idx]), target[idx]).backward()
            opt.step()
        if epoch % cfg.check_every == 0 or epoch == cfg.max_epochs:
            score, val_loss = _evaluate(model, X_va, y_va, cfg)
            if score > best or (score == best and val_loss < best_loss):
                best, best_loss, best_epoch, bad = score, val_loss, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                bad += 1
                if bad >= cfg.patience:
                    break
    model.load_state_dict(best_state)
    return ProbeRun(cfg.config_id, best, best_epoch, epoch, model)


def encode_labels(labels: list, task_type: str) -> tuple[np.ndarray, list[str]]:
    if task_type == "multiclass":
        classes = sorted({str(l) for l in labels})
        index = {c: i for i, c in enumerate(classes)}
        return np.array([index[str(l)] for l in labels]), classes
    split = [l if isinstance(l, list) else [s for s in str(l).split(";") if s] for l in labels]
    classes = sorted({c for ls in split for c in ls})
    index = {c: i for i, c in enumerate(classes)}
    mat = np.zeros((len(labels), len(classes)), dtype=np.int64)
    for i, ls in enumerate(split):
        for c in ls:
            mat[i, index[c]] = 1
    return mat, classes


def train_probe(embeddings: np.ndarray, labels: list, split: Split, grid: list[ProbeConfig],
                task_name: str = "task") -> ProbeReport:
    """Fit every grid config, select on validation, report the test metric."""
    if not grid:
        raise ValueError("empty probe grid")
    task_type = grid[0].task_type
    y, classes = encode_labels(labels, task_type)
    if task_type == "multiclass" and len(set(y[split.train].tolist())) < 2:
        raise ValueError("training labels contain a single class")
    X = np.asarray(embeddings, dtype=np.float64)
    mu, sd = X[split.train].mean(axis=0), X[split.train].std(axis=0) + 1e-8
    Xs = torch.from_numpy((X - mu) / sd)
    runs = [fit_probe(Xs[split.train], y[split.train], Xs[split.val], y[split.val],
                      len(classes), cfg) for cfg in grid]
    best_i = max(range(len(runs)), key=lambda i: (runs[i].val_score, -i))
    chosen = runs[best_i]
    value = _score(chosen.model, Xs[split.test], y[split.test], grid[best_i])
    return ProbeReport(task_name, "accuracy" if task_type == "multiclass" else "mAP", value,
                       chosen.config_id, len(split.train), len(split.val), len(split.test),
                       {r.config_id: r.val_score for r in runs}, chosen.best_epoch,
                       chosen.epochs_run)
