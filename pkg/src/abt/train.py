"""Barlow Twins pretraining: views -> shared encoder/projector -> loss -> optimizer.

Randomness is derived from ``(seed, epoch, step, ...)`` through
``numpy.random.SeedSequence``, so any step can be replayed from a checkpoint
without saving generator internals. The only carried random-process state is
the Mixup queue, which is checkpointed at epoch boundaries.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
from torch import nn

from . import __version__, checkpoint
from .augment import AugmentConfig, MixupQueue, make_batch_views, mask_patches, masking_ratio_at
from .data import DatasetStats
from .diagnostics import embedding_feature_stats
from .dsp import MelConfig, Spectrogram, crop_or_pad
from .encoder import EncoderConfig, build_encoder
from .objective import LossConfig, barlow_twins_loss
from .optim import OptimConfig, build_optimizer, lr_factor, set_lr_factor
from .projector import Projector, ProjectorConfig
from .schema import config_hash, from_dict, to_dict

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class MaskingConfig:
    enabled: bool = False
    ratio: float = 0.0
    schedule: bool = False
    beta: float = 0.3
    warmup_epochs: int = 10

    def __post_init__(self):
        if not 0 <= self.ratio < 1 or not 0 <= self.beta < 1:
            raise ValueError("masking ratios must lie in [0, 1)")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    crop_frames: int = 96
    seed: int = 0
    checkpoint_every: int = 1
    precision: str = "float32"  # float32 | float64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    prefetch_batches: int = 2
    max_steps: int | None = None  # stop early, possibly mid-epoch

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.crop_frames <= 0 or self.epochs <= 0 or self.checkpoint_every <= 0:
            raise ValueError("crop_frames, epochs and checkpoint_every must be positive")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.masking.enabled and self.encoder.kind != "vit":
            raise ValueError("patch masking requires a ViT encoder")
        self.projector.in_dim = self.encoder.rep_dim
        if self.encoder.kind == "vit":
            self.encoder.vit.max_frames = self.crop_frames

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32


@dataclass
class StepMetrics:
    step: int
    epoch: int
    loss: float
    invariance_term: float
    redundancy_term: float
    offdiag_mean_abs: float
    diag_mean: float
    feature_std_min: float
    feature_std_median: float
    mask_ratio: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


class BarlowTwins(nn.Module):
    """One encoder and one projector shared by both arms."""

    def __init__(self, encoder_cfg: EncoderConfig, projector_cfg: ProjectorConfig):
        super().__init__()
        self.encoder = build_encoder(encoder_cfg)
        self.projector = Projector(projector_cfg)

    def forward(self, x: torch.Tensor, kept: torch.Tensor | None = None):
        y = self.encoder(x, kept) if kept is not None else self.encoder(x)
        return y, self.projector(y)


def build_model(cfg: TrainConfig) -> BarlowTwins:
    torch.manual_seed(_derive_seed(cfg.seed, "init"))
    return BarlowTwins(cfg.encoder, cfg.projector).to(cfg.dtype)


def _derive_seed(*keys) -> int:
    ints = [k if isinstance(k, int) else int.from_bytes(str(k).encode(), "little") % (2 ** 32)
            for k in keys]
    return int(np.random.SeedSequence(ints).generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class ViewBatch:
    step: int
    epoch: int
    view1: np.ndarray
    view2: np.ndarray
    kept: np.ndarray | None = None
    mask_ratio: float = 0.0


def prepare_batch(clips: list[np.ndarray], cfg: TrainConfig, mixup_queue: MixupQueue,
                  stats: DatasetStats | None, step: int, epoch: int,
                  mel_cfg: MelConfig = MelConfig()) -> ViewBatch:
    """Crop/pad each clip, make the two views and (optionally) a view-2 mask."""
    cropped, seeds = [], []
    for j, clip in enumerate(clips):
        rng = np.random.default_rng(_derive_seed(cfg.seed, epoch, step, j, "crop"))
        cropped.append(crop_or_pad(Spectrogram(clip), cfg.crop_frames, rng,
                                   pad_value=mel_cfg.silence_value).values)
        seeds.append(_derive_seed(cfg.seed, epoch, step, j, "views"))
    v1, v2 = make_batch_views(cropped, cfg.augment, mixup_queue, seeds, stats)
    kept, ratio = None, 0.0
    if cfg.masking.enabled:
        m = cfg.masking
        ratio = (masking_ratio_at(epoch, m.beta, cfg.epochs, min(m.warmup_epochs, cfg.epochs))
                 if m.schedule else m.ratio)
        n = cfg.encoder.vit.n_patches
        rng = np.random.default_rng(_derive_seed(cfg.seed, epoch, step, "mask"))
        kept = np.stack([mask_patches(n, ratio, rng).kept_indices for _ in clips])
    return ViewBatch(step, epoch, v1, v2, kept, ratio)


def _c_summary(C: torch.Tensor) -> str:
    finite = torch.isfinite(C)
    vals = C[finite]
    return (f"C: {int((~finite).sum())} non-finite of {C.numel()}, "
            f"finite |C| max {float(vals.abs().max()) if vals.numel() else float('nan'):.4g}, "
            f"diag mean {float(torch.nanmean(torch.diagonal(C))):.4g}")


def train_step(model: BarlowTwins, optimizer: torch.optim.Optimizer, batch: ViewBatch,
               cfg: TrainConfig) -> StepMetrics:
    model.train()
    dtype = cfg.dtype
    x1 = torch.from_numpy(batch.view1).to(dtype)
    x2 = torch.from_numpy(batch.view2).to(dtype)
    kept = torch.from_numpy(batch.kept) if batch.kept is not None else None
    torch.manual_seed(_derive_seed(cfg.seed, batch.epoch, batch.step, "torch"))
    _, z1 = model(x1)
    _, z2 = model(x2, kept)
    loss, inv, red, C = barlow_twins_loss(z1, z2, cfg.loss)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss at step {batch.step}; {_c_summary(C.detach())}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    with torch.no_grad():
        C = C.detach()
        d = C.shape[0]
        diag = torch.diagonal(C)
        offdiag_abs = (C.abs().sum() - diag.abs().sum()) / max(d * d - d, 1)
        std_min, std_med = embedding_feature_stats(z1.detach().double().numpy())
    return StepMetrics(batch.step, batch.epoch, loss.item(), inv.item(), red.item(),
                       offdiag_abs.item(), diag.mean().item(), std_min, std_med, batch.mask_ratio)


def prefetch(it: Iterator, capacity: int = 2) -> Iterator:
    """Run ``it`` in a worker thread behind a bounded buffer (blocks when full)."""
    if capacity <= 0:
        yield from it
        return
    buf: queue.Queue = queue.Queue(maxsize=capacity)
    done = object()
    stop = threading.Event()

    def work():
        try:
            for item in it:
                while not stop.is_set():
                    try:
                        buf.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            buf.put(done)
        except BaseException as exc:  # forwarded to the consumer
            buf.put(exc)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        while True:
            item = buf.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        t.join()


def epoch_order(n_clips: int, cfg: TrainConfig, epoch: int) -> list[np.ndarray]:
    """Shuffled full batches for one epoch; the partial remainder is dropped."""
    rng = np.random.default_rng(_derive_seed(cfg.seed, epoch, "shuffle"))
    perm = rng.permutation(n_clips)
    n_full = n_clips // cfg.batch_size
    if n_clips % cfg.batch_size:
        log.debug("epoch %d: dropping %d clips in the partial batch", epoch, n_clips % cfg.batch_size)
    return [perm[i * cfg.batch_size:(i + 1) * cfg.batch_size] for i in range(n_full)]


@dataclass
class TrainState:
    model: BarlowTwins
    optimizer: torch.optim.Optimizer
    mixup_queue: MixupQueue
    epoch: int = 0  # completed epochs
    step: int = 0   # completed steps
    last_metrics: dict | None = None


def new_state(cfg: TrainConfig) -> TrainState:
    model = build_model(cfg)
    opt = build_optimizer(model, cfg.optim, cfg.batch_size)
    return TrainState(model, opt, MixupQueue(cfg.augment.mixup_queue_len))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(state: TrainState, cfg: TrainConfig, path: str | Path,
                    stats: DatasetStats | None = None, mel_cfg: MelConfig = MelConfig()) -> str:
    tensors = {f"model/{k}": v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    opt_sd = state.optimizer.state_dict()
    scalars = {}
    for idx, st in opt_sd["state"].items():
        for k, v in st.items():
            if torch.is_tensor(v):
                tensors[f"optim/{idx}/{k}"] = v.detach().cpu().numpy()
            else:
                scalars[f"{idx}/{k}"] = v
    tensors["mixup_queue"] = state.mixup_queue.to_array()
    meta = {
        "config": to_dict(cfg),
        "config_hash": config_hash(cfg),
        "mel_config": to_dict(mel_cfg),
        "dataset_stats": stats.to_json() if stats is not None else None,
        "epoch": state.epoch,
        "step": state.step,
        "seed": cfg.seed,
        "optimizer": {"param_groups": to_dict(opt_sd["param_groups"]), "scalars": scalars},
        "running_metrics": state.last_metrics,
        "code_version": __version__,
    }
    return checkpoint.save(path, meta, tensors)


@dataclass
class LoadedCheckpoint:
    cfg: TrainConfig
    state: TrainState
    stats: DatasetStats | None
    mel_cfg: MelConfig
    meta: dict


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    meta, tensors = checkpoint.load(path)
    cfg = from_dict(TrainConfig, meta["config"])
    mel_cfg = from_dict(MelConfig, meta.get("mel_config") or {})
    state = new_state(cfg)
    model_sd = {k[len("model/"):]: torch.from_numpy(v) for k, v in tensors.items()
                if k.startswith("model/")}
    state.model.load_state_dict(model_sd)
    opt_state: dict[int, dict] = {}
    for k, v in tensors.items():
        if k.startswith("optim/"):
            _, idx, key = k.split("/", 2)
            opt_state.setdefault(int(idx), {})[key] = torch.from_numpy(v)
    for k, v in meta["optimizer"]["scalars"].items():
        idx, key = k.split("/", 1)
        opt_state.setdefault(int(idx), {})[key] = v
    state.optimizer.load_state_dict({"state": opt_state,
                                     "param_groups": meta["optimizer"]["param_groups"]})
    q = tensors.get("mixup_queue")
    if q is not None and q.size:
        state.mixup_queue = MixupQueue.from_array(cfg.augment.mixup_queue_len, q)
    state.epoch, state.step = meta["epoch"], meta["step"]
    state.last_metrics = meta.get("running_metrics")
    stats = DatasetStats.from_json(meta["dataset_stats"]) if meta.get("dataset_stats") else None
    return LoadedCheckpoint(cfg, state, stats, mel_cfg, meta)


# -- pretraining loop ----------------------------------------------------------

@dataclass
class PretrainResult:
    state: TrainState
    metrics: list[dict]
    checkpoint_path: Path | None
    seconds: float


def pretrain(cfg: TrainConfig, clips: list[np.ndarray], stats: DatasetStats | None,
             out_dir: str | Path | None = None, resume: str | Path | None = None,
             mel_cfg: MelConfig = MelConfig(), stop_after_epoch: int | None = None,
             on_step: Callable[[StepMetrics], None] | None = None) -> PretrainResult:
    """Run (or resume) pretraining on in-memory raw log-mel clips.

    Writes ``metrics.jsonl`` (one line per step) and checkpoints
    ``epoch_XXXX.ckpt`` every ``checkpoint_every`` epochs plus ``final.ckpt``
    when ``out_dir`` is given.
    """
    if not clips:
        raise ValueError("no clips to train on")
    if cfg.augment.norm_mode == "dataset" and stats is None:
        raise ValueError("dataset normalisation needs DatasetStats")
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    metrics: list[dict] = []
    if resume is not None:
        loaded = load_checkpoint(resume)
        if config_hash(loaded.cfg) != config_hash(cfg):
            log.warning("resuming with a config that differs from the checkpoint's")
        state = loaded.state
    else:
        state = new_state(cfg)
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_path = out / "metrics.jsonl"
        if resume is not None and log_path.exists():
            kept = [json.loads(line) for line in log_path.read_text().splitlines() if line]
            metrics = [m for m in kept if m["step"] < state.step]
        log_path.write_text("".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics))
    steps_per_epoch = len(clips) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"{len(clips)} clips cannot fill a batch of {cfg.batch_size}")
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    last_epoch = cfg.epochs if stop_after_epoch is None else min(stop_after_epoch, cfg.epochs)
    ckpt_path = None

    for epoch in range(state.epoch, last_epoch):
        if state.step >= total_steps:
            break

        def batches(epoch=epoch, start=state.step):
            base = epoch * steps_per_epoch
            for k, idx in enumerate(epoch_order(len(clips), cfg, epoch)):
                if base + k < start:  # consumed before a mid-epoch stop
                    continue
                if base + k >= total_steps:
                    return
                yield prepare_batch([clips[i] for i in idx], cfg, state.mixup_queue, stats,
                                    base + k, epoch, mel_cfg)

        for batch in prefetch(batches(), cfg.prefetch_batches):
            set_lr_factor(state.optimizer, lr_factor(batch.step, total_steps, cfg.optim.schedule))
            m = train_step(state.model, state.optimizer, batch, cfg)
            state.step = batch.step + 1
            state.last_metrics = m.to_json()
            metrics.append(m.to_json())
            if out is not None:
                with open(out / "metrics.jsonl", "a") as f:
                    f.write(json.dumps(m.to_json(), sort_keys=True) + "\n")
            if on_step is not None:
                on_step(m)
        if state.step < (epoch + 1) * steps_per_epoch:
            break  # max_steps reached mid-epoch; the epoch stays open for resume
        state.epoch = epoch + 1
        log.info("epoch %d/%d step %d loss %.4f", state.epoch, cfg.epochs, state.step,
                 metrics[-1]["loss"] if metrics else float("nan"))
        if out is not None and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == last_epoch):
            ckpt_path = out / "checkpoints" / f"epoch_{state.epoch:04d}.ckpt"
            save_checkpoint(state, cfg, ckpt_path, stats, mel_cfg)
    if out is not None:
        final = out / "final.ckpt"
        save_checkpoint(state, cfg, final, stats, mel_cfg)
        ckpt_path = final
    return PretrainResult(state, metrics, ckpt_path, time.perf_counter() - t0)
