"""Run configuration: one YAML file with mel / train / probe / synth / paths sections."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SynthSpec
from .dsp import MelConfig
from .eval import ProbeConfig, default_probe_grid
from .schema import ConfigError, apply_overrides, config_hash, from_dict, to_dict
from .train import TrainConfig


@dataclass
class PathsConfig:
    manifest: str | None = None
    stats: str | None = None
    checkpoint: str | None = None


@dataclass
class RunConfig:
    mel: MelConfig = field(default_factory=MelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    probe_grid: str = "default"  # default (8 configs) | single
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.probe_grid not in ("default", "single"):
            raise ValueError("probe_grid must be 'default' or 'single'")

    def probe_configs(self) -> list[ProbeConfig]:
        if self.probe_grid == "single":
            return [self.probe]
        p = self.probe
        return default_probe_grid(p.task_type, hidden_width=p.hidden_width, max_epochs=p.max_epochs,
                                  check_every=p.check_every, patience=p.patience,
                                  batch_size=p.batch_size, weight_decay=p.weight_decay, seed=p.seed)

    @property
    def hash(self) -> str:
        return config_hash(self)


# Named starting points; each is a partial config merged under the user's file.
PRESETS: dict[str, dict] = {
    # AudioNTT + LARS pretraining recipe
    "audiontt": {"train": {"encoder": {"kind": "audiontt"},
                           "optim": {"name": "lars"},
                           "projector": {"hidden_dim": 8192, "out_dim": 1048}}},
    # ViT_C-B + AdamW recipe
    "vitc_b": {"train": {"encoder": {"kind": "vit", "vit": {"variant": "vit_c", "size": "B"}},
                         "optim": {"name": "adamw"}}},
    # sweep / ablation profile: smaller projector output
    "ablation": {"train": {"projector": {"out_dim": 256}}},
    # desk scale: ViT_C-T on the synthetic corpus, single CPU
    "desk": {
        "synth": {"n_clips": 240, "seed": 0},
        "train": {
            # 240 clips // 32 = 7 steps per epoch; 286 epochs cover max_steps
            "epochs": 286, "max_steps": 2000, "batch_size": 32, "crop_frames": 32,
            "checkpoint_every": 50,
            "encoder": {"kind": "vit", "vit": {"variant": "vit_c", "size": "T",
                                               "patch_h": 16, "patch_w": 16}},
            "projector": {"hidden_dim": 1024, "out_dim": 64},
            "loss": {"lambd": 0.05},
            "optim": {"name": "adamw", "adamw": {"lr": 2e-4, "weight_decay": 0.06}},
        },
        "probe_grid": "single",
    },
}


def deep_merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, preset: str | None = None,
                overrides: list[str] | None = None, seed: int | None = None) -> RunConfig:
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = copy.deepcopy(PRESETS[preset])
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        if "preset" in loaded:
            name = loaded.pop("preset")
            if name not in PRESETS:
                raise ConfigError(f"unknown preset {name!r}")
            data = deep_merge(PRESETS[name], data)
        data = deep_merge(data, loaded)
    data = apply_overrides(data, overrides or [])
    if seed is not None:
        for section in ("train", "probe", "synth"):
            data.setdefault(section, {})["seed"] = seed
    return from_dict(RunConfig, data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    from . import __version__

    header = f"# config_hash: {cfg.hash}\n# code_version: {__version__}\n"
    Path(path).write_text(header + yaml.safe_dump(to_dict(cfg), sort_keys=True))
