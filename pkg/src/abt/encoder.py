"""Encoders: the AudioNTT CNN and ViT / ViT_C transformers with a CLS token."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

VIT_SIZES = {"B": (768, 12, 12), "S": (384, 12, 6), "T": (192, 12, 3)}


@dataclass
class AudioNTTConfig:
    n_conv_blocks: int = 3
    conv_channels: int = 64
    fc_width: int = 2048
    dropout: float = 0.0
    n_mels: int = 64

    @property
    def rep_dim(self) -> int:
        return self.fc_width


@dataclass
class ViTConfig:
    variant: str = "vit_c"  # vit | vit_c
    size: str = "T"
    patch_h: int = 16
    patch_w: int = 8
    use_cls: bool = True
    n_mels: int = 64
    max_frames: int = 96
    # explicit overrides of the size table, used for tiny test models
    dim: int | None = None
    depth: int | None = None
    heads: int | None = None
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.variant not in ("vit", "vit_c"):
            raise ValueError("variant must be 'vit' or 'vit_c'")
        if self.size not in VIT_SIZES:
            raise ValueError(f"size must be one of {sorted(VIT_SIZES)}")
        if self.n_mels % self.patch_h or self.max_frames % self.patch_w:
            raise ValueError("input shape must be divisible by the patch size")
        if not self.use_cls:
            raise ValueError("CLS-token readout is the only supported readout")

    @property
    def dims(self) -> tuple[int, int, int]:
        d, depth, heads = VIT_SIZES[self.size]
        return self.dim or d, self.depth or depth, self.heads or heads

    @property
    def rep_dim(self) -> int:
        return self.dims[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.n_mels // self.patch_h, self.max_frames // self.patch_w

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


class AudioNTT(nn.Module):
    """Conv blocks -> per-frame flatten -> 2 FC layers -> mean + max over time."""

    def __init__(self, cfg: AudioNTTConfig = AudioNTTConfig()):
        super().__init__()
        if cfg.n_mels % (2 ** cfg.n_conv_blocks):
            raise ValueError(f"n_mels must be divisible by {2 ** cfg.n_conv_blocks}")
        self.cfg = cfg
        layers, c_in = [], 1
        for _ in range(cfg.n_conv_blocks):
            layers += [nn.Conv2d(c_in, cfg.conv_channels, 3, padding=1),
                       nn.BatchNorm2d(cfg.conv_channels), nn.ReLU(), nn.MaxPool2d(2)]
            c_in = cfg.conv_channels
        self.features = nn.Sequential(*layers)
        flat = cfg.conv_channels * (cfg.n_mels // 2 ** cfg.n_conv_blocks)
        self.fc = nn.Sequential(
            nn.Linear(flat, cfg.fc_width), nn.ReLU(), nn.Dropout(cfg.dropout),
            nn.Linear(cfg.fc_width, cfg.fc_width), nn.ReLU(),
        )

    @property
    def rep_dim(self) -> int:
        return self.cfg.fc_width

    def forward(self, x: torch.Tensor, mask=None) -> torch.Tensor:
        if mask is not None:
            raise ValueError("patch masking applies to ViT encoders only")
        if x.shape[1] != self.cfg.n_mels:
            raise ValueError(f"expected {self.cfg.n_mels} mel bins, got {x.shape[1]}")
        if x.shape[2] < 2 ** self.cfg.n_conv_blocks:
            raise ValueError("too few frames for the pooling stack")
        h = self.features(x.unsqueeze(1))              # B, C, F', T'
        h = rearrange(h, "b c f t -> b t (c f)")
        h = self.fc(h)
        return h.mean(dim=1) + h.amax(dim=1)


def patchify(x, patch_h: int, patch_w: int):
    """``(..., F, T) -> (..., N, patch_h * patch_w)`` in frequency-major grid order.

    Works on NumPy arrays and torch tensors.
    """
    F_, T_ = x.shape[-2:]
    if F_ % patch_h or T_ % patch_w:
        raise ValueError(f"{F_}x{T_} is not divisible into {patch_h}x{patch_w} patches")
    return rearrange(x, "... (gh ph) (gw pw) -> ... (gh gw) (ph pw)", ph=patch_h, pw=patch_w)


def unpatchify(p, patch_h: int, patch_w: int, grid_h: int):
    return rearrange(p, "... (gh gw) (ph pw) -> ... (gh ph) (gw pw)", gh=grid_h, ph=patch_h, pw=patch_w)


def sinusoidal_posenc(n_positions: int, dim: int) -> np.ndarray:
    """Interleaved encoding: column ``2i`` is ``sin(p w_i)``, ``2i+1`` is ``cos(p w_i)``,
    ``w_i = 10000^(-2i/dim)``."""
    if dim % 2:
        raise ValueError("dim must be even")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe = np.empty((n_positions, dim))
    pe[:, 0::2] = np.sin(pos * freqs)
    pe[:, 1::2] = np.cos(pos * freqs)
    return pe


def _stride_ladder(patch: int, n_convs: int = 4) -> list[int]:
    """Split a power-of-two patch extent into ``n_convs`` power-of-two strides."""
    if patch & (patch - 1):
        raise ValueError("ViT_C stem needs power-of-two patch sizes")
    k = int(math.log2(patch))
    strides = [1] * n_convs
    for i in range(k):
        strides[i % n_convs] *= 2
    return strides


class ConvStem(nn.Module):
    """Four 3x3-style convs (BN + ReLU) whose strides multiply to the patch size,
    then a 1x1 projection; yields the same token grid as patchification."""

    def __init__(self, dim: int, patch_h: int, patch_w: int):
        super().__init__()
        sh, sw = _stride_ladder(patch_h), _stride_ladder(patch_w)
        widths = [max(dim // 8, 8), max(dim // 4, 8), max(dim // 2, 8), dim]
        layers, c_in = [], 1
        for (s_h, s_w), c_out in zip(zip(sh, sw), widths):
            k = (2 * s_h - 1 if s_h > 1 else 3, 2 * s_w - 1 if s_w > 1 else 3)
            layers += [nn.Conv2d(c_in, c_out, k, stride=(s_h, s_w),
                                 padding=(k[0] // 2, k[1] // 2), bias=False),
                       nn.BatchNorm2d(c_out), nn.ReLU()]
            c_in = c_out
        layers.append(nn.Conv2d(c_in, dim, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.net(x.unsqueeze(1))                   # B, D, gh, gw
        return rearrange(h, "b d gh gw -> b (gh gw) d")


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d",
                            three=3, h=self.heads)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(rearrange(out, "b h n d -> b n (h d)"))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViT(nn.Module):
    """ViT / ViT_C returning the final-layer CLS vector.

    ``kept`` (``B x K`` patch indices) drops masked tokens before the first
    block; each kept token carries the positional encoding of its grid slot.
    """

    def __init__(self, cfg: ViTConfig = ViTConfig()):
        super().__init__()
        self.cfg = cfg
        dim, depth, heads = cfg.dims
        if cfg.variant == "vit":
            self.patch_embed = nn.Linear(cfg.patch_h * cfg.patch_w, dim)
        else:
            self.stem = ConvStem(dim, cfg.patch_h, cfg.patch_w)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.register_buffer("pos_embed",
                             torch.from_numpy(sinusoidal_posenc(cfg.n_patches, dim)).float(),
                             persistent=False)
        self.blocks = nn.ModuleList(Block(dim, heads, cfg.mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        linears = list(self.blocks.modules())
        if self.cfg.variant == "vit":
            linears.append(self.patch_embed)
        for mod in linears:
            if isinstance(mod, nn.Linear):
                nn.init.trunc_normal_(mod.weight, std=0.02)
                nn.init.zeros_(mod.bias)

    @property
    def rep_dim(self) -> int:
        return self.cfg.rep_dim

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        if self.cfg.variant == "vit":
            return self.patch_embed(patchify(x, self.cfg.patch_h, self.cfg.patch_w))
        return self.stem(x)

    def forward(self, x: torch.Tensor, kept: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.cfg
        if x.shape[-2] != cfg.n_mels or x.shape[-1] % cfg.patch_w:
            raise ValueError(f"input {tuple(x.shape[-2:])} incompatible with patch size")
        n = (x.shape[-2] // cfg.patch_h) * (x.shape[-1] // cfg.patch_w)
        if n > self.pos_embed.shape[0]:
            self.pos_embed = torch.from_numpy(sinusoidal_posenc(n, cfg.dims[0])).to(self.cls_token)
        t = self.tokens(x) + self.pos_embed[:n]
        if kept is not None:
            if kept.shape[-1] == 0:
                raise ValueError("no tokens kept")
            if kept.dim() == 1:
                kept = kept.expand(x.shape[0], -1)
            t = torch.gather(t, 1, kept.unsqueeze(-1).expand(-1, -1, t.shape[-1]))
        t = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), t], dim=1)
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)[:, 0]


@dataclass
class EncoderConfig:
    kind: str = "vit"  # audiontt | vit
    audiontt: AudioNTTConfig | None = None
    vit: ViTConfig | None = None

    def __post_init__(self):
        if self.kind not in ("audiontt", "vit"):
            raise ValueError("encoder kind must be 'audiontt' or 'vit'")
        if self.audiontt is None:
            self.audiontt = AudioNTTConfig()
        if self.vit is None:
            self.vit = ViTConfig()

    @property
    def rep_dim(self) -> int:
        return self.audiontt.rep_dim if self.kind == "audiontt" else self.vit.rep_dim


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    return AudioNTT(cfg.audiontt) if cfg.kind == "audiontt" else ViT(cfg.vit)
