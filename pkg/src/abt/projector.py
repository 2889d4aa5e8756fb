"""Projector MLP mapping encoder representations to loss embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class ProjectorConfig:
    in_dim: int = 192
    hidden_dim: int = 8192
    out_dim: int = 1048
    n_hidden_layers: int = 1

    def __post_init__(self):
        if min(self.in_dim, self.hidden_dim, self.out_dim) <= 0 or self.n_hidden_layers < 0:
            raise ValueError("projector dimensions must be positive")

    @property
    def layer_dims(self) -> list[int]:
        return [self.in_dim] + [self.hidden_dim] * self.n_hidden_layers + [self.out_dim]


class Projector(nn.Module):
    """``n_hidden_layers`` x (linear -> batch-norm -> ReLU), then a bare linear layer."""

    def __init__(self, cfg: ProjectorConfig = ProjectorConfig()):
        super().__init__()
        self.cfg = cfg
        dims = cfg.layer_dims
        layers = []
        for d_in, d_out in zip(dims[:-2], dims[1:-1]):
            layers += [nn.Linear(d_in, d_out, bias=False), nn.BatchNorm1d(d_out), nn.ReLU()]
        layers.append(nn.Linear(dims[-2], dims[-1]))
        self.net = nn.Sequential(*layers)

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if self.training and self.cfg.n_hidden_layers > 0 and y.shape[0] < 2:
            raise ValueError("batch norm undefined for a batch of one in training mode")
        return self.net(y)
