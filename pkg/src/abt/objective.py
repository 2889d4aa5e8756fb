"""Barlow Twins redundancy-reduction objective.

``C = Zn^T Zn' / B`` where ``Zn`` is ``Z`` standardised per feature over the
batch (population std). Dividing by ``B`` makes ``C_ii == 1`` when the two
views agree on feature ``i``, which is what the invariance target assumes.

Two paths are provided: NumPy functions (double precision, with an exact
hand-derived gradient) and :func:`barlow_twins_loss` in torch for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    lambd: float = 0.005
    std_floor: float = 1e-9

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lambd < 0:
            raise ValueError("lambda must be non-negative")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be positive")


def batch_normalize(Z: np.ndarray, std_floor: float = 1e-9) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] < 2:
        raise ValueError("need a B x d batch with B >= 2")
    centered = Z - Z.mean(axis=0)
    return centered / (centered.std(axis=0) + std_floor)


def cross_correlation(Zn: np.ndarray, Zn2: np.ndarray) -> np.ndarray:
    if Zn.shape != Zn2.shape:
        raise ValueError(f"shape mismatch {Zn.shape} vs {Zn2.shape}")
    return Zn.T @ Zn2 / Zn.shape[0]


def loss_terms(C: np.ndarray) -> tuple[float, float]:
    """(invariance, redundancy) = (sum_i (1 - C_ii)^2, sum_{i != j} C_ij^2)."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError("C must be square")
    diag = np.diag(C)
    invariance = float(np.sum((1.0 - diag) ** 2))
    redundancy = float(np.sum(C ** 2) - np.sum(diag ** 2))
    return invariance, redundancy


def bt_loss(C: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    invariance, redundancy = loss_terms(C)
    return cfg.alpha * invariance + cfg.lambd * redundancy


def bt_loss_from_embeddings(Z: np.ndarray, Z2: np.ndarray, cfg: LossConfig = LossConfig()) -> float:
    C = cross_correlation(batch_normalize(Z, cfg.std_floor), batch_normalize(Z2, cfg.std_floor))
    return bt_loss(C, cfg)


def _normalize_backward(Z: np.ndarray, grad_out: np.ndarray, std_floor: float) -> np.ndarray:
    # y = c / (sigma + eps), c = z - mean(z), sigma = sqrt(mean(c^2)), per column
    B = Z.shape[0]
    c = Z - Z.mean(axis=0)
    sigma = np.sqrt(np.mean(c ** 2, axis=0))
    s = sigma + std_floor
    dot = np.sum(grad_out * c, axis=0)
    safe_sigma = np.where(sigma > 0, sigma, 1.0)
    coef = np.where(sigma > 0, dot / (s ** 2 * B * safe_sigma), 0.0)
    grad_c = grad_out / s - coef * c
    return grad_c - grad_c.mean(axis=0)


def bt_loss_grad(Z: np.ndarray, Z2: np.ndarray,
                 cfg: LossConfig = LossConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``(dL/dZ, dL/dZ')`` through normalisation, correlation and loss."""
    Z = np.asarray(Z, dtype=np.float64)
    Z2 = np.asarray(Z2, dtype=np.float64)
    B = Z.shape[0]
    Zn, Zn2 = batch_normalize(Z, cfg.std_floor), batch_normalize(Z2, cfg.std_floor)
    C = cross_correlation(Zn, Zn2)
    G = 2.0 * cfg.lambd * C
    np.fill_diagonal(G, -2.0 * cfg.alpha * (1.0 - np.diag(C)))
    grad_Zn = Zn2 @ G.T / B
    grad_Zn2 = Zn @ G / B
    return (_normalize_backward(Z, grad_Zn, cfg.std_floor),
            _normalize_backward(Z2, grad_Zn2, cfg.std_floor))


def _torch_normalize(z: torch.Tensor, std_floor: float) -> torch.Tensor:
    centered = z - z.mean(dim=0)
    # clamp keeps d(sqrt)/dx finite on collapsed (zero-variance) features
    std = centered.pow(2).mean(dim=0).clamp_min(1e-30).sqrt()
    return centered / (std + std_floor)


def barlow_twins_loss(z1: torch.Tensor, z2: torch.Tensor, cfg: LossConfig = LossConfig()
                      ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Differentiable loss. Returns ``(loss, invariance, redundancy, C)``."""
    if z1.shape != z2.shape or z1.dim() != 2 or z1.shape[0] < 2:
        raise ValueError("need two B x d embedding batches with B >= 2")
    B = z1.shape[0]
    c = _torch_normalize(z1, cfg.std_floor).T @ _torch_normalize(z2, cfg.std_floor) / B
    diag = torch.diagonal(c)
    invariance = (1 - diag).pow(2).sum()
    redundancy = c.pow(2).sum() - diag.pow(2).sum()
    return cfg.alpha * invariance + cfg.lambd * redundancy, invariance, redundancy, c
