"""LARS, AdamW/Adam and momentum SGD with bias/normalisation exclusions.

Parameters are split into two groups by :func:`param_groups`: ``weights``
(weight decay, LARS adaptation) and ``biases_and_norms`` (neither). A
parameter is excluded when it is one-dimensional, which covers every bias
and every batch/layer-norm affine parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class LarsConfig:
    lr_weights: float = 0.4
    lr_biases: float = 0.0048
    weight_decay: float = 1e-5
    momentum: float = 0.9
    eta: float = 1e-3


@dataclass
class AdamWConfig:
    lr: float = 6.25e-5
    weight_decay: float = 0.24
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")


@dataclass
class SGDConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass
class OptimConfig:
    name: str = "adamw"  # lars | adamw | adam | sgd
    lars: LarsConfig | None = None
    adamw: AdamWConfig | None = None
    sgd: SGDConfig | None = None
    schedule: str = "constant"  # constant | cosine
    # lrs in the sub-configs are quoted for this batch size and scaled linearly
    lr_batch_ref: int | None = None

    def __post_init__(self):
        if self.name not in ("lars", "adamw", "adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        self.lars = self.lars or LarsConfig()
        self.adamw = self.adamw or AdamWConfig()
        self.sgd = self.sgd or SGDConfig()


def scale_lr(lr_ref: float, batch_ref: int, batch: int) -> float:
    """Linear scaling rule ``lr = lr_ref * batch / batch_ref``."""
    if batch_ref <= 0:
        raise ValueError("batch_ref must be positive")
    return lr_ref * batch / batch_ref


def is_excluded(name: str, p: torch.Tensor) -> bool:
    return p.ndim <= 1


def param_groups(model: nn.Module, lr_weights: float, lr_biases: float,
                 weight_decay: float) -> list[dict]:
    weights, excluded, w_names, e_names = [], [], [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if is_excluded(name, p):
            excluded.append(p)
            e_names.append(name)
        else:
            weights.append(p)
            w_names.append(name)
    groups = [
        {"params": weights, "names": w_names, "kind": "weights", "lr": lr_weights,
         "weight_decay": weight_decay, "lars_adaptation": True},
        {"params": excluded, "names": e_names, "kind": "biases_and_norms", "lr": lr_biases,
         "weight_decay": 0.0, "lars_adaptation": False},
    ]
    return [g for g in groups if g["params"]]


def _check_finite(grad: torch.Tensor) -> None:
    if not torch.isfinite(grad).all():
        raise FloatingPointError("non-finite gradient")


class LARS(torch.optim.Optimizer):
    """SGD with momentum and a per-tensor trust ratio ``eta * |w| / |g + wd w|``.

    Groups with ``lars_adaptation=False`` take plain momentum steps without
    weight decay. The trust ratio is 1 when either norm is zero.
    """

    def __init__(self, params, lr: float = 0.4, weight_decay: float = 0.0,
                 momentum: float = 0.9, eta: float = 1e-3, lars_adaptation: bool = True):
        defaults = dict(lr=lr, weight_decay=weight_decay, momentum=momentum, eta=eta,
                        lars_adaptation=lars_adaptation)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                _check_finite(g)
                if group["lars_adaptation"]:
                    if group["weight_decay"]:
                        g = g.add(p, alpha=group["weight_decay"])
                    w_norm, g_norm = torch.linalg.vector_norm(p), torch.linalg.vector_norm(g)
                    if w_norm > 0 and g_norm > 0:
                        g = g * (group["eta"] * w_norm / g_norm)
                state = self.state[p]
                if "momentum_buffer" not in state:
                    state["momentum_buffer"] = torch.zeros_like(p)
                buf = state["momentum_buffer"]
                buf.mul_(group["momentum"]).add_(g)
                p.add_(buf, alpha=-group["lr"])


class AdamW(torch.optim.Optimizer):
    """Adam with bias-corrected moments.

    ``decoupled=True`` applies weight decay on the parameter side
    (``p <- p - lr * wd * p``); ``False`` adds ``wd * p`` to the gradient.
    """

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = True):
        defaults = dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay,
                        decoupled=decoupled)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        # multi-tensor ops: one kernel per operation over the whole group
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            lr, wd = group["lr"], group["weight_decay"]
            ps = [p for p in group["params"] if p.grad is not None]
            if not ps:
                continue
            gs = [p.grad for p in ps]
            if not torch.isfinite(torch.stack(torch._foreach_norm(gs))).all():
                raise FloatingPointError("non-finite gradient")
            if wd and group["decoupled"]:
                torch._foreach_mul_(ps, 1 - lr * wd)
            elif wd:
                gs = torch._foreach_add(gs, ps, alpha=wd)
            ms, vs, bc1, bc2 = [], [], [], []
            for p in ps:
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                ms.append(state["exp_avg"])
                vs.append(state["exp_avg_sq"])
                bc1.append(1 - beta1 ** state["step"])
                bc2.append(1 - beta2 ** state["step"])
            torch._foreach_mul_(ms, beta1)
            torch._foreach_add_(ms, gs, alpha=1 - beta1)
            torch._foreach_mul_(vs, beta2)
            torch._foreach_addcmul_(vs, gs, gs, value=1 - beta2)
            step = torch._foreach_mul(torch._foreach_div(ms, bc1), lr)
            denom = torch._foreach_sqrt(torch._foreach_div(vs, bc2))
            torch._foreach_add_(denom, group["eps"])
            torch._foreach_div_(step, denom)
            torch._foreach_sub_(ps, step)


class SGD(torch.optim.Optimizer):
    """Classical (heavy-ball) momentum SGD with coupled weight decay."""

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.0, weight_decay: float = 0.0):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                _check_finite(g)
                if group["weight_decay"]:
                    g = g.add(p, alpha=group["weight_decay"])
                state = self.state[p]
                if "momentum_buffer" not in state:
                    state["momentum_buffer"] = torch.zeros_like(p)
                buf = state["momentum_buffer"]
                buf.mul_(group["momentum"]).add_(g)
                p.add_(buf, alpha=-group["lr"])


def build_optimizer(model: nn.Module, cfg: OptimConfig, batch_size: int | None = None
                    ) -> torch.optim.Optimizer:
    def scaled(lr):
        if cfg.lr_batch_ref and batch_size:
            return scale_lr(lr, cfg.lr_batch_ref, batch_size)
        return lr

    if cfg.name == "lars":
        c = cfg.lars
        groups = param_groups(model, scaled(c.lr_weights), scaled(c.lr_biases), c.weight_decay)
        return LARS(groups, momentum=c.momentum, eta=c.eta)
    if cfg.name in ("adamw", "adam"):
        c = cfg.adamw
        lr = scaled(c.lr)
        groups = param_groups(model, lr, lr, c.weight_decay)
        return AdamW(groups, betas=(c.beta1, c.beta2), eps=c.epsilon,
                     decoupled=cfg.name == "adamw")
    c = cfg.sgd
    lr = scaled(c.lr)
    return SGD(param_groups(model, lr, lr, c.weight_decay), momentum=c.momentum)


def lr_factor(step: int, total_steps: int, schedule: str = "constant") -> float:
    if schedule == "constant" or total_steps <= 0:
        return 1.0
    return 0.5 * (1 + math.cos(math.pi * min(step, total_steps) / total_steps))


def set_lr_factor(opt: torch.optim.Optimizer, factor: float) -> None:
    for group in opt.param_groups:
        group.setdefault("base_lr", group["lr"])
        group["lr"] = group["base_lr"] * factor
