"""Optimizers and learning-rate schedules.

LARS with layerwise trust ratios drives pretraining; plain SGD+momentum
drives evaluation heads and fine-tuning. Biases and normalization
parameters are excluded from weight decay and trust-ratio adaptation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError


@dataclass(frozen=True)
class OptimSpec:
    kind: str = "lars"               # lars | sgd_momentum
    base_lr: float = 0.2
    batch_size: int = 128
    momentum: float = 0.9
    weight_decay: float = 1.5e-6
    warmup_epochs: int = 2
    total_epochs: int = 20
    lars_eta: float = 0.001
    exclude_bias_bn: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError("warmup_epochs exceeds total_epochs")
        if self.kind not in ("lars", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")


def effective_lr(spec: OptimSpec) -> float:
    """Peak learning rate under the linear batch-size scaling rule."""
    if spec.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return spec.base_lr * spec.batch_size / 256.0


def schedule_lr(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear ramp 0 -> peak over warmup, then cosine decay to 0."""
    if warmup_steps > total_steps:
        raise ConfigError("warmup longer than the schedule")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = total_steps - warmup_steps
    if span == 0:
        return peak
    t = (step - warmup_steps) / span
    return peak * (math.cos(math.pi * t) + 1.0) / 2.0


LARS_EPS = 1e-9


def lars_step(params: dict, grads: dict, lr: float, spec: OptimSpec,
              buffers: dict, excluded=frozenset()):
    """One LARS update, in place.

    Per tensor: g <- grad + wd*w (unless excluded); trust ratio
    r = eta*||w|| / (||g|| + eps) when both norms are positive, else 1;
    m <- momentum*m + r*lr*g; w <- w - m. Excluded tensors take r = 1 and
    no weight decay. Only names present in `grads` are touched.
    """
    for name, g in grads.items():
        w = params[name]
        if w.shape != g.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        skip = spec.exclude_bias_bn and name in excluded
        if not skip and spec.weight_decay:
            g = g + w.dtype.type(spec.weight_decay) * w
        if skip:
            r = 1.0
        else:
            wn = float(np.linalg.norm(w))
            gn = float(np.linalg.norm(g))
            r = spec.lars_eta * wn / (gn + LARS_EPS) if wn > 0 and gn > 0 else 1.0
        buf = buffers.get(name)
        if buf is None:
            buf = buffers.setdefault(name, np.zeros_like(w))
        buf *= w.dtype.type(spec.momentum)
        buf += w.dtype.type(r * lr) * g
        w -= buf


def sgd_momentum_step(params: dict, grads: dict, lr: float, momentum: float,
                      weight_decay: float, buffers: dict):
    """One SGD+momentum update, in place: m <- mu*m + g + wd*w; w <- w - lr*m."""
    for name, g in grads.items():
        w = params[name]
        if w.shape != g.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        if weight_decay:
            g = g + w.dtype.type(weight_decay) * w
        buf = buffers.get(name)
        if buf is None:
            buf = buffers.setdefault(name, np.zeros_like(w))
        buf *= w.dtype.type(momentum)
        buf += g
        w -= w.dtype.type(lr) * buf
