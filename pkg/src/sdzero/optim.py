"""AdamW with decoupled weight decay, global-norm clipping, and LR schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class Schedule:
    """Learning-rate schedule: linear warmup, then a configurable tail.

    kinds:
      constant         warmup to peak_lr, then hold
      cosine           warmup to peak_lr, cosine decay to zero at total_steps
    """

    kind: str
    peak_lr: float
    warmup_steps: int = 0
    total_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.kind == "cosine" and self.total_steps <= self.warmup_steps:
            raise ValueError("cosine schedule needs total_steps > warmup_steps")


def lr_at(step: int, schedule: Schedule) -> float:
    """Learning rate at an integer step, counted from 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.warmup_steps and step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    if schedule.kind == "constant":
        return schedule.peak_lr
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    progress = min(progress, 1.0)
    return schedule.peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm over the concatenation of all gradients, accumulated in f64."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grads_(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place to cap the global norm. Returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= np.asarray(scale, dtype=g.dtype)
    return norm


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class OptimizerState:
    """Step count plus first/second moment estimates, keyed like the params."""

    config: AdamWConfig
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, Tensor], config: AdamWConfig) -> "OptimizerState":
        state = cls(config=config)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(
    state: OptimizerState,
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    lr: float,
) -> None:
    """One AdamW update in place. Weight decay is decoupled: it scales the
    parameter directly by lr * wd and never enters the moment estimates."""
    cfg = state.config
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        update = m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data -= np.asarray(lr, dtype=p.data.dtype) * update.astype(p.data.dtype, copy=False)
