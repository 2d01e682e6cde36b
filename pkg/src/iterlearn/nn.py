"""Dense layers, AdamW, the per-generation learning-rate schedule and
power-iteration spectral norms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

DTYPE = np.float32
ADAM_EPS = 1e-8


@dataclass
class DenseLayer:
    W: np.ndarray  # [out, in]
    b: np.ndarray  # [out]
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ("relu", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ConfigError(f"bias shape {self.b.shape} does not match W {self.W.shape}")


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = np.asarray(x, dtype=layer.W.dtype)
    if x.shape[-1] != layer.W.shape[1]:
        raise ConfigError(f"layer expects input dim {layer.W.shape[1]}, got {x.shape[-1]}")
    y = x @ layer.W.T + layer.b
    if layer.activation == "relu":
        y = np.maximum(y, 0)
    return y


def dense_var(W, b, activation, x):
    """Tape version of ``dense_forward``; all arguments may be ``Var``."""
    y = ad.add(ad.matmul(x, ad.transpose(W)), b)
    return ad.relu(y) if activation == "relu" else y


def init_dense(fan_in: int, fan_out: int, activation: str, rng: np.random.Generator) -> DenseLayer:
    W = (rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)).astype(DTYPE)
    return DenseLayer(W, np.zeros(fan_out, dtype=DTYPE), activation)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, p):
        return cls(np.zeros_like(p), np.zeros_like(p), 0)


def adamw_step(p, g, s: AdamWState, lr, betas=(0.9, 0.98), wd=0.1, eps=ADAM_EPS):
    """One decoupled-weight-decay Adam update. Returns ``(p_new, state_new)``."""
    if p.shape != g.shape or p.shape != s.m.shape:
        raise ConfigError(f"shape mismatch: param {p.shape}, grad {g.shape}, state {s.m.shape}")
    if lr < 0:
        raise ConfigError(f"learning rate must be non-negative, got {lr}")
    b1, b2 = betas
    dt = p.dtype
    m = (b1 * s.m + (1 - b1) * g).astype(dt)
    v = (b2 * s.v + (1 - b2) * g * g).astype(dt)
    t = s.t + 1
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    update = m_hat / (np.sqrt(v_hat) + eps) + wd * p
    return (p - lr * update).astype(dt), AdamWState(m, v, t)


# -- schedule ----------------------------------------------------------------

@dataclass
class LrSchedule:
    base_lr: float
    total_steps: int
    warmup_steps_per_generation: int = 0
    generation_boundaries: list = field(default_factory=list)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.warmup_steps_per_generation < 0:
            raise ConfigError("warmup_steps_per_generation must be >= 0")
        b = list(self.generation_boundaries)
        if any(x >= y for x, y in zip(b, b[1:])):
            raise ConfigError(f"generation boundaries must be strictly increasing: {b}")


def lr_at(step: int, sched: LrSchedule) -> float:
    """Global cosine envelope times a linear ramp restarted at every generation start."""
    if not 0 <= step < sched.total_steps:
        raise ConfigError(f"step {step} outside [0, {sched.total_steps})")
    cosine = sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / sched.total_steps))
    start = 0
    for b in sched.generation_boundaries:
        if b <= step:
            start = b
    warm = sched.warmup_steps_per_generation
    ramp = 1.0 if warm == 0 else min(1.0, (step - start) / warm)
    return cosine * ramp


# -- spectral norm -----------------------------------------------------------

def power_iteration(W, v, iters):
    """Run ``iters`` steps on WᵀW from ``v``; returns (sigma estimates, final v)."""
    W = np.asarray(W, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    estimates = []
    for _ in range(iters):
        v = W.T @ (W @ v)
        n = np.linalg.norm(v)
        if n == 0.0:
            return [0.0] * max(iters, 1), v
        v = v / n
        estimates.append(float(np.linalg.norm(W @ v)))
    return estimates, v


def spectral_norm(W, iters: int = 100, seed: int = 0, return_trace: bool = False):
    """Power-iteration estimate of the largest singular value of ``W``."""
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    W = np.asarray(W, dtype=np.float64)
    if not np.any(W):
        return ([0.0] * iters) if return_trace else 0.0
    v0 = np.random.default_rng(seed).standard_normal(W.shape[1])
    trace, _ = power_iteration(W, v0 / np.linalg.norm(v0), iters)
    return trace if return_trace else trace[-1]
