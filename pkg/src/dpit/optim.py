"""Adam with bias correction and the piecewise-constant learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 240
    drop_epochs: tuple[int, ...] = (190, 220)
    drop_factor: float = 0.1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    augment: bool = True
    rotation: float = 45.0
    scale: tuple[float, float] = (0.65, 1.35)
    flip_prob: float = 0.5
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    max_steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "drop_epochs", tuple(int(e) for e in self.drop_epochs))
        object.__setattr__(self, "scale", tuple(float(s) for s in self.scale))
        d = self.drop_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"drop epochs must be strictly increasing: {d}")
        if d and self.epochs > 0 and d[-1] >= self.epochs:
            raise ValueError(f"drop epoch {d[-1]} not below total epochs {self.epochs}")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")

    @staticmethod
    def scaled_drops(epochs: int, reference=(240, (190, 220))) -> tuple[int, ...]:
        """Drop epochs at the same fractions of training as the reference schedule.

        Points that collide or fall outside (0, epochs) after rounding are dropped.
        """
        total, drops = reference
        scaled = sorted({int(round(epochs * d / total)) for d in drops})
        return tuple(d for d in scaled if 0 < d < epochs)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    n = sum(1 for d in cfg.drop_epochs if epoch >= d)
    # snap to 12 significant digits so decayed rates equal their decimal literals (1e-3 -> 1e-4 -> 1e-5)
    return float(f"{cfg.lr * cfg.drop_factor ** n:.12g}")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kw) -> "AdamState":
        st = cls(**kw)
        for k, p in params.items():
            st.m[k] = np.zeros_like(p.data)
            st.v[k] = np.zeros_like(p.data)
        return st


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    grads: dict[str, np.ndarray] | None = None,
    lr: float | None = None,
    weight_decay: float = 0.0,
    grad_clip: float = 0.0,
) -> None:
    """One bias-corrected Adam update, in place. Rejects the step on any non-finite gradient."""
    if grads is None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}; step rejected")
    if grad_clip > 0:
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        if norm > grad_clip:
            grads = {k: g * (grad_clip / norm) for k, g in grads.items()}
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if weight_decay:
            g = g + weight_decay * p.data
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)
        p.data -= update
