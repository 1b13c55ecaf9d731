"""Central finite-difference check of tape gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


class GradCheckError(RuntimeError):
    """The checked function produced a non-finite value."""


@dataclass
class GradCheckEntry:
    param: str
    index: int
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-3

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    @property
    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.rel_err, default=None)

    def summary(self) -> str:
        w = self.worst
        head = f"grad-check: {len(self.entries)} coords, max rel err {self.max_rel_err:.3e} (tol {self.tol:g})"
        if w is not None:
            head += f", worst {w.param}[{w.index}] analytic={w.analytic:.6e} numeric={w.numeric:.6e}"
        return head + (" PASS" if self.passed else " FAIL")


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _scalar(loss: Tensor) -> float:
    v = float(np.asarray(loss.data).reshape(-1)[0])
    if not math.isfinite(v):
        raise GradCheckError(f"loss is not finite ({v}); grad check aborted")
    return v


def sample_coordinates(params: dict[str, Tensor], n: int | None, seed: int = 0) -> list[tuple[str, int]]:
    """Pick coordinates round-robin over tensors so every parameter is touched."""
    if n is None:
        return [(name, i) for name, p in params.items() for i in range(p.data.size)]
    rng = np.random.default_rng(seed)
    names = list(params)
    coords: list[tuple[str, int]] = []
    k = 0
    while len(coords) < n and names:
        name = names[k % len(names)]
        coords.append((name, int(rng.integers(params[name].data.size))))
        k += 1
    return coords


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-3,
    samples: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f()`` with ``(f(θ+h) - f(θ-h)) / 2h``.

    ``f`` must close over ``params``; coordinates are perturbed in place and
    restored afterwards.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = f()
    _scalar(loss)
    tape.backward(loss)
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    report = GradCheckReport(tol=tol)
    for name, idx in sample_coordinates(params, samples, seed):
        flat = params[name].data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        fp = _scalar(f())
        flat[idx] = orig - h
        fm = _scalar(f())
        flat[idx] = orig
        numeric = (fp - fm) / (2 * h)
        analytic = float(grads[name].reshape(-1)[idx])
        report.entries.append(GradCheckEntry(name, idx, analytic, numeric, relative_error(analytic, numeric, floor)))
    return report
