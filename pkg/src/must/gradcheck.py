"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

# Gradients whose norm falls below this are compared in absolute terms.
NORM_FLOOR = 1e-6


@dataclass
class GradcheckResult:
    name: str
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e <= self.tol for e in self.errors.values())


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = NORM_FLOOR) -> float:
    diff = np.linalg.norm(np.ravel(analytic - numeric))
    denom = max(np.linalg.norm(np.ravel(analytic)), np.linalg.norm(np.ravel(numeric)), floor)
    return float(diff / denom)


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5,
                   coords: np.ndarray | None = None) -> np.ndarray:
    """d fn() / d target by central differences, perturbing ``target.data`` in place.

    With ``coords`` (flat indices) only those entries are evaluated and the
    result has one value per index.
    """
    flat = target.data.reshape(-1)
    if coords is None:
        coords = np.arange(flat.size)
    grad = np.zeros(len(coords), dtype=np.float64)
    for j, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data.sum())
        flat[i] = orig - h
        down = float(fn().data.sum())
        flat[i] = orig
        grad[j] = (up - down) / (2 * h)
    return grad.reshape(target.shape) if len(coords) == flat.size else grad


def analytic_grads(fn: Callable[[], Tensor], targets: Sequence[Tensor]) -> list[np.ndarray]:
    for t in targets:
        t.requires_grad = True
        t.zero_grad()
    fn().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in targets]


def check_gradients(fn: Callable[[], Tensor], targets: dict[str, Tensor] | Sequence[Tensor],
                    name: str = "", h: float = 1e-5, tol: float = 1e-4,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> GradcheckResult:
    """Compare backprop against central differences for every target tensor.

    ``fn`` must rebuild the graph on each call and return a scalar tensor.
    Targets must be 64-bit for the default step to be meaningful. With
    ``max_coords`` each tensor is probed at that many random entries.
    """
    if not isinstance(targets, dict):
        targets = {f"arg{i}": t for i, t in enumerate(targets)}
    tensors = list(targets.values())
    analytic = analytic_grads(fn, tensors)
    result = GradcheckResult(name=name, tol=tol)
    for (key, t), a in zip(targets.items(), analytic):
        if max_coords is not None and t.data.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(gen.choice(t.data.size, size=max_coords, replace=False))
            result.errors[key] = relative_error(a.reshape(-1)[coords], numerical_grad(fn, t, h, coords))
        else:
            result.errors[key] = relative_error(a, numerical_grad(fn, t, h))
    return result
