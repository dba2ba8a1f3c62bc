"""L-infinity PGD run through the auxiliary batch-norm branch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import AttackDivergenceError, ConfigError
from .model import Branch, EgaModel

SUPPORTED_EPSILONS = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class AttackConfig:
    """Radius and step size are in units of 1/255 of the pixel range."""

    epsilon: float
    steps: int
    step_size: float
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.epsilon > 0 and (self.steps < 1 or self.step_size <= 0):
            raise ConfigError(f"epsilon {self.epsilon} needs steps >= 1 and step_size > 0")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if not self.lo < self.hi:
            raise ConfigError(f"pixel bounds must satisfy lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def radius(self) -> float:
        return self.epsilon / 255.0

    @property
    def alpha(self) -> float:
        return self.step_size / 255.0

    @property
    def enabled(self) -> bool:
        return self.epsilon > 0 and self.steps > 0


def epsilon_schedule(epsilon: int) -> AttackConfig:
    """n = eps + 1 iterations, except a single step at eps = 1; eps = 0 disables."""
    if epsilon not in SUPPORTED_EPSILONS or isinstance(epsilon, bool):
        raise ConfigError(f"epsilon must be one of {SUPPORTED_EPSILONS}, got {epsilon!r}")
    if epsilon == 0:
        return AttackConfig(epsilon=0, steps=0, step_size=0.0)
    steps = 1 if epsilon == 1 else epsilon + 1
    step_size = float(epsilon) if steps == 1 else min(2.5 * epsilon / steps, float(epsilon))
    return AttackConfig(epsilon=epsilon, steps=steps, step_size=step_size)


def project(x: np.ndarray, candidate: np.ndarray, radius: float, lo: float, hi: float) -> np.ndarray:
    """Clip ``candidate`` into the L-inf ball around ``x`` intersected with [lo, hi].

    The bound holds exactly in float64 after casting back to ``x.dtype``.
    """
    x64 = x.astype(np.float64)
    low = np.maximum(x64 - radius, lo)
    high = np.minimum(x64 + radius, hi)
    out = np.clip(candidate.astype(np.float64), low, high).astype(x.dtype)
    # rounding to the storage dtype can step just outside; pull back by one ulp
    over = out.astype(np.float64) > high
    out[over] = np.nextafter(out[over], np.asarray(-np.inf, dtype=x.dtype))
    under = out.astype(np.float64) < low
    out[under] = np.nextafter(out[under], np.asarray(np.inf, dtype=x.dtype))
    return out


def input_gradient(model: EgaModel, x: np.ndarray, labels, branch: Branch = Branch.AUX):
    """Cross-entropy and its gradient w.r.t. the input, parameters frozen.

    Batch-norm uses train-mode statistics without touching the running
    averages.
    """
    with model.frozen():
        xt = Tensor(x, requires_grad=True, dtype=x.dtype)
        out = model.forward(xt, branch, "train", update_stats=False)
        loss = ad.softmax_cross_entropy(out.logits, labels)
        ad.backward(loss)
    return float(loss.data), xt.grad


def pgd(model: EgaModel, x, labels, cfg: AttackConfig, losses: Optional[List[float]] = None) -> np.ndarray:
    """Untargeted signed-gradient ascent on the cross-entropy, from the clean point.

    ``losses``, when given, receives the loss at every iterate including
    the returned one.
    """
    x = np.asarray(getattr(x, "data", x))
    dtype = model.params["head.weight"].dtype
    x = x.astype(dtype, copy=False)
    x_adv = x.copy()
    if not cfg.enabled:
        if losses is not None:
            losses.append(input_gradient(model, x_adv, labels)[0])
        return x_adv
    for _ in range(cfg.steps):
        loss, grad = input_gradient(model, x_adv, labels)
        if losses is not None:
            losses.append(loss)
        if grad is None or not np.isfinite(grad).all():
            raise AttackDivergenceError("non-finite input gradient during PGD")
        step = x_adv.astype(np.float64) + cfg.alpha * np.sign(grad)
        x_adv = project(x, step, cfg.radius, cfg.lo, cfg.hi)
    if losses is not None:
        losses.append(input_gradient(model, x_adv, labels)[0])
    return x_adv
