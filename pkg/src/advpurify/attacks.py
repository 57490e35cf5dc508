"""L-infinity projected gradient ascent on the classifier loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .classifier import loss_and_input_grad
from .seeding import torch_generator

BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class AttackConfig:
    """PGD settings. ``step_size=None`` means ``epsilon / 4``.

    ``epsilon = 0`` is accepted: it degenerates every attack to the identity.
    """

    epsilon: float = 2 / 255
    num_steps: int = 20
    step_size: float | None = None
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise ValueError(f"num_steps must be a positive integer, got {self.num_steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")

    @property
    def alpha(self) -> float:
        return self.epsilon / 4 if self.step_size is None else float(self.step_size)


def project_linf(x_adv: torch.Tensor, x0: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp ``x_adv`` into ``[x0 - eps, x0 + eps]`` and then into ``[0, 1]``."""
    if x_adv.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x_adv.shape)} vs {tuple(x0.shape)}")
    return torch.minimum(torch.maximum(x_adv, x0 - epsilon), x0 + epsilon).clamp(0.0, 1.0)


def pgd_attack(classifier: nn.Module, x: torch.Tensor, y: torch.Tensor, config: AttackConfig) -> torch.Tensor:
    """Return float64 adversarial images inside the eps-ball around ``x`` and inside [0, 1].

    Each iteration is ``x <- project(x + alpha * sign(grad))``; sign(0) = 0.
    """
    x0 = x.detach().double()
    if len(x0) and (x0.min() < 0 or x0.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    eps = float(config.epsilon)
    x_adv = x0.clone()
    if config.random_start:
        gen = torch_generator(config.seed)
        noise = torch.rand(x0.shape, generator=gen, dtype=torch.float64) * (2 * eps) - eps
        x_adv = project_linf(x0 + noise, x0, eps)
    for _ in range(config.num_steps):
        _, grad = loss_and_input_grad(classifier, x_adv, y)
        x_adv = project_linf(x_adv + config.alpha * grad.sign(), x0, eps)
    return x_adv


def boundary_fraction(x_adv: torch.Tensor, x0: torch.Tensor, epsilon: float, tol: float = BOUNDARY_TOL) -> float:
    """Share of coordinates with ``|delta| = eps``, ignoring ones held back by the pixel range.

    A coordinate counts as held back when it sits at 0 or 1 with
    ``|delta| < eps``. Returns 0.0 when no coordinate is left.
    """
    if x_adv.shape != x0.shape:
        raise ValueError(f"shape mismatch: {tuple(x_adv.shape)} vs {tuple(x0.shape)}")
    x_adv, x0 = x_adv.double(), x0.double()
    mag = (x_adv - x0).abs()
    on_edge = (mag - epsilon).abs() <= tol
    pinned = ((x_adv <= 0.0) | (x_adv >= 1.0)) & ~on_edge
    free = ~pinned
    n_free = int(free.sum())
    return float((on_edge & free).sum()) / n_free if n_free else 0.0
