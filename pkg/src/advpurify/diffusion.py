"""DDPM noise schedule, forward/reverse processes, denoiser, and purification.

Forward process (closed form)::

    x_k = sqrt(abar_k) * x_0 + sqrt(1 - abar_k) * eps,    eps ~ N(0, I)

Reverse step with the epsilon parameterisation of the mean and fixed
variance beta_k::

    x_{k-1} = (x_k - beta_k / sqrt(1 - abar_k) * eps_hat(x_k, k)) / sqrt(alpha_k) + sqrt(beta_k) * z

with z = 0 on the final step (k = 1).
"""

from __future__ import annotations

import copy

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import TrainingDivergedError
from .seeding import derive_seed, torch_generator

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Schedule tables in float64, padded so that index == step.

    ``betas[0] = 0``, ``alphas[0] = 1`` and ``alpha_bars[0] = 1``; steps
    ``1..T`` hold the actual schedule.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float
    beta_end: float

    @property
    def num_steps(self) -> int:
        return len(self.betas) - 1

    def config(self) -> dict:
        return {"num_steps": self.num_steps, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def __eq__(self, other) -> bool:
        return isinstance(other, NoiseSchedule) and self.config() == other.config()

    def __hash__(self) -> int:
        return hash(tuple(self.config().items()))


def make_linear_schedule(num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(num_steps) != num_steps or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, int(num_steps), dtype=np.float64)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars,
                         beta_start=float(beta_start), beta_end=float(beta_end))


def fraction_to_step(t: float, schedule: NoiseSchedule) -> int:
    """Map a noise fraction in [0, 1] to ``round(t * T)`` (halves round up)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"noise fraction must lie in [0, 1], got {t}")
    T = schedule.num_steps
    return min(max(int(math.floor(t * T + 0.5)), 0), T)


def _check_step(k, schedule: NoiseSchedule, lowest: int = 0) -> None:
    kmin, kmax = (int(k.min()), int(k.max())) if torch.is_tensor(k) else (int(k), int(k))
    if kmin < lowest or kmax > schedule.num_steps:
        raise ValueError(f"step index out of range [{lowest}, {schedule.num_steps}]: {kmin}..{kmax}")


def _per_example(values: np.ndarray, k, like: torch.Tensor) -> torch.Tensor:
    if torch.is_tensor(k):
        out = torch.from_numpy(values[k.cpu().numpy()]).to(like.dtype)
        return out.view(-1, *([1] * (like.dim() - 1)))
    return torch.tensor(values[int(k)], dtype=like.dtype)


def forward_diffuse(x0: torch.Tensor, k, schedule: NoiseSchedule, rng: torch.Generator):
    """Sample ``x_k ~ q(x_k | x_0)``; ``k`` is an int or a per-example LongTensor.

    Returns ``(x_k, eps)``. The result is not clamped.
    """
    _check_step(k, schedule)
    eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    signal = _per_example(np.sqrt(schedule.alpha_bars), k, x0)
    noise = _per_example(np.sqrt(1.0 - schedule.alpha_bars), k, x0)
    return signal * x0 + noise * eps, eps


# ---------------------------------------------------------------------------
# epsilon predictor


def step_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    angles = k.float()[:, None] * freqs[None]
    return torch.cat([angles.sin(), angles.cos()], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, c_out), c_out)
        self.norm2 = nn.GroupNorm(min(8, c_out), c_out)
        self.emb = nn.Linear(emb_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class EpsilonPredictor(nn.Module):
    """Small U-Net: two downsampling and two upsampling stages with skips.

    The step embedding is injected into every stage. Inputs of any float
    dtype are accepted; the output has the input's dtype and shape.
    """

    def __init__(self, in_channels: int = 1, base_width: int = 32):
        super().__init__()
        self.config = {"in_channels": in_channels, "base_width": base_width}
        w = base_width
        emb_dim = 4 * w
        self.emb_base = w
        self.embed = nn.Sequential(nn.Linear(w, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.stem = nn.Conv2d(in_channels, w, 3, padding=1)
        self.down0 = _ResBlock(w, w, emb_dim)
        self.down1 = _ResBlock(w, 2 * w, emb_dim)
        self.mid = _ResBlock(2 * w, 2 * w, emb_dim)
        self.up1 = _ResBlock(4 * w, 2 * w, emb_dim)
        self.up0 = _ResBlock(3 * w, w, emb_dim)
        self.head = nn.Conv2d(w, in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, k) -> torch.Tensor:
        in_dtype = x.dtype
        x = x.float()
        if not torch.is_tensor(k):
            k = torch.full((x.shape[0],), int(k), dtype=torch.long)
        emb = self.embed(step_embedding(k, self.emb_base))
        h0 = self.down0(self.stem(x), emb)                   # H
        h1 = self.down1(F.avg_pool2d(h0, 2), emb)            # H/2
        h2 = self.mid(F.avg_pool2d(h1, 2), emb)              # H/4
        u = F.interpolate(h2, scale_factor=2, mode="nearest")
        u = self.up1(torch.cat([u, h1], dim=1), emb)
        u = F.interpolate(u, scale_factor=2, mode="nearest")
        u = self.up0(torch.cat([u, h0], dim=1), emb)
        return self.head(u).to(in_dtype)


def build_predictor(config: dict, seed: int) -> EpsilonPredictor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return EpsilonPredictor(**config)


# ---------------------------------------------------------------------------
# reverse process


@torch.no_grad()
def reverse_step(x_k: torch.Tensor, k: int, predictor: nn.Module, schedule: NoiseSchedule,
                 rng: torch.Generator) -> torch.Tensor:
    """One ancestral step ``x_k -> x_{k-1}``; the last step (k = 1) adds no noise."""
    _check_step(k, schedule, lowest=1)
    k = int(k)
    beta = schedule.betas[k]
    eps_hat = predictor(x_k, k)
    coef = beta / math.sqrt(1.0 - schedule.alpha_bars[k])
    mean = (x_k - coef * eps_hat) / math.sqrt(schedule.alphas[k])
    if k == 1:
        return mean
    z = torch.randn(x_k.shape, generator=rng, dtype=x_k.dtype)
    return mean + math.sqrt(beta) * z


@torch.no_grad()
def purify(x: torch.Tensor, t: float, predictor: nn.Module, schedule: NoiseSchedule,
           rng: torch.Generator, on_step: Callable[[int], None] | None = None) -> torch.Tensor:
    """Diffuse ``x`` to step ``round(t * T)`` and run the reverse chain back to 0.

    ``on_step`` is called with each step index k as it is undone.
    """
    k = fraction_to_step(t, schedule)
    x_k, _ = forward_diffuse(x, k, schedule, rng)
    for step in range(k, 0, -1):
        x_k = reverse_step(x_k, step, predictor, schedule, rng)
        if on_step is not None:
            on_step(step)
    return x_k.clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# training


@dataclass
class DiffusionTrainConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    grad_clip: float = 1.0
    base_width: int = 32
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ema_decay: float = 0.995
    lr_decay: str = "cosine"
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0 or self.base_width <= 0:
            raise ValueError("epochs >= 0 and positive batch_size, lr, base_width are required")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"lr_decay must be 'none' or 'cosine', got {self.lr_decay!r}")


@dataclass
class DiffusionTrainResult:
    predictor: EpsilonPredictor
    schedule: NoiseSchedule
    epoch_losses: list[float] = field(default_factory=list)
    seconds: float = 0.0


def diffusion_train_step(predictor: nn.Module, batch: torch.Tensor, schedule: NoiseSchedule,
                         rng: torch.Generator, optimizer: torch.optim.Optimizer,
                         grad_clip: float | None = None) -> float:
    """One epsilon-prediction MSE update; returns the pre-update loss."""
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    batch = batch.float()
    k = torch.randint(1, schedule.num_steps + 1, (batch.shape[0],), generator=rng)
    x_k, eps = forward_diffuse(batch, k, schedule, rng)
    loss = F.mse_loss(predictor(x_k, k), eps)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"diffusion loss became {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(predictor.parameters(), grad_clip)
    optimizer.step()
    return float(loss.item())


def train_diffusion(images: torch.Tensor, config: DiffusionTrainConfig) -> DiffusionTrainResult:
    """Train an epsilon predictor from scratch on ``images`` (N, C, H, W) in [0, 1].

    With ``ema_decay > 0`` the returned predictor holds an exponential moving
    average of the weights, updated after every optimizer step. ``lr_decay =
    "cosine"`` anneals the learning rate to zero over the whole run.
    """
    config.validate()
    if len(images) == 0:
        raise ValueError("empty training set")
    schedule = make_linear_schedule(config.num_steps, config.beta_start, config.beta_end)
    predictor = build_predictor({"in_channels": images.shape[1], "base_width": config.base_width},
                                derive_seed(config.seed, "diffusion-init"))
    optimizer = torch.optim.Adam(predictor.parameters(), lr=config.lr)
    shuffle_rng = torch_generator(derive_seed(config.seed, "diffusion-shuffle"))
    noise_rng = torch_generator(derive_seed(config.seed, "diffusion-noise"))
    images = images.float()
    ema = copy.deepcopy(predictor) if config.ema_decay > 0 else None
    total_updates = config.epochs * math.ceil(len(images) / config.batch_size)
    scheduler = None
    if config.lr_decay == "cosine" and total_updates:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=total_updates)

    result = DiffusionTrainResult(predictor=ema if ema is not None else predictor, schedule=schedule)
    start = time.perf_counter()
    predictor.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(images), generator=shuffle_rng)
        losses = []
        for lo in range(0, len(images), config.batch_size):
            batch = images[order[lo : lo + config.batch_size]]
            losses.append(diffusion_train_step(predictor, batch, schedule, noise_rng, optimizer, config.grad_clip))
            if scheduler is not None:
                scheduler.step()
            if ema is not None:
                with torch.no_grad():
                    for avg, cur in zip(ema.parameters(), predictor.parameters()):
                        avg.lerp_(cur, 1.0 - config.ema_decay)
        result.epoch_losses.append(float(np.mean(losses)))
        logger.info("diffusion epoch %d/%d loss %.5f", epoch + 1, config.epochs, result.epoch_losses[-1])
    result.predictor.eval()
    result.seconds = time.perf_counter() - start
    return result
