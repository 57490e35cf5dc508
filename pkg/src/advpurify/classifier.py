"""Binary image classifier and the input-gradient primitive used by attacks."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteGradientError, TrainingDivergedError
from .seeding import derive_seed, torch_generator

if TYPE_CHECKING:
    from .attacks import AttackConfig

logger = logging.getLogger(__name__)

NUM_CLASSES = 2


class Classifier(nn.Module):
    """Three conv blocks followed by a small fully connected head.

    The head sees the whole 4x4 feature map rather than a global pool,
    because the label depends on *where* a lesion sits. Inputs are cast to
    the parameter dtype, so float64 images can be fed directly.
    """

    def __init__(self, in_channels: int = 1, image_size: int = 32, widths=(16, 32, 64), hidden: int = 64):
        super().__init__()
        if image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        widths = tuple(int(w) for w in widths)
        self.config = {"in_channels": in_channels, "image_size": image_size, "widths": list(widths), "hidden": hidden}
        w0, w1, w2 = widths
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, w0, 3, padding=1), nn.ReLU(),
            nn.Conv2d(w0, w0, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w0, w1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w1, w2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        cells = (image_size // 8) ** 2
        self.head = nn.Sequential(nn.Flatten(), nn.Linear(w2 * cells, hidden), nn.ReLU(), nn.Linear(hidden, NUM_CLASSES))

    @property
    def input_shape(self) -> tuple[int, int, int]:
        s = self.config["image_size"]
        return (self.config["in_channels"], s, s)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return self.head(self.features(x.to(dtype)))


class MicroClassifier(nn.Module):
    """Two-layer network (one conv, one linear) used for gradient checks."""

    def __init__(self, in_channels: int = 1, image_size: int = 8, width: int = 4):
        super().__init__()
        self.config = {"in_channels": in_channels, "image_size": image_size, "width": width}
        self.conv = nn.Conv2d(in_channels, width, 3, padding=1)
        self.fc = nn.Linear(width * image_size * image_size, NUM_CLASSES)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        s = self.config["image_size"]
        return (self.config["in_channels"], s, s)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return self.fc(torch.tanh(self.conv(x.to(dtype))).flatten(1))


def build_classifier(config: dict, seed: int, dtype=torch.float32) -> Classifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Classifier(**config)
    return model.to(dtype)


def _check_input(classifier: nn.Module, x: torch.Tensor) -> None:
    expected = getattr(classifier, "input_shape", None)
    if x.dim() != 4 or (expected is not None and tuple(x.shape[1:]) != tuple(expected)):
        raise ValueError(f"expected input of shape (N, {', '.join(map(str, expected or ('C', 'H', 'W')))}), got {tuple(x.shape)}")


@torch.no_grad()
def predict(classifier: nn.Module, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Per-class probabilities, shape (N, 2), float64 rows summing to 1."""
    _check_input(classifier, x)
    if len(x) and (x.min() < 0 or x.max() > 1):
        raise ValueError("classifier inputs must lie in [0, 1]")
    outs = [classifier(x[lo : lo + batch_size]).double() for lo in range(0, len(x), batch_size)]
    logits = torch.cat(outs) if outs else torch.empty(0, NUM_CLASSES, dtype=torch.float64)
    return torch.softmax(logits, dim=1)


def accuracy(probs: torch.Tensor, y: torch.Tensor) -> float:
    return float((probs.argmax(dim=1) == y).double().mean()) if len(y) else float("nan")


def loss_and_input_grad(classifier: nn.Module, x: torch.Tensor, y: torch.Tensor):
    """Summed cross-entropy and its gradient with respect to ``x``.

    Parameter gradients are left untouched, so this is safe to call in the
    middle of a training step.
    """
    _check_input(classifier, x)
    x = x.detach().clone().requires_grad_(True)
    loss = F.cross_entropy(classifier(x), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    bad = ~torch.isfinite(grad.flatten(1)).all(dim=1)
    if bad.any() or not torch.isfinite(loss):
        raise NonFiniteGradientError(torch.nonzero(bad).flatten().tolist())
    return loss.detach(), grad


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    widths: tuple = (16, 32, 64)
    hidden: int = 64
    attack: AttackConfig | None = None

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size > 0 and lr > 0 are required")


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    extra: dict[str, list[float]] = field(default_factory=dict)
    seconds: float = 0.0


def fit_classifier(x: torch.Tensor, y: torch.Tensor, config: TrainConfig,
                   perturb: Callable[[nn.Module, torch.Tensor, torch.Tensor, int], torch.Tensor] | None = None,
                   on_epoch_end: Callable[[nn.Module, int, TrainHistory], None] | None = None):
    """Shared Adam training loop.

    ``perturb(model, xb, yb, update_index)`` may replace each batch before the
    weight update; that is how adversarial training plugs in.
    """
    config.validate()
    if len(x) == 0:
        raise ValueError("empty training set")
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    c, h, _ = x.shape[1:]
    model = build_classifier({"in_channels": c, "image_size": h, "widths": config.widths, "hidden": config.hidden},
                             derive_seed(config.seed, "classifier-init"))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    shuffle_rng = torch_generator(derive_seed(config.seed, "classifier-shuffle"))
    history = TrainHistory()
    start = time.perf_counter()
    update = 0
    for epoch in range(config.epochs):
        order = torch.randperm(len(x), generator=shuffle_rng)
        total, correct = 0.0, 0
        for lo in range(0, len(x), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb, yb = x[idx], y[idx]
            if perturb is not None:
                xb = perturb(model, xb, yb, update)
            logits = model(xb)
            loss = F.cross_entropy(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"classifier loss became {loss.item()} in epoch {epoch}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss.item()) * len(idx)
            correct += int((logits.argmax(1) == yb).sum())
            update += 1
        history.losses.append(total / len(x))
        history.train_accuracy.append(correct / len(x))
        logger.info("classifier epoch %d/%d loss %.4f acc %.3f", epoch + 1, config.epochs,
                    history.losses[-1], history.train_accuracy[-1])
        if on_epoch_end is not None:
            on_epoch_end(model, epoch, history)
    model.eval()
    history.seconds = time.perf_counter() - start
    return model, history


def train_classifier(x: torch.Tensor, y: torch.Tensor, config: TrainConfig):
    """Standard training; returns ``(classifier, history)``."""
    return fit_classifier(x, y, config)


def parameter_vector(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().flatten().double() for p in model.parameters()]).numpy()
