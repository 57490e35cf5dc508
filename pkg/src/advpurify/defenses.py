"""Defended classification pipelines and adversarial training."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .attacks import AttackConfig, pgd_attack
from .classifier import TrainConfig, TrainHistory, accuracy, fit_classifier, predict
from .diffusion import NoiseSchedule, forward_diffuse, fraction_to_step, purify
from .seeding import derive_seed, torch_generator

logger = logging.getLogger(__name__)

DEFENSE_KINDS = ("none", "noise", "purify", "adv_trained")
CHUNK = 200

COLLAPSE_MARGIN = 0.02
COLLAPSE_EPOCHS = 3


@dataclass(frozen=True)
class DefenseSpec:
    kind: str
    t: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}; choose from {DEFENSE_KINDS}")
        needs_t = self.kind in ("noise", "purify")
        if needs_t and self.t is None:
            raise ValueError(f"defense {self.kind!r} needs a noise fraction t")
        if not needs_t and self.t is not None:
            raise ValueError(f"defense {self.kind!r} takes no noise fraction")
        if self.t is not None and not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")

    def label(self) -> str:
        return self.kind if self.t is None else f"{self.kind}@t={self.t:g}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def noise_defense_classify(classifier: nn.Module, x: torch.Tensor, t: float, schedule: NoiseSchedule,
                           rng: torch.Generator) -> torch.Tensor:
    """Forward-diffuse to ``round(t*T)``, clamp to [0, 1], classify."""
    k = fraction_to_step(t, schedule)
    noisy, _ = forward_diffuse(x, k, schedule, rng)
    return predict(classifier, noisy.clamp(0.0, 1.0))


def purify_classify(classifier: nn.Module, predictor: nn.Module, x: torch.Tensor, t: float,
                    schedule: NoiseSchedule, rng: torch.Generator) -> torch.Tensor:
    return predict(classifier, purify(x, t, predictor, schedule, rng))


def defended_predict(spec: DefenseSpec, x: torch.Tensor, *, classifier: nn.Module,
                     predictor: nn.Module | None = None, schedule: NoiseSchedule | None = None,
                     robust_classifier: nn.Module | None = None, stream: str = "") -> torch.Tensor:
    """Run the pipeline described by ``spec`` on ``x``.

    Stochastic pipelines process ``x`` in chunks of ``CHUNK`` images, chunk
    ``i`` drawing from a generator seeded with ``derive_seed(spec.seed,
    stream, i)``; chunk results are therefore independent of evaluation order.
    """
    if spec.kind == "none":
        return predict(classifier, x)
    if spec.kind == "adv_trained":
        if robust_classifier is None:
            raise ValueError("adv_trained defense needs the adversarially trained classifier")
        return predict(robust_classifier, x)
    if schedule is None:
        raise ValueError(f"defense {spec.kind!r} needs a noise schedule")
    if spec.kind == "purify" and predictor is None:
        raise ValueError("purify defense needs a trained epsilon predictor")
    if spec.kind == "noise":
        transform = lambda xb, rng: forward_diffuse(xb, fraction_to_step(spec.t, schedule), schedule, rng)[0].clamp(0.0, 1.0)
    else:
        transform = lambda xb, rng: purify(xb, spec.t, predictor, schedule, rng)
    chunks = []
    for i, lo in enumerate(range(0, len(x), CHUNK)):
        rng = torch_generator(derive_seed(spec.seed, stream, i))
        chunks.append(transform(x[lo : lo + CHUNK], rng))
    cleaned = torch.cat(chunks) if chunks else x
    return predict(classifier, cleaned)


@dataclass
class AdversarialTrainResult:
    classifier: nn.Module
    history: TrainHistory
    collapsed: bool


def detect_collapse(val_accuracy: list[float], margin: float = COLLAPSE_MARGIN,
                    epochs: int = COLLAPSE_EPOCHS) -> bool:
    """True if ``|acc - 0.5| <= margin`` holds for ``epochs`` consecutive epochs."""
    run = 0
    for acc in val_accuracy:
        # slack absorbs float error in ratios such as 0.52 - 0.5
        run = run + 1 if abs(acc - 0.5) <= margin + 1e-12 else 0
        if run >= epochs:
            return True
    return False


def adversarial_train(x: torch.Tensor, y: torch.Tensor, attack_config: AttackConfig, train_config: TrainConfig,
                      x_val: torch.Tensor | None = None, y_val: torch.Tensor | None = None,
                      warmup_epochs: int = 0) -> AdversarialTrainResult:
    """Min-max training: every batch is replaced by PGD examples against the live weights.

    The attack seed for update ``i`` is ``derive_seed(attack_config.seed,
    "adv-train", i)``. With ``warmup_epochs > 0`` the training budget grows
    linearly from ``epsilon / n`` on the first update to the full ``epsilon``
    after ``n`` updates, where ``n`` is the number of updates in the warm-up
    epochs; an explicit step size is scaled along with it. Validation always
    uses the full budget. With validation data, clean and adversarial
    validation accuracy are appended to ``history.extra`` after every epoch.
    """
    if warmup_epochs < 0:
        raise ValueError(f"warmup_epochs must be >= 0, got {warmup_epochs}")
    ramp = warmup_epochs * math.ceil(len(x) / train_config.batch_size)

    def perturb(model, xb, yb, update):
        cfg = dataclasses.replace(attack_config, seed=derive_seed(attack_config.seed, "adv-train", update))
        if update < ramp:
            scale = (update + 1) / ramp
            cfg = dataclasses.replace(cfg, epsilon=cfg.epsilon * scale,
                                      step_size=None if cfg.step_size is None else cfg.step_size * scale)
        return pgd_attack(model, xb, yb, cfg)

    def on_epoch_end(model, epoch, history):
        if x_val is None:
            return
        clean = accuracy(predict(model, x_val), y_val)
        cfg = dataclasses.replace(attack_config, seed=derive_seed(attack_config.seed, "adv-val", epoch))
        robust = accuracy(predict(model, pgd_attack(model, x_val, y_val, cfg)), y_val)
        history.extra.setdefault("val_standard_accuracy", []).append(clean)
        history.extra.setdefault("val_robust_accuracy", []).append(robust)
        logger.info("adv-train epoch %d val standard %.3f robust %.3f", epoch + 1, clean, robust)

    model, history = fit_classifier(x, y, train_config, perturb=perturb, on_epoch_end=on_epoch_end)
    collapsed = detect_collapse(history.extra.get("val_standard_accuracy", []))
    if collapsed:
        logger.warning("adversarial training collapsed toward chance-level validation accuracy")
    return AdversarialTrainResult(classifier=model, history=history, collapsed=collapsed)
