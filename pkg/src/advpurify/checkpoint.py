"""Model checkpoints on top of the shared binary container.

A checkpoint's metadata records the model kind, its architecture config, the
training seed, and (for denoisers) the noise schedule configuration. Parameter
arrays are stored under their ``state_dict`` names.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from . import container
from .classifier import Classifier, MicroClassifier
from .diffusion import EpsilonPredictor, NoiseSchedule, make_linear_schedule
from .errors import CheckpointMismatchError

_KINDS = {"classifier": Classifier, "micro_classifier": MicroClassifier, "denoiser": EpsilonPredictor}


def _kind_of(model: nn.Module) -> str:
    for kind, cls in _KINDS.items():
        if type(model) is cls:
            return kind
    raise TypeError(f"cannot checkpoint a {type(model).__name__}")


def save_checkpoint(model: nn.Module, path, *, seed: int, schedule: NoiseSchedule | None = None,
                    extra: dict | None = None) -> None:
    """Write ``model`` to ``path``. Denoisers must be saved with their schedule."""
    kind = _kind_of(model)
    if kind == "denoiser" and schedule is None:
        raise ValueError("a denoiser checkpoint needs its noise schedule")
    state = model.state_dict()
    meta = {
        "kind": kind,
        "config": model.config,
        "seed": int(seed),
        "dtype": str(next(model.parameters()).dtype).removeprefix("torch."),
        "schedule": schedule.config() if schedule is not None else None,
        "extra": extra or {},
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in state.items()}
    container.write(path, meta, arrays)


def load_checkpoint(path, *, expect_kind: str | None = None, schedule: NoiseSchedule | None = None):
    """Rebuild a model from ``path``.

    Returns ``(model, meta)``; for denoisers ``meta["schedule"]`` is replaced by
    the rebuilt :class:`NoiseSchedule`. Passing ``schedule`` makes a differing
    stored schedule a :class:`CheckpointMismatchError`.
    """
    meta, arrays = container.read(path)
    kind = meta.get("kind")
    if kind not in _KINDS:
        raise CheckpointMismatchError(f"{path}: unknown checkpoint kind {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointMismatchError(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    stored_schedule = None
    if meta.get("schedule") is not None:
        stored_schedule = make_linear_schedule(**meta["schedule"])
        if schedule is not None and stored_schedule != schedule:
            raise CheckpointMismatchError(
                f"{path}: checkpoint schedule {meta['schedule']} does not match requested {schedule.config()}"
            )
    model = _KINDS[kind](**meta["config"]).to(getattr(torch, meta["dtype"]))
    expected = model.state_dict()
    if set(expected) != set(arrays):
        raise CheckpointMismatchError(f"{path}: parameter names differ from a {kind} with config {meta['config']}")
    for name, tensor in expected.items():
        if tuple(tensor.shape) != arrays[name].shape:
            raise CheckpointMismatchError(
                f"{path}: parameter {name} has shape {arrays[name].shape}, expected {tuple(tensor.shape)}"
            )
    model.load_state_dict({name: torch.from_numpy(arrays[name]) for name in expected})
    model.eval()
    meta = dict(meta, schedule=stored_schedule)
    return model, meta
