"""Standard/robust accuracy reports, noise-level sweeps, and image dumps."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .attacks import AttackConfig, boundary_fraction, pgd_attack
from .defenses import DefenseSpec, defended_predict
from .diffusion import NoiseSchedule, forward_diffuse, fraction_to_step, reverse_step
from .seeding import torch_generator

CSV_COLUMNS = ("run_id", "defense_kind", "t", "epsilon", "attack_steps", "n", "standard_acc", "robust_acc",
               "boundary_fraction", "seconds", "seed")

DEFAULT_T_GRID = (0.001, 0.005, 0.01, 0.02, 0.04, 0.07, 0.10, 0.15, 0.20, 0.30)

# Published figures for context only. They come from PCam with ResNet101
# (GoogLeNet for adversarial training) and are never compared against.
PAPER_REFERENCE = {
    "none": {"standard_acc": 0.87, "robust_acc": 0.06},
    "noise": {"standard_acc": 0.66, "robust_acc": 0.58},
    "adv_trained": {"standard_acc": 0.70, "robust_acc": 0.57},
    "purify": {"standard_acc": None, "robust_acc": 0.75},
}
PAPER_LABEL = "paper (PCam/ResNet101), not this run"


def tensor_digest(x: torch.Tensor) -> str:
    arr = np.ascontiguousarray(x.detach().double().cpu().numpy())
    return hashlib.sha256(repr(arr.shape).encode() + arr.tobytes()).hexdigest()


@dataclass
class AdversarialBatch:
    x_adv: torch.Tensor
    digest: str
    boundary_fraction: float
    seconds: float
    config: AttackConfig


def craft_adversarial(classifier: nn.Module, x: torch.Tensor, y: torch.Tensor,
                      attack_config: AttackConfig) -> AdversarialBatch:
    start = time.perf_counter()
    x_adv = pgd_attack(classifier, x, y, attack_config)
    seconds = time.perf_counter() - start
    return AdversarialBatch(x_adv=x_adv, digest=tensor_digest(x_adv),
                            boundary_fraction=boundary_fraction(x_adv, x, attack_config.epsilon),
                            seconds=seconds, config=attack_config)


@dataclass
class EvalReport:
    run_id: str
    defense: DefenseSpec
    n_samples: int
    standard_accuracy: float
    robust_accuracy: float
    per_class: dict
    boundary_fraction: float
    seconds: float
    epsilon: float
    attack_steps: int
    adversarial_digest: str
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["defense"] = self.defense.to_dict()
        out["paper_reference"] = {"label": PAPER_LABEL, **PAPER_REFERENCE[self.defense.kind]}
        return out


@dataclass
class SweepRow:
    t: float
    steps: int
    robust_accuracy: float
    standard_accuracy: float
    seconds: float
    seed: int


@dataclass
class SweepResult:
    run_id: str
    rows: list[SweepRow]
    n_samples: int
    epsilon: float
    attack_steps: int
    boundary_fraction: float
    adversarial_digest: str
    seeds: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def default_run_id(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _per_class(y, std_pred, rob_pred) -> dict:
    out = {}
    for c in (0, 1):
        mask = y == c
        out[str(c)] = {
            "n": int(mask.sum()),
            "standard_correct": int((std_pred[mask] == c).sum()),
            "robust_correct": int((rob_pred[mask] == c).sum()),
        }
    return out


def evaluate(classifier: nn.Module, defense: DefenseSpec, x: torch.Tensor, y: torch.Tensor,
             attack_config: AttackConfig, *, predictor: nn.Module | None = None,
             schedule: NoiseSchedule | None = None, robust_classifier: nn.Module | None = None,
             adversarial: AdversarialBatch | None = None, run_id: str | None = None) -> EvalReport:
    """Standard and robust accuracy of one defended pipeline.

    Adversarial inputs are crafted against the undefended ``classifier``
    unless a shared ``adversarial`` batch is passed in.
    """
    if len(y) == 0:
        raise ValueError("empty test set")
    if adversarial is None:
        adversarial = craft_adversarial(classifier, x, y, attack_config)
    if run_id is None:
        run_id = default_run_id(defense.to_dict(), dataclasses.asdict(attack_config), tensor_digest(x))
    kwargs = dict(classifier=classifier, predictor=predictor, schedule=schedule, robust_classifier=robust_classifier)
    start = time.perf_counter()
    std_pred = defended_predict(defense, x, stream="clean", **kwargs).argmax(dim=1)
    rob_pred = defended_predict(defense, adversarial.x_adv, stream="adv", **kwargs).argmax(dim=1)
    seconds = time.perf_counter() - start + adversarial.seconds
    return EvalReport(
        run_id=run_id,
        defense=defense,
        n_samples=len(y),
        standard_accuracy=float((std_pred == y).double().mean()),
        robust_accuracy=float((rob_pred == y).double().mean()),
        per_class=_per_class(y, std_pred, rob_pred),
        boundary_fraction=adversarial.boundary_fraction,
        seconds=seconds,
        epsilon=attack_config.epsilon,
        attack_steps=attack_config.num_steps,
        adversarial_digest=adversarial.digest,
        seeds={"attack": attack_config.seed, "defense": defense.seed},
    )


def evaluate_defenses(classifier: nn.Module, defenses, x: torch.Tensor, y: torch.Tensor,
                      attack_config: AttackConfig, *, run_id: str | None = None, **kwargs) -> list[EvalReport]:
    """Evaluate several defenses against one shared adversarial batch, in the given order."""
    defenses = list(defenses)
    adversarial = craft_adversarial(classifier, x, y, attack_config)
    if run_id is None:
        run_id = default_run_id([d.to_dict() for d in defenses], dataclasses.asdict(attack_config), tensor_digest(x))
    return [evaluate(classifier, d, x, y, attack_config, adversarial=adversarial, run_id=run_id, **kwargs)
            for d in defenses]


def validate_grid(t_grid) -> list[float]:
    grid = [float(t) for t in t_grid]
    if not grid:
        raise ValueError("empty noise-level grid")
    if any(not 0.0 <= t <= 1.0 for t in grid):
        raise ValueError("grid values must lie in [0, 1]")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("grid values must be strictly increasing")
    return grid


def make_t_grid(t_min: float = 0.001, t_max: float = 0.300, points: int = len(DEFAULT_T_GRID)) -> list[float]:
    """The default grid when it fits ``[t_min, t_max]``, otherwise a geometric grid."""
    if (t_min, t_max, points) == (DEFAULT_T_GRID[0], DEFAULT_T_GRID[-1], len(DEFAULT_T_GRID)):
        return list(DEFAULT_T_GRID)
    if points == 1:
        return [float(t_min)]
    if t_min <= 0:
        return [float(v) for v in np.linspace(t_min, t_max, points)]
    return [float(v) for v in np.geomspace(t_min, t_max, points)]


def noise_sweep(classifier: nn.Module, predictor: nn.Module, x: torch.Tensor, y: torch.Tensor, t_grid,
                attack_config: AttackConfig, schedule: NoiseSchedule, seed: int = 0,
                adversarial: AdversarialBatch | None = None, run_id: str | None = None) -> SweepResult:
    """Purification accuracy at each noise fraction, all rows sharing one adversarial batch."""
    grid = validate_grid(t_grid)
    if adversarial is None:
        adversarial = craft_adversarial(classifier, x, y, attack_config)
    if run_id is None:
        run_id = default_run_id("sweep", grid, dataclasses.asdict(attack_config), seed, tensor_digest(x))
    rows = []
    for t in grid:
        spec = DefenseSpec("purify", t=t, seed=seed)
        start = time.perf_counter()
        std_pred = defended_predict(spec, x, classifier=classifier, predictor=predictor, schedule=schedule,
                                    stream="clean").argmax(dim=1)
        rob_pred = defended_predict(spec, adversarial.x_adv, classifier=classifier, predictor=predictor,
                                    schedule=schedule, stream="adv").argmax(dim=1)
        rows.append(SweepRow(
            t=t,
            steps=fraction_to_step(t, schedule),
            robust_accuracy=float((rob_pred == y).double().mean()),
            standard_accuracy=float((std_pred == y).double().mean()),
            seconds=time.perf_counter() - start,
            seed=seed,
        ))
    return SweepResult(run_id=run_id, rows=rows, n_samples=len(y), epsilon=attack_config.epsilon,
                       attack_steps=attack_config.num_steps, boundary_fraction=adversarial.boundary_fraction,
                       adversarial_digest=adversarial.digest, seeds={"attack": attack_config.seed, "purify": seed})


def select_t_star(sweep: SweepResult, tolerance: float = 0.02) -> float:
    """Smallest grid value whose robust accuracy is within ``tolerance`` of the best row.

    Fewer reverse steps means faster inference, so the low end of the
    near-optimal range wins.
    """
    best = max(r.robust_accuracy for r in sweep.rows)
    return next(r.t for r in sweep.rows if r.robust_accuracy >= best - tolerance)


# ---------------------------------------------------------------------------
# report emission


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_rows(result, record_timing: bool):
    if isinstance(result, SweepResult):
        for r in result.rows:
            yield [result.run_id, "purify", r.t, result.epsilon, result.attack_steps, result.n_samples,
                   r.standard_accuracy, r.robust_accuracy, result.boundary_fraction,
                   r.seconds if record_timing else None, r.seed]
        return
    for rep in result:
        yield [rep.run_id, rep.defense.kind, rep.defense.t, rep.epsilon, rep.attack_steps, rep.n_samples,
               rep.standard_accuracy, rep.robust_accuracy, rep.boundary_fraction,
               rep.seconds if record_timing else None, rep.defense.seed]


def _summary(result) -> str:
    lines = []
    if isinstance(result, SweepResult):
        lines.append(f"Noise-level sweep  run {result.run_id}  n={result.n_samples}  "
                     f"eps={result.epsilon:.5f}  attack steps={result.attack_steps}")
        lines.append(f"{'t':>8} {'steps':>6} {'standard':>9} {'robust':>8} {'seconds':>8}")
        for r in result.rows:
            lines.append(f"{r.t:>8.3f} {r.steps:>6d} {r.standard_accuracy:>9.3f} {r.robust_accuracy:>8.3f} {r.seconds:>8.1f}")
        best = max(result.rows, key=lambda r: r.robust_accuracy)
        lines.append(f"best robust accuracy {best.robust_accuracy:.3f} at t={best.t:g}; "
                     f"selected t* = {select_t_star(result):g}")
        lines.append(f"mean boundary fraction of the attack: {result.boundary_fraction:.3f}")
        return "\n".join(lines) + "\n"

    reports = list(result)
    head = reports[0]
    lines.append(f"Defense comparison  run {head.run_id}  n={head.n_samples}  "
                 f"eps={head.epsilon:.5f}  attack steps={head.attack_steps}")
    lines.append(f"{'defense':<18} {'standard':>9} {'robust':>8} {'seconds':>8}")
    for rep in reports:
        lines.append(f"{rep.defense.label():<18} {rep.standard_accuracy:>9.3f} {rep.robust_accuracy:>8.3f} {rep.seconds:>8.1f}")
    lines.append(f"mean boundary fraction of the attack: {head.boundary_fraction:.3f}")
    lines.append(f"adversarial batch sha256: {head.adversarial_digest}")
    lines.append("")
    lines.append(f"Reference figures, {PAPER_LABEL}:")
    for kind, ref in PAPER_REFERENCE.items():
        std = "close to vanilla" if ref["standard_acc"] is None else f"{ref['standard_acc']:.2f}"
        lines.append(f"  {kind:<12} standard {std:<16} robust {ref['robust_acc']:.2f}")
    return "\n".join(lines) + "\n"


def emit_report(result, path, record_timing: bool = True) -> tuple[Path, Path]:
    """Write ``<path>.csv``, ``<path>.json`` and ``<path>.txt`` for a sweep or a list of reports.

    CSV columns are :data:`CSV_COLUMNS`. With ``record_timing=False`` the
    ``seconds`` column is left blank so reruns produce byte-identical files.
    """
    path = Path(path)
    if isinstance(result, EvalReport):
        result = [result]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in _csv_rows(result, record_timing):
        writer.writerow([_fmt(v) for v in row])
    payload = result.to_dict() if isinstance(result, SweepResult) else [r.to_dict() for r in result]
    csv_path, txt_path = path.with_suffix(".csv"), path.with_suffix(".txt")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(buf.getvalue())
        path.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        txt_path.write_text(_summary(result))
    except OSError as exc:
        raise OSError(f"cannot write report under {path}: {exc.strerror}") from exc
    return csv_path, txt_path


# ---------------------------------------------------------------------------
# qualitative dumps


def pipeline_stages(x: torch.Tensor, y: torch.Tensor, *, classifier: nn.Module, predictor: nn.Module,
                    schedule: NoiseSchedule, t: float, attack_config: AttackConfig, seed: int = 0) -> dict:
    """Clean, adversarial, noised and purified versions of one example.

    ``noised`` is the exact intermediate the purifier starts from, and
    ``purified`` equals ``purify(adversarial, t, ..., torch_generator(seed))``.
    ``purified_clean`` runs the same purification on the clean image.
    """
    if x.shape[0] != 1:
        raise ValueError("pipeline_stages takes a single example")
    x = x.double()
    x_adv = pgd_attack(classifier, x, y, attack_config)
    k = fraction_to_step(t, schedule)

    def run(img):
        rng = torch_generator(seed)
        noised, _ = forward_diffuse(img, k, schedule, rng)
        cur = noised
        for step in range(k, 0, -1):
            cur = reverse_step(cur, step, predictor, schedule, rng)
        return noised, cur.clamp(0.0, 1.0)

    noised, purified = run(x_adv)
    _, purified_clean = run(x)
    return {
        "clean": x[0].numpy(),
        "adversarial": x_adv[0].numpy(),
        "noised": noised[0].numpy(),
        "purified": purified[0].numpy(),
        "purified_clean": purified_clean[0].numpy(),
        "difference": (x_adv - x)[0].numpy(),
    }


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def dump_pipeline_images(stages: dict, path, epsilon: float | None = None, scale: int = 4) -> list[Path]:
    """Write one PNG per stage, a side-by-side strip, and ``stages.npz`` with exact values.

    The difference image maps ``[-eps, eps]`` onto the full grey range.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    panels = []
    for name, img in stages.items():
        img = np.asarray(img)[0] if np.asarray(img).ndim == 3 else np.asarray(img)
        if name == "difference":
            span = epsilon if epsilon else max(float(np.abs(img).max()), 1e-12)
            pixels = _to_uint8(img / (2 * span) + 0.5)
        else:
            pixels = _to_uint8(img)
        target = out / f"{name}.png"
        Image.fromarray(pixels, mode="L").save(target)
        written.append(target)
        panels.append(np.kron(pixels, np.ones((scale, scale), dtype=np.uint8)))
    gap = np.full((panels[0].shape[0], 2 * scale), 255, dtype=np.uint8)
    strip = np.concatenate([p for panel in panels for p in (panel, gap)][:-1], axis=1)
    Image.fromarray(strip, mode="L").save(out / "strip.png")
    np.savez(out / "stages.npz", **{k: np.asarray(v) for k, v in stages.items()})
    return written + [out / "strip.png", out / "stages.npz"]
