"""Command-line entry point: ``advpurify <subcommand> [--config FILE] [--section.key VALUE ...]``.

Every subcommand reads its inputs from, and writes its outputs to, the output
directory (``paths.output_dir``, overridable with ``$ADVPURIFY_OUTPUT_DIR``),
so the subcommands chain without extra flags::

    gen-data -> train-classifier -> train-diffusion -> adv-train -> sweep -> eval

Each run also writes ``<subcommand>.config.yaml`` holding the resolved
configuration, the derived child seeds and the SHA-256 of every input file.

Exit codes: 0 success, 1 usage (unknown subcommand or flag), 2 configuration
schema violation, 3 runtime failure (missing or corrupt input file, training
collapse, I/O errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, container
from .attacks import AttackConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import TrainConfig, accuracy, predict, train_classifier
from .config import ConfigError, RunConfig, apply_mapping, dump_yaml, leaf_keys, load_config_file, set_key
from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset, split_dataset
from .defenses import DEFENSE_KINDS, DefenseSpec, adversarial_train
from .diffusion import DiffusionTrainConfig, make_linear_schedule, train_diffusion
from .errors import CheckpointError, TrainingDivergedError
from .evaluation import (
    SweepResult,
    SweepRow,
    craft_adversarial,
    dump_pipeline_images,
    emit_report,
    evaluate_defenses,
    make_t_grid,
    noise_sweep,
    pipeline_stages,
    select_t_star,
)

logger = logging.getLogger("advpurify")

SUBCOMMANDS = ("gen-data", "train-classifier", "train-diffusion", "adv-train", "attack", "eval", "sweep",
               "dump-images")
OUTPUT_ENV = "ADVPURIFY_OUTPUT_DIR"

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

DEFAULT_FILES = {
    "data": "dataset.bin",
    "classifier": "classifier.ckpt",
    "denoiser": "denoiser.ckpt",
    "robust_classifier": "robust_classifier.ckpt",
    "sweep": "sweep.json",
}

ALIASES = {
    "--out-dir": "paths.output_dir",
    "--data": "paths.data",
    "--classifier": "paths.classifier",
    "--denoiser": "paths.denoiser",
    "--robust-classifier": "paths.robust_classifier",
    "--sweep-result": "paths.sweep",
    "--t-min": "sweep.t_min",
    "--t-max": "sweep.t_max",
    "--points": "sweep.points",
    "--epsilon": "attack.epsilon",
    "--t-star": "eval.t_star",
}


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advpurify", description="Diffusion purification against adversarial attacks.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", help="YAML file with section.key settings")
        for key in leaf_keys():
            p.add_argument(f"--{key}", dest=f"set::{key}", metavar="VALUE", default=None)
        for flag, key in ALIASES.items():
            p.add_argument(flag, dest=f"alias::{key}", metavar="VALUE", default=None, help=f"alias for --{key}")
    return parser


_HELP = {
    "gen-data": "generate the synthetic dataset file",
    "train-classifier": "train the undefended classifier",
    "train-diffusion": "train the epsilon-predicting denoiser",
    "adv-train": "adversarially train a classifier",
    "attack": "craft a PGD batch against the classifier and save it",
    "eval": "compare none / noise / purify / adv_trained on the test subset",
    "sweep": "purification robust accuracy over a grid of noise fractions",
    "dump-images": "write clean / adversarial / noised / purified images of one example",
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then ``$ADVPURIFY_OUTPUT_DIR``, then flags."""
    cfg = RunConfig()
    if args.config:
        if not Path(args.config).is_file():
            raise RuntimeFailure(f"config file not found: {args.config}")
        apply_mapping(cfg, load_config_file(args.config), source=args.config)
    if os.environ.get(OUTPUT_ENV):
        cfg.paths.output_dir = os.environ[OUTPUT_ENV]
    for dest, value in vars(args).items():
        if value is not None and dest.startswith("alias::"):
            set_key(cfg, dest.split("::", 1)[1], value)
    for dest, value in vars(args).items():
        if value is not None and dest.startswith("set::"):
            set_key(cfg, dest.split("::", 1)[1], value)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    """Schema checks that need more than a type conversion."""
    try:
        _data_spec(cfg).validate()
        _attack_config(cfg, "attack")
        _attack_config(cfg, "adv_train")
        make_linear_schedule(cfg.schedule.num_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
        if len(cfg.data.split) != 3:
            raise ValueError("data.split needs three fractions")
        bad = [d for d in cfg.eval.defenses if d not in DEFENSE_KINDS]
        if bad:
            raise ValueError(f"eval.defenses has unknown kinds {bad}; choose from {DEFENSE_KINDS}")
        for name in ("n_test",):
            if getattr(cfg.eval, name) <= 0:
                raise ValueError(f"eval.{name} must be positive")
        if cfg.sweep.n_val <= 0 or cfg.adv_train.n_val < 0 or cfg.sweep.points <= 0:
            raise ValueError("sweep.n_val and sweep.points must be positive, adv_train.n_val non-negative")
        if cfg.adv_train.n_val % 2:
            raise ValueError("adv_train.n_val must be even: the validation subset is class-balanced")
        if cfg.adv_train.warmup_epochs < 0:
            raise ValueError("adv_train.warmup_epochs must be non-negative")
        if not 0 <= cfg.sweep.t_min <= cfg.sweep.t_max <= 1:
            raise ValueError("need 0 <= sweep.t_min <= sweep.t_max <= 1")
        for name, t in (("eval.t_star", cfg.eval.t_star), ("dump.t", cfg.dump.t)):
            if t is not None and not 0 <= t <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= cfg.diffusion.ema_decay < 1:
            raise ValueError("diffusion.ema_decay must lie in [0, 1)")
        if cfg.diffusion.lr_decay not in ("none", "cosine"):
            raise ValueError("diffusion.lr_decay must be 'none' or 'cosine'")
        for section in ("classifier", "diffusion", "adv_train"):
            sec = getattr(cfg, section)
            if sec.epochs < 0 or sec.batch_size <= 0 or sec.lr <= 0:
                raise ValueError(f"{section}: need epochs >= 0, batch_size > 0, lr > 0")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _data_spec(cfg: RunConfig) -> SyntheticSpec:
    fields = {f.name for f in dataclasses.fields(SyntheticSpec)} - {"seed"}
    values = {k: v for k, v in dataclasses.asdict(cfg.data).items() if k in fields}
    return SyntheticSpec(seed=cfg.seeds()["data"], **values)


def _attack_config(cfg: RunConfig, section: str) -> AttackConfig:
    sec = getattr(cfg, section)
    return AttackConfig(
        epsilon=sec.epsilon,
        num_steps=sec.num_steps,
        step_size=sec.step_size,
        random_start=getattr(sec, "random_start", True),
        seed=cfg.seeds()["attack" if section == "attack" else "adv_train"],
    )


def _schedule(cfg: RunConfig):
    return make_linear_schedule(cfg.schedule.num_steps, cfg.schedule.beta_start, cfg.schedule.beta_end)


class Run:
    """One subcommand invocation: resolved config, output directory, recorded inputs."""

    def __init__(self, name: str, cfg: RunConfig):
        self.name = name
        self.cfg = cfg
        self.out = Path(cfg.paths.output_dir)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def path(self, key: str) -> Path:
        given = getattr(self.cfg.paths, key)
        return Path(given) if given else self.out / DEFAULT_FILES[key]

    def input(self, key: str) -> Path:
        p = self.path(key)
        if not p.is_file():
            raise RuntimeFailure(f"missing input file for paths.{key}: {p}")
        self.inputs[str(p)] = hashlib.sha256(p.read_bytes()).hexdigest()
        return p

    def wrote(self, *paths) -> None:
        self.outputs.extend(str(p) for p in paths)

    def write_echo(self) -> Path:
        echo = {
            "subcommand": self.name,
            "version": __version__,
            "config": self.cfg.to_dict(),
            "seeds": self.cfg.seeds(),
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        target = self.out / f"{self.name}.config.yaml"
        target.write_text(dump_yaml(echo))
        return target

    def dataset(self):
        return load_dataset(self.input("data"))

    def split(self, ds):
        return split_dataset(len(ds), self.cfg.data.split, seed=self.cfg.seeds()["split"])

    def load(self, key: str, kind: str, schedule=None):
        model, meta = load_checkpoint(self.input(key), expect_kind=kind, schedule=schedule)
        return model, meta


def _test_subset(run: Run, ds, split):
    n = run.cfg.eval.n_test
    if n > len(split.test):
        raise ConfigError(f"eval.n_test={n} exceeds the {len(split.test)}-image test split")
    return ds.tensors(split.test[:n])


def _val_subset(run: Run, ds, split, n):
    if n > len(split.val):
        raise ConfigError(f"requested {n} validation images but the split holds {len(split.val)}")
    return ds.tensors(split.val[:n])


def _balanced_val_subset(run: Run, ds, split, n):
    # equal class counts, so a constant predictor scores exactly 0.5 and the collapse check can see it
    labels = ds.labels[split.val]
    picked = []
    for cls in (0, 1):
        members = [int(i) for i, lab in zip(split.val, labels) if int(lab) == cls]
        if len(members) < n // 2:
            raise ConfigError(f"requested {n} balanced validation images but class {cls} has {len(members)}")
        picked.extend(members[: n // 2])
    return ds.tensors(sorted(picked))


def cmd_gen_data(run: Run) -> None:
    spec = _data_spec(run.cfg)
    ds = generate_synthetic(spec)
    target = run.path("data")
    save_dataset(ds, target)
    run.wrote(target)
    logger.info("wrote %d images (%d positive) to %s", len(ds), int(ds.labels.sum()), target)


def _classifier_train_config(cfg: RunConfig, section: str) -> TrainConfig:
    sec = getattr(cfg, section)
    return TrainConfig(epochs=sec.epochs, batch_size=sec.batch_size, lr=sec.lr, seed=cfg.seeds()[
        "classifier" if section == "classifier" else "adv_train"], widths=tuple(cfg.classifier.widths),
        hidden=cfg.classifier.hidden)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_train_classifier(run: Run) -> None:
    ds = run.dataset()
    split = run.split(ds)
    x, y = ds.tensors(split.train)
    config = _classifier_train_config(run.cfg, "classifier")
    model, history = train_classifier(x, y, config)
    xv, yv = ds.tensors(split.val)
    xt, yt = ds.tensors(split.test)
    summary = {
        "train_accuracy": history.train_accuracy[-1] if history.train_accuracy else None,
        "val_accuracy": accuracy(predict(model, xv), yv),
        "test_accuracy": accuracy(predict(model, xt), yt),
        "losses": history.losses,
        "seconds": history.seconds,
    }
    target = run.path("classifier")
    save_checkpoint(model, target, seed=config.seed, extra={"epochs": config.epochs})
    _write_json(run.out / "train-classifier.history.json", summary)
    run.wrote(target, run.out / "train-classifier.history.json")
    logger.info("classifier: val %.3f test %.3f (%.1fs)", summary["val_accuracy"], summary["test_accuracy"],
                history.seconds)


def cmd_train_diffusion(run: Run) -> None:
    ds = run.dataset()
    split = run.split(ds)
    x, _ = ds.tensors(split.train)
    d, s = run.cfg.diffusion, run.cfg.schedule
    config = DiffusionTrainConfig(epochs=d.epochs, batch_size=d.batch_size, lr=d.lr, grad_clip=d.grad_clip,
                                  base_width=d.base_width, num_steps=s.num_steps, beta_start=s.beta_start,
                                  beta_end=s.beta_end, ema_decay=d.ema_decay,
                                  lr_decay=d.lr_decay, seed=run.cfg.seeds()["diffusion"])
    result = train_diffusion(x, config)
    target = run.path("denoiser")
    save_checkpoint(result.predictor, target, seed=config.seed, schedule=result.schedule,
                    extra={"epochs": config.epochs})
    _write_json(run.out / "train-diffusion.history.json",
                {"epoch_losses": result.epoch_losses, "seconds": result.seconds})
    run.wrote(target, run.out / "train-diffusion.history.json")


def cmd_adv_train(run: Run) -> None:
    ds = run.dataset()
    split = run.split(ds)
    x, y = ds.tensors(split.train)
    n_val = run.cfg.adv_train.n_val
    xv, yv = _balanced_val_subset(run, ds, split, n_val) if n_val else (None, None)
    attack = _attack_config(run.cfg, "adv_train")
    config = _classifier_train_config(run.cfg, "adv_train")
    result = adversarial_train(x, y, attack, config, xv, yv, warmup_epochs=run.cfg.adv_train.warmup_epochs)
    target = run.path("robust_classifier")
    save_checkpoint(result.classifier, target, seed=config.seed,
                    extra={"collapsed": result.collapsed,
                           "epsilon": attack.epsilon, "attack_steps": attack.num_steps})
    history = {"losses": result.history.losses, "train_accuracy": result.history.train_accuracy,
               **result.history.extra, "collapsed": result.collapsed, "seconds": result.history.seconds}
    _write_json(run.out / "adv-train.history.json", history)
    run.wrote(target, run.out / "adv-train.history.json")
    if result.collapsed:
        run.write_echo()
        raise RuntimeFailure("adversarial training collapsed: validation accuracy stayed at chance; "
                             f"weights kept at {target} for inspection")


def cmd_attack(run: Run) -> None:
    ds = run.dataset()
    split = run.split(ds)
    x, y = _test_subset(run, ds, split)
    clf, _ = run.load("classifier", "classifier")
    attack = _attack_config(run.cfg, "attack")
    batch = craft_adversarial(clf, x, y, attack)
    target = run.out / "adversarial.bin"
    manifest = {
        "kind": "adversarial_batch",
        "epsilon": attack.epsilon,
        "num_steps": attack.num_steps,
        "step_size": attack.alpha,
        "random_start": attack.random_start,
        "seed": attack.seed,
        "boundary_fraction": batch.boundary_fraction,
        "digest": batch.digest,
        "n": len(y),
        "clean_accuracy": accuracy(predict(clf, x), y),
        "robust_accuracy": accuracy(predict(clf, batch.x_adv), y),
    }
    container.write(target, manifest, {"x_adv": batch.x_adv.numpy(), "labels": y.numpy(),
                                       "indices": np.asarray(split.test[: len(y)], dtype=np.int64)})
    _write_json(run.out / "attack_manifest.json", {**manifest, "seconds": batch.seconds})
    run.wrote(target, run.out / "attack_manifest.json")
    logger.info("attack: clean %.3f robust %.3f boundary %.3f", manifest["clean_accuracy"],
                manifest["robust_accuracy"], batch.boundary_fraction)


def _load_sweep(path: Path) -> SweepResult:
    data = json.loads(path.read_text())
    rows = [SweepRow(**r) for r in data.pop("rows")]
    return SweepResult(rows=rows, **data)


def _resolve_t_star(run: Run) -> float:
    if run.cfg.eval.t_star is not None:
        return run.cfg.eval.t_star
    p = run.path("sweep")
    if not p.is_file():
        raise ConfigError(f"no eval.t_star given and no sweep result at {p}; run `sweep` first or pass --t-star")
    run.input("sweep")
    return select_t_star(_load_sweep(p), run.cfg.eval.t_tolerance)


def cmd_eval(run: Run) -> None:
    ds = run.dataset()
    split = run.split(ds)
    x, y = _test_subset(run, ds, split)
    schedule = _schedule(run.cfg)
    kinds = list(run.cfg.eval.defenses)
    clf, _ = run.load("classifier", "classifier")
    t_star = _resolve_t_star(run) if {"noise", "purify"} & set(kinds) else None
    predictor = run.load("denoiser", "denoiser", schedule)[0] if "purify" in kinds else None
    robust = run.load("robust_classifier", "classifier")[0] if "adv_trained" in kinds else None
    seed = run.cfg.seeds()["defense"]
    defenses = [DefenseSpec(k, t=t_star if k in ("noise", "purify") else None, seed=seed) for k in kinds]
    reports = evaluate_defenses(clf, defenses, x, y, _attack_config(run.cfg, "attack"), predictor=predictor,
                                schedule=schedule, robust_classifier=robust)
    csv_path, txt_path = emit_report(reports, run.out / "eval", record_timing=run.cfg.eval.record_timing)
    run.wrote(csv_path, run.out / "eval.json", txt_path)
    sys.stdout.write(txt_path.read_text())


def cmd_sweep(run: Run) -> None:
    ds = run.dataset()
    split = run.split(ds)
    x, y = _val_subset(run, ds, split, run.cfg.sweep.n_val)
    schedule = _schedule(run.cfg)
    clf, _ = run.load("classifier", "classifier")
    predictor, _ = run.load("denoiser", "denoiser", schedule)
    s = run.cfg.sweep
    try:
        grid = make_t_grid(s.t_min, s.t_max, s.points)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = noise_sweep(clf, predictor, x, y, grid, _attack_config(run.cfg, "attack"), schedule,
                         seed=run.cfg.seeds()["sweep"])
    target = run.path("sweep")
    csv_path, txt_path = emit_report(result, target.with_suffix(""), record_timing=run.cfg.eval.record_timing)
    t_star = select_t_star(result, run.cfg.eval.t_tolerance)
    run.wrote(csv_path, target.with_suffix(".json"), txt_path)
    sys.stdout.write(txt_path.read_text())
    sys.stdout.write(f"t* = {t_star:g}\n")


def cmd_dump_images(run: Run) -> None:
    ds = run.dataset()
    split = run.split(ds)
    idx = run.cfg.dump.index
    if not 0 <= idx < len(split.test):
        raise ConfigError(f"dump.index must lie in [0, {len(split.test)})")
    x, y = ds.tensors(split.test[idx : idx + 1])
    schedule = _schedule(run.cfg)
    clf, _ = run.load("classifier", "classifier")
    predictor, _ = run.load("denoiser", "denoiser", schedule)
    t = run.cfg.dump.t if run.cfg.dump.t is not None else _resolve_t_star(run)
    attack = _attack_config(run.cfg, "attack")
    stages = pipeline_stages(x, y, classifier=clf, predictor=predictor, schedule=schedule, t=t,
                             attack_config=attack, seed=run.cfg.seeds()["dump"])
    written = dump_pipeline_images(stages, run.out / "images", epsilon=attack.epsilon)
    run.wrote(*written)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-classifier": cmd_train_classifier,
    "train-diffusion": cmd_train_diffusion,
    "adv-train": cmd_adv_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "dump-images": cmd_dump_images,
}


def run(argv=None) -> int:
    """Execute one subcommand and return its exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        current = Run(args.subcommand, cfg)
        current.out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        COMMANDS[args.subcommand](current)
        current.write_echo()
        logger.info("%s finished in %.1fs", args.subcommand, time.perf_counter() - start)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except (RuntimeFailure, CheckpointError, TrainingDivergedError, OSError) as exc:
        sys.stderr.write(f"runtime error: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
