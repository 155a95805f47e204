"""Command-line interface.

Every command resolves a full configuration (built-in defaults, then the
``--config`` file, then command-line flags), writes it to ``<out>/manifest.json``
and only then starts working. ``idd rerun <manifest>`` replays a run from that
file alone.

Config file schema (YAML or JSON, every section and key optional)::

    data:    num_classes, height, width, train_count, val_count, seed, ignore_fraction
    model:   teacher: {channel_widths, feature_dim, strides, pyramid_bins}
             student: {channel_widths, feature_dim, strides, pyramid_bins}
    train:   total_iters, batch_size, base_lr, lr_power, momentum, weight_decay,
             seed, eval_every, deterministic
    weights: lambda1, lambda2, lambda3, tau_pixel, tau_channel, enable_skd,
             enable_cw, enable_id, enable_pi, affinity_grid, pi_target
    poshead: iters, lr, batch_size, hidden, seed
    ablate:  seeds
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import torch
import yaml

from . import __version__
from .checkpoint import CheckpointError, load_head, load_model, save_head
from .data_synth import (DatasetFormatError, DatasetSpec, generate_dataset, load_dataset, read_spec, save_dataset,
                         stack_samples)
from .losses import PRESETS, LossWeights
from .metrics import evaluate
from .models import ModelSpec, default_student_spec, default_teacher_spec
from .trainer import (
    CHECKPOINT_NAME,
    LOG_NAME,
    TrainConfig,
    TrainData,
    distill_student,
    run_ablation,
    train_teacher,
)

log = logging.getLogger("idd")

MANIFEST_NAME = "manifest.json"
TRAIN_FILE = "train.idds"
VAL_FILE = "val.idds"
POSHEAD_NAME = "poshead.iddc"
METRICS_NAME = "metrics.json"
COMMANDS = ("gen-data", "train-teacher", "pretrain-poshead", "distill", "evaluate", "ablate")


class CliError(Exception):
    pass


def _model_section(spec: ModelSpec) -> dict:
    d = spec.to_dict()
    for k in ("role", "num_classes"):
        d.pop(k)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def default_config() -> dict:
    data = DatasetSpec()
    train = TrainConfig().to_dict()
    weights = train.pop("weights")
    return {
        "data": data.to_dict(),
        "model": {"teacher": _model_section(default_teacher_spec()),
                  "student": _model_section(default_student_spec())},
        "train": train,
        "weights": weights,
        "poshead": {"iters": 1000, "lr": 3e-3, "batch_size": 8, "hidden": 16, "seed": 0},
        "ablate": {"seeds": 1},
    }


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise CliError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise CliError(f"config key {where}{k!r} must be a mapping")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise CliError(f"{path}: config must be a mapping at the top level")
        cfg = _merge(cfg, loaded)
    if args.seed is not None:
        key = "data" if args.command == "gen-data" else "train"
        cfg[key]["seed"] = args.seed
        if args.command == "pretrain-poshead":
            cfg["poshead"]["seed"] = args.seed
    if args.deterministic is not None:
        cfg["train"]["deterministic"] = args.deterministic
    if getattr(args, "seeds", None) is not None:
        cfg["ablate"]["seeds"] = args.seeds
    if getattr(args, "preset", None):
        if args.preset not in PRESETS:
            raise CliError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
        for term in ("skd", "cw", "id", "pi"):
            cfg["weights"][f"enable_{term}"] = term in PRESETS[args.preset]
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        dataset_spec(cfg).validate()
        train_config(cfg)
        model_spec(cfg, "teacher")
        model_spec(cfg, "student")
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}") from None
    ph = cfg["poshead"]
    if ph["iters"] < 0 or ph["hidden"] < 1 or ph["batch_size"] < 1 or not ph["lr"] > 0:
        raise CliError("invalid configuration: poshead needs iters >= 0, hidden >= 1, batch_size >= 1, lr > 0")
    if int(cfg["ablate"]["seeds"]) < 1:
        raise CliError("invalid configuration: ablate.seeds must be >= 1")


def dataset_spec(cfg: dict) -> DatasetSpec:
    return DatasetSpec.from_dict(cfg["data"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict({**cfg["train"], "weights": LossWeights.from_dict(cfg["weights"])})


def model_spec(cfg: dict, role: str) -> ModelSpec:
    return ModelSpec(role=role, num_classes=cfg["data"]["num_classes"], **cfg["model"][role])


def _prepare_out(out: Path, force: bool, resume: bool = False) -> None:
    if out.exists() and any(out.iterdir()) and not (force or resume):
        raise CliError(f"output directory {out} already exists and is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def write_manifest(out: Path, command: str, args, cfg: dict, inputs: dict) -> dict:
    manifest = {
        "command": command,
        "config_path": str(args.config) if args.config else None,
        "config": cfg,
        "inputs": inputs,
        "out": str(out),
        "version": __version__,
        "seed": cfg["data" if command == "gen-data" else "train"]["seed"],
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _checkpoint_path(p: str, what: str, default_name: str) -> Path:
    path = Path(p)
    if path.is_dir():
        path = path / default_name
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _load_data(data_dir: str, num_classes: int) -> TrainData:
    d = Path(data_dir)
    for name in (TRAIN_FILE, VAL_FILE):
        if not (d / name).exists():
            raise CliError(f"dataset file not found: {d / name}")
    train = load_dataset(d / TRAIN_FILE, num_classes=num_classes)
    val = load_dataset(d / VAL_FILE, num_classes=num_classes)
    return TrainData.from_samples(train, val, num_classes)


def _require(args, *names):
    for n in names:
        if not getattr(args, n, None):
            raise CliError(f"--{n.replace('_', '-')} is required for {args.command}")


# commands --------------------------------------------------------------------

def cmd_gen_data(args, cfg, out: Path) -> None:
    spec = dataset_spec(cfg)
    write_manifest(out, "gen-data", args, cfg, {})
    save_dataset(generate_dataset(spec, "train"), out / TRAIN_FILE, spec)
    save_dataset(generate_dataset(spec, "val"), out / VAL_FILE, spec)
    print(f"wrote {spec.train_count} train / {spec.val_count} val samples to {out}")


def cmd_train_teacher(args, cfg, out: Path) -> None:
    _require(args, "data")
    write_manifest(out, "train-teacher", args, cfg, {"data": args.data})
    data = _load_data(args.data, cfg["data"]["num_classes"])
    _, record = train_teacher(train_config(cfg), data, spec=model_spec(cfg, "teacher"), out_dir=out,
                              resume=args.resume)
    print(f"teacher final miou {record.final_miou:.4f}")


def cmd_pretrain_poshead(args, cfg, out: Path) -> None:
    from .position import pretrain_position_head

    _require(args, "data", "teacher")
    teacher_path = _checkpoint_path(args.teacher, "teacher checkpoint", CHECKPOINT_NAME)
    write_manifest(out, "pretrain-poshead", args, cfg, {"data": args.data, "teacher": args.teacher})
    data = _load_data(args.data, cfg["data"]["num_classes"])
    teacher, _ = load_model(teacher_path)
    ph = cfg["poshead"]
    head, history = pretrain_position_head(teacher, data.train_images, iters=ph["iters"], lr=ph["lr"],
                                           batch_size=ph["batch_size"], seed=ph["seed"], hidden=ph["hidden"],
                                           val_images=data.val_images)
    save_head(out / POSHEAD_NAME, head, ph["iters"], {"history": {k: v for k, v in history.items()
                                                                  if k != "train_mse"}})
    (out / "history.json").write_text(json.dumps(history, indent=2, sort_keys=True) + "\n")
    print(f"position head val correlation {history['val_final']['correlation']:.4f}")


def _teacher_and_head(args, cfg, need_head: bool):
    _require(args, "teacher")
    teacher_path = _checkpoint_path(args.teacher, "teacher checkpoint", CHECKPOINT_NAME)
    head_path = None
    if need_head:
        _require(args, "poshead")
        head_path = _checkpoint_path(args.poshead, "position head checkpoint", POSHEAD_NAME)
    return teacher_path, head_path


def cmd_distill(args, cfg, out: Path) -> None:
    _require(args, "data")
    config = train_config(cfg)
    weights = config.weights
    teacher = head = None
    inputs = {"data": args.data}
    if weights.any_distillation:
        teacher_path, head_path = _teacher_and_head(args, cfg, weights.enable_pi and weights.pi_target == "teacher")
        inputs.update(teacher=args.teacher, poshead=args.poshead if head_path else None)
    write_manifest(out, "distill", args, cfg, inputs)
    data = _load_data(args.data, cfg["data"]["num_classes"])
    if weights.any_distillation:
        teacher, _ = load_model(teacher_path)
        if head_path is not None:
            head, _ = load_head(head_path)
    if weights.enable_pi and head is None:
        raise CliError("the analytic position target still needs --poshead for the head width")
    _, record = distill_student(config, data, teacher, head, spec=model_spec(cfg, "student"), out_dir=out,
                                resume=args.resume)
    print(f"student final miou {record.final_miou:.4f}")


def cmd_evaluate(args, cfg, out: Path) -> None:
    _require(args, "checkpoint", "data")
    ckpt_path = _checkpoint_path(args.checkpoint, "checkpoint", CHECKPOINT_NAME)
    split_file = Path(args.data) / (TRAIN_FILE if args.split == "train" else VAL_FILE)
    if not split_file.exists():
        raise CliError(f"dataset file not found: {split_file}")
    write_manifest(out, "evaluate", args, cfg, {"checkpoint": args.checkpoint, "data": args.data,
                                                "split": args.split})
    model, _ = load_model(ckpt_path)
    n_data = read_spec(split_file).num_classes
    if n_data != model.spec.num_classes:
        raise CliError(f"checkpoint predicts {model.spec.num_classes} classes but {split_file} "
                       f"has num_classes={n_data}")
    images, labels = stack_samples(load_dataset(split_file))
    images, labels = torch.from_numpy(images), torch.from_numpy(labels)
    report = evaluate(model, images, labels, num_classes=n_data)
    (out / METRICS_NAME).write_text(report.to_json() + "\n")
    if args.plot:
        _plot_curve(ckpt_path.parent / LOG_NAME, out / "training_curve.png")
    print(f"miou {report.miou:.6f}")


def cmd_ablate(args, cfg, out: Path) -> None:
    _require(args, "data")
    config = train_config(cfg)
    teacher_path, head_path = _teacher_and_head(args, cfg, True)
    n_seeds = int(cfg["ablate"]["seeds"])
    seeds = [config.seed + k for k in range(n_seeds)]
    write_manifest(out, "ablate", args, cfg, {"data": args.data, "teacher": args.teacher,
                                              "poshead": args.poshead})
    data = _load_data(args.data, cfg["data"]["num_classes"])
    teacher, _ = load_model(teacher_path)
    head, _ = load_head(head_path)
    workers = _num_workers(len(PRESETS) * n_seeds)
    table, _ = run_ablation(config, data, teacher, head, seeds=seeds, out_dir=out / "runs", workers=workers)
    (out / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2) + "\n")
    (out / "ablation.txt").write_text(table.render())
    if n_seeds > 1:
        per_seed = out / "per_seed"
        per_seed.mkdir(exist_ok=True)
        for s, t in table.per_seed.items():
            (per_seed / f"seed{s}.json").write_text(json.dumps(t.to_dict(), indent=2) + "\n")
            (per_seed / f"seed{s}.txt").write_text(t.render())
    if args.plot:
        _plot_ablation(table, out / "ablation.png")
    print(table.render(), end="")


def _num_workers(jobs: int) -> int:
    raw = os.environ.get("IDD_NUM_WORKERS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise CliError(f"IDD_NUM_WORKERS must be an integer, got {raw!r}") from None
    return max(1, min(cap, jobs))


def _plot_curve(log_path: Path, dest: Path) -> None:
    if not log_path.exists():
        log.warning("no training log next to the checkpoint (%s); skipping plot", log_path)
        return
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    evals = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([e["iteration"] for e in evals], [e["miou"] for e in evals], marker="o")
    ax.set_xlabel("iteration")
    ax.set_ylabel("val mIoU")
    fig.tight_layout()
    fig.savefig(dest, dpi=120)
    plt.close(fig)


def _plot_ablation(table, dest: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(table.index, [table.row(n)["miou"] for n in table.index])
    ax.set_ylabel("val mIoU")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(dest, dpi=120)
    plt.close(fig)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "pretrain-poshead": cmd_pretrain_poshead,
    "distill": cmd_distill,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


# argument parsing --------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON config file; missing keys take built-in defaults")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="dataset seed for gen-data, training seed otherwise")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="deterministic kernels, one thread (default: on)")
    p.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idd", description="Inter-class distance distillation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic train/val datasets")
    _add_common(p)

    for name, helptext in (("train-teacher", "train the teacher on cross-entropy"),
                           ("distill", "train a student with the composite loss")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--data", help="directory written by gen-data")
        p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
        if name == "distill":
            p.add_argument("--teacher", help="teacher checkpoint file or run directory")
            p.add_argument("--poshead", help="position head checkpoint file or run directory")
            p.add_argument("--preset", help=f"loss preset: {', '.join(PRESETS)}")

    p = sub.add_parser("pretrain-poshead", help="fit the teacher position head on frozen features")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--teacher")

    p = sub.add_parser("evaluate", help="write a metrics report for a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--plot", action="store_true", help="also plot the run's validation curve")

    p = sub.add_parser("ablate", help="train every preset and write the ablation table")
    _add_common(p)
    p.add_argument("--data")
    p.add_argument("--teacher")
    p.add_argument("--poshead")
    p.add_argument("--seeds", type=int, help="number of consecutive seeds starting at the training seed")
    p.add_argument("--plot", action="store_true")

    p = sub.add_parser("rerun", help="replay a run from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the manifest's own)")
    p.add_argument("--force", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _run(args, cfg: dict) -> None:
    out = Path(args.out)
    _prepare_out(out, args.force, getattr(args, "resume", False))
    HANDLERS[args.command](args, cfg, out)


def _rerun(args) -> None:
    path = Path(args.manifest)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise CliError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    command = manifest.get("command")
    if command not in HANDLERS:
        raise CliError(f"{path}: unknown command {command!r}")
    cfg = _merge(default_config(), manifest["config"])
    _validate(cfg)
    inputs = manifest.get("inputs", {})
    ns = argparse.Namespace(command=command, config=manifest.get("config_path"),
                            out=args.out or manifest["out"], force=args.force, resume=False, plot=False,
                            data=inputs.get("data"), teacher=inputs.get("teacher"),
                            poshead=inputs.get("poshead"), checkpoint=inputs.get("checkpoint"),
                            split=inputs.get("split", "val"))
    _run(ns, cfg)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "rerun":
            _rerun(args)
        else:
            _run(args, resolve_config(args))
    except (CliError, DatasetFormatError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"idd {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
