"""Supervised teacher training, student distillation, poly LR and the ablation runner."""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .checkpoint import load_checkpoint, restore_momentum, save_head, save_model
from .data_synth import Sample, stack_samples
from .losses import PRESETS, TERMS, LossBreakdown, LossWeights, cross_entropy_target_loss, total_loss
from .metrics import compute_iou, confusion_for, mean_interclass_distance, param_count_total
from .models import ForwardOutput, ModelSpec, SegNet, build_model, default_student_spec, default_teacher_spec, freeze, is_frozen
from .position import PositionMasks, build_position_head

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.iddc"
HEAD_CHECKPOINT_NAME = "student_head.iddc"
LOG_NAME = "log.jsonl"
SUMMARY_NAME = "summary.json"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 4000
    batch_size: int = 8
    base_lr: float = 0.01
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    eval_every: int = 500
    weights: LossWeights = field(default_factory=LossWeights)
    deterministic: bool = True

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ValueError(f"total_iters must be > 0, got {self.total_iters}")
        if not self.base_lr > 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.lr_power < 0:
            raise ValueError(f"lr_power must be >= 0, got {self.lr_power}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights.from_dict(d["weights"])
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RunRecord:
    role: str
    config: dict
    evals: List[dict] = field(default_factory=list)
    checkpoint: Optional[str] = None
    wall_seconds: float = 0.0
    counters: Dict[str, int] = field(default_factory=dict)

    @property
    def final_miou(self) -> float:
        return self.evals[-1]["miou"] if self.evals else float("nan")

    def metric_sequence(self) -> List[dict]:
        """Everything in the eval log, i.e. all recorded values except wall-clock time."""
        return [dict(e) for e in self.evals]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainData:
    """Dense tensors for both splits; labels stay uint8 until batching."""
    train_images: torch.Tensor
    train_labels: torch.Tensor
    val_images: torch.Tensor
    val_labels: torch.Tensor
    num_classes: int

    @classmethod
    def from_samples(cls, train: Sequence[Sample], val: Sequence[Sample], num_classes: int) -> "TrainData":
        ti, tl = stack_samples(train)
        vi, vl = stack_samples(val)
        return cls(torch.from_numpy(ti), torch.from_numpy(tl), torch.from_numpy(vi),
                   torch.from_numpy(vl), num_classes)


def poly_lr(iteration: int, config: TrainConfig) -> float:
    if iteration < 0 or iteration > config.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {config.total_iters}]")
    return config.base_lr * (1.0 - iteration / config.total_iters) ** config.lr_power


def batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    """Sample indices for one step; depends only on (seed, iteration) so resumed runs replay exactly."""
    rng = np.random.default_rng([seed, iteration])
    return rng.choice(n, size=min(batch_size, n), replace=False)


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Deterministic kernels and a single intra-op thread (serial reduction order)."""
    if not enabled:
        yield
        return
    prev_det = torch.are_deterministic_algorithms_enabled()
    prev_threads = torch.get_num_threads()
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev_det)
        torch.set_num_threads(prev_threads)


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class TeacherCache:
    """Frozen-teacher outputs for every training image, computed once without gradient.

    Low-resolution features and logits are stored and upsampled per batch, so a
    cached batch equals a fresh teacher forward pass on the same images.
    Position-head masks are stored at full resolution.
    """

    def __init__(self, teacher, images: torch.Tensor, head=None, batch_size: int = 50):
        self.size = tuple(images.shape[-2:])
        feats, logits, hor, ver = [], [], [], []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                low = teacher.forward_lowres(images[i:i + batch_size])
                feats.append(low.features)
                logits.append(low.logits)
                if head is not None:
                    m = head(teacher.upsample(low, self.size).features)
                    hor.append(m.p_hor)
                    ver.append(m.p_ver)
        self.features = torch.cat(feats)
        self.logits = torch.cat(logits)
        self.masks = PositionMasks(torch.cat(hor), torch.cat(ver)) if head is not None else None

    def batch(self, idx: torch.Tensor):
        out = SegNet.upsample(ForwardOutput(self.features[idx], self.logits[idx]), self.size)
        masks = PositionMasks(self.masks.p_hor[idx], self.masks.p_ver[idx]) if self.masks is not None else None
        return out, masks


def _write_log(path: Path, evals: List[dict]) -> None:
    with open(path, "w") as f:
        for e in evals:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def _fit(model, config: TrainConfig, data: TrainData, role: str, *, teacher: Optional[TeacherCache] = None,
         heads=None, weights: Optional[LossWeights] = None, out_dir=None, resume: bool = False,
         stop_after: Optional[int] = None) -> RunRecord:
    """Shared SGD loop. ``weights=None`` trains on the target cross-entropy alone."""
    if data.num_classes != model.spec.num_classes:
        raise ValueError(f"model has {model.spec.num_classes} classes, dataset has {data.num_classes}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    student_head = heads[1] if heads is not None else None

    named = [(f"model.{n}", p) for n, p in model.named_parameters()]
    if student_head is not None:
        named += [(f"head.{n}", p) for n, p in student_head.named_parameters()]
    optimizer = torch.optim.SGD([p for _, p in named], lr=config.base_lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)

    record = RunRecord(role=role, config=config.to_dict())
    start = 0
    ckpt_path = out_dir / CHECKPOINT_NAME if out_dir is not None else None
    if resume and ckpt_path is not None and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path)
        if ckpt["extra"].get("config") != record.config:
            raise ValueError(f"{ckpt_path}: checkpoint was written with a different configuration")
        own = set(model.state_dict())
        model.load_state_dict({k: v for k, v in ckpt["tensors"].items() if k in own})
        if student_head is not None:
            student_head.load_state_dict({k[len("head."):]: v for k, v in ckpt["tensors"].items()
                                          if k.startswith("head.")})
        restore_momentum(optimizer, named, ckpt["tensors"])
        start = ckpt["iteration"]
        record.evals = ckpt["extra"].get("evals", [])
        record.counters = ckpt["extra"].get("counters", {})
        log.info("resumed %s from iteration %d", role, start)

    counters = Counter(record.counters)
    sums = dict.fromkeys(LossBreakdown.FIELDS, 0.0)
    n_steps = 0
    n_train = len(data.train_images)
    t0 = time.time()
    model.train()
    if student_head is not None:
        student_head.train()
    for it in range(start, config.total_iters):
        lr = poly_lr(it, config)
        for g in optimizer.param_groups:
            g["lr"] = lr
        idx = torch.from_numpy(batch_indices(config.seed, it, n_train, config.batch_size))
        x = data.train_images[idx]
        y = data.train_labels[idx].long()

        out_s = model(x)
        if weights is None:
            l_tar = cross_entropy_target_loss(out_s.logits, y, counters=counters)
            zero = l_tar.new_zeros(())
            br = LossBreakdown(l_tar, zero, zero, zero, zero, l_tar)
        else:
            out_t, t_masks = None, None
            if weights.any_distillation:
                out_t, t_masks = teacher.batch(idx)
            br = total_loss(out_t, out_s, y, heads, weights, teacher_masks=t_masks)
            counters.update(br.counters)

        if not torch.isfinite(br.total):
            snapshot = {"role": role, "iteration": it, "lr": lr, "losses": br.as_floats(),
                        "batch_indices": idx.tolist(), "config": record.config}
            if out_dir is not None:
                (out_dir / "diverged.json").write_text(json.dumps(snapshot, indent=2))
                save_model(out_dir / "diverged.iddc", model, it, {"snapshot": snapshot})
            raise TrainingDiverged(f"{role}: non-finite loss at iteration {it}: {br.as_floats()}")

        optimizer.zero_grad(set_to_none=True)
        br.total.backward()
        optimizer.step()

        for k, v in br.as_floats().items():
            sums[k] += v
        n_steps += 1
        done = it + 1
        if done % config.eval_every == 0 or done == config.total_iters:
            cm = confusion_for(model, data.val_images, data.val_labels, data.num_classes)
            iou = compute_iou(cm)
            record.evals.append({
                "iteration": done,
                "lr": lr,
                "miou": iou["miou"],
                "per_class_iou": iou["per_class_iou"],
                "loss_means": {k: v / n_steps for k, v in sums.items()},
                "counters": dict(sorted(counters.items())),
            })
            sums = dict.fromkeys(LossBreakdown.FIELDS, 0.0)
            n_steps = 0
            log.info("%s iter %d miou %.4f loss %.4f", role, done, iou["miou"],
                     record.evals[-1]["loss_means"]["total"])
            if out_dir is not None:
                extra = {"config": record.config, "evals": record.evals, "counters": dict(counters),
                         "role": role}
                head_tensors = None
                if student_head is not None:
                    head_tensors = {f"head.{k}": v for k, v in student_head.state_dict().items()}
                save_model(ckpt_path, model, done, extra, optimizer=optimizer, named_params=named,
                           extra_tensors=head_tensors)
                if student_head is not None:
                    save_head(out_dir / HEAD_CHECKPOINT_NAME, student_head, done)
                _write_log(out_dir / LOG_NAME, record.evals)
            if stop_after is not None and done >= stop_after and done < config.total_iters:
                break

    record.counters = dict(sorted(counters.items()))
    record.wall_seconds = time.time() - t0
    if out_dir is not None:
        record.checkpoint = str(ckpt_path)
        (out_dir / SUMMARY_NAME).write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True))
    return record


def train_supervised(spec: ModelSpec, config: TrainConfig, data: TrainData, out_dir=None,
                     resume: bool = False, stop_after: Optional[int] = None, role: str = "supervised"):
    """Train ``spec`` on the target cross-entropy alone; returns ``(frozen model, RunRecord)``."""
    with deterministic_mode(config.deterministic):
        model = build_model(spec, config.seed)
        record = _fit(model, config, data, role, out_dir=out_dir, resume=resume, stop_after=stop_after)
    return freeze(model), record


def train_teacher(config: TrainConfig, data: TrainData, spec: Optional[ModelSpec] = None, out_dir=None,
                  resume: bool = False, stop_after: Optional[int] = None):
    spec = spec or default_teacher_spec(data.num_classes)
    return train_supervised(spec, config, data, out_dir, resume, stop_after, role="teacher")


def distill_student(config: TrainConfig, data: TrainData, teacher, teacher_pos_head=None,
                    spec: Optional[ModelSpec] = None, out_dir=None, resume: bool = False,
                    stop_after: Optional[int] = None):
    """Train a student on the composite loss; returns ``(frozen student, RunRecord)``."""
    weights = config.weights
    if teacher is not None and not is_frozen(teacher):
        raise ValueError("teacher must be frozen before distillation")
    if weights.any_distillation and teacher is None:
        raise ValueError("distillation terms enabled but no teacher was given")
    if weights.enable_pi:
        if teacher_pos_head is None:
            raise ValueError("position term enabled but no pretrained teacher position head was given")
        if not teacher_pos_head.frozen:
            raise ValueError("teacher position head must be frozen")
    spec = spec or default_student_spec(data.num_classes)
    with deterministic_mode(config.deterministic):
        student = build_model(spec, config.seed)
        heads = None
        if weights.enable_pi:
            hidden = teacher_pos_head.hidden if teacher_pos_head is not None else 16
            heads = (teacher_pos_head, build_position_head(spec.feature_dim, hidden, init_seed=config.seed + 1))
        cache = None
        if weights.any_distillation:
            cache = TeacherCache(teacher, data.train_images,
                                 teacher_pos_head if weights.enable_pi and weights.pi_target == "teacher" else None)
        record = _fit(student, config, data, "student", teacher=cache, heads=heads, weights=weights,
                      out_dir=out_dir, resume=resume, stop_after=stop_after)
    return freeze(student), record


def _flags(weights: LossWeights) -> dict:
    return {t: bool(weights.enabled[t]) for t in TERMS}


ABLATION_COLUMNS = ("skd", "cw", "id", "pi", "miou", "params")


@dataclass
class AblationTable:
    """Rows in table order: the teacher first, then one row per student preset."""
    index: List[str]
    data: List[list]
    per_seed: Dict[int, "AblationTable"] = field(default_factory=dict)
    columns: tuple = ABLATION_COLUMNS

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "index": list(self.index), "data": [list(r) for r in self.data]}

    def row(self, name: str) -> dict:
        return dict(zip(self.columns, self.data[self.index.index(name)]))

    def render(self) -> str:
        head = ["row"] + list(self.columns)
        body = []
        for name, r in zip(self.index, self.data):
            cells = [name]
            for c, v in zip(self.columns, r):
                if c in TERMS:
                    cells.append("x" if v else "")
                elif c == "miou":
                    cells.append(repr(v))
                else:
                    cells.append(str(v))
            body.append(cells)
        widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        lines = [fmt.format(*head), fmt.format(*["-" * w for w in widths])]
        lines += [fmt.format(*cells) for cells in body]
        return "\n".join(lines) + "\n"


def _run_row(args):
    name, config, data, teacher, head, out_dir = args
    student, record = distill_student(config, data, teacher, head if config.weights.enable_pi else None,
                                      out_dir=out_dir)
    return name, config.seed, record.final_miou, param_count_total(student), record


def run_ablation(base_config: TrainConfig, data: TrainData, teacher, head, seeds: Sequence[int] = (0,),
                 out_dir=None, workers: int = 1, teacher_miou: Optional[float] = None):
    """Train every preset for every seed; returns ``(AblationTable, {(preset, seed): RunRecord})``.

    Row mIoU is the mean over seeds of the final validation mIoU.
    """
    jobs = []
    for name in PRESETS:
        weights = LossWeights.preset(name, **{k: v for k, v in base_config.weights.to_dict().items()
                                              if not k.startswith("enable_")})
        for seed in seeds:
            cfg = base_config.replace(weights=weights, seed=seed)
            row_dir = Path(out_dir) / f"{name}_seed{seed}" if out_dir is not None else None
            jobs.append((name, cfg, data, teacher, head, row_dir))

    if workers > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn")) as ex:
            results = list(ex.map(_run_row, jobs))
    else:
        results = [_run_row(j) for j in jobs]

    records = {(name, seed): rec for name, seed, _, _, rec in results}
    if teacher_miou is None:
        cm = confusion_for(teacher, data.val_images, data.val_labels, data.num_classes)
        teacher_miou = compute_iou(cm)["miou"]
    teacher_params = param_count_total(teacher)

    def table_for(selected_seeds):
        index = ["teacher"]
        rows = [[False, False, False, False, teacher_miou, teacher_params]]
        for name in PRESETS:
            vals = [m for n, s, m, _, _ in results if n == name and s in selected_seeds]
            params = next(p for n, _, _, p, _ in results if n == name)
            flags = _flags(LossWeights.preset(name))
            index.append(name)
            rows.append([flags[t] for t in TERMS] + [float(np.mean(vals)), params])
        return AblationTable(index, rows)

    table = table_for(set(seeds))
    table.per_seed = {s: table_for({s}) for s in seeds}
    return table, records
