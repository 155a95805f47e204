"""Confusion matrix, IoU / mIoU, model size and the inter-class distance diagnostic."""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import List, Optional

import numpy as np
import torch

from .data_synth import IGNORE
from .interclass import compute_class_tokens


class ConfusionMatrix:
    """Pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.ignored = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum()) + self.ignored

    def accumulate(self, predictions, labels, ignore_index: int = IGNORE) -> "ConfusionMatrix":
        pred = np.asarray(predictions).astype(np.int64).reshape(-1)
        gt = np.asarray(labels).astype(np.int64).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"predictions {np.shape(predictions)} and labels {np.shape(labels)} differ")
        n = self.num_classes
        if pred.size and (pred.min() < 0 or pred.max() >= n):
            raise ValueError(f"prediction values must lie in [0, {n}), got range [{pred.min()}, {pred.max()}]")
        keep = gt != ignore_index
        g = gt[keep]
        if g.size and (g.min() < 0 or g.max() >= n):
            raise ValueError(f"label values must lie in [0, {n}) or equal {ignore_index}")
        self.counts += np.bincount(n * g + pred[keep], minlength=n * n).reshape(n, n)
        self.ignored += int((~keep).sum())
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot add confusion matrices with different class counts")
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        out.ignored = self.ignored + other.ignored
        return out

    def __eq__(self, other) -> bool:
        return (isinstance(other, ConfusionMatrix) and self.ignored == other.ignored
                and np.array_equal(self.counts, other.counts))


def accumulate_confusion(cm: ConfusionMatrix, predictions, labels) -> ConfusionMatrix:
    return cm.accumulate(predictions, labels)


def compute_iou(cm: ConfusionMatrix) -> dict:
    """Per-class IoU (``None`` where a class is absent from both GT and predictions) and mIoU."""
    c = cm.counts
    inter = np.diag(c).astype(np.float64)
    union = c.sum(axis=1) + c.sum(axis=0) - np.diag(c)
    per_class: List[Optional[float]] = [
        float(inter[k] / union[k]) if union[k] > 0 else None for k in range(cm.num_classes)
    ]
    defined = [v for v in per_class if v is not None]
    miou = float(np.mean(defined)) if defined else float("nan")
    return {"per_class_iou": per_class, "miou": miou}


@dataclass
class MetricsReport:
    per_class_iou: List[Optional[float]]
    miou: float
    params: int
    mean_interclass_distance: Optional[float]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _batches(images, labels, batch_size):
    for i in range(0, len(images), batch_size):
        yield torch.as_tensor(images[i:i + batch_size]), torch.as_tensor(labels[i:i + batch_size])


@torch.no_grad()
def confusion_for(model, images, labels, num_classes: int, batch_size: int = 50) -> ConfusionMatrix:
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(num_classes)
    for x, y in _batches(images, labels, batch_size):
        pred = model(x).logits.argmax(dim=1)
        cm.accumulate(pred.numpy(), y.numpy())
    model.train(was_training)
    return cm


@torch.no_grad()
def mean_interclass_distance(model, images, labels, batch_size: int = 50) -> Optional[float]:
    """Average defined token distance over images, each image's tokens first
    rescaled to unit mean norm. ``None`` when no image has two present classes.
    """
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for x, y in _batches(images, labels, batch_size):
        feats = model(x).features.double()
        for f, lab in zip(feats, y):
            tokens = compute_class_tokens(f, lab)
            if len(tokens) < 2:
                continue
            stack = torch.stack([tokens.tokens[c] for c in sorted(tokens.tokens)])
            scale = stack.norm(dim=1).mean()
            if scale > 0:
                stack = stack / scale
            d = torch.cdist(stack[None], stack[None])[0]
            iu = torch.triu_indices(len(stack), len(stack), offset=1)
            total += float(d[iu[0], iu[1]].sum())
            count += iu.shape[1]
    model.train(was_training)
    return total / count if count else None


def evaluate(model, images, labels, num_classes: Optional[int] = None,
             with_distance: bool = True) -> MetricsReport:
    n = model.spec.num_classes
    if num_classes is not None and num_classes != n:
        raise ValueError(f"model predicts {n} classes but the dataset has {num_classes}")
    iou = compute_iou(confusion_for(model, images, labels, n))
    dist = mean_interclass_distance(model, images, labels) if with_distance else None
    return MetricsReport(iou["per_class_iou"], iou["miou"], param_count_total(model), dist)


def param_count_total(model) -> int:
    """Parameter count regardless of frozen state (a frozen teacher still has its parameters)."""
    return sum(p.numel() for p in model.parameters())
