"""Class tokens, the inter-class distance graph and the distance-matching loss.

A class token is the mean feature vector over every pixel carrying that
ground-truth label (pooled over the whole batch). The graph holds the pairwise
Euclidean distances between tokens; the loss matches student edge lengths to
teacher edge lengths with a symmetric squared error, which only compares
scalars, so teacher and student feature widths may differ.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Dict, Optional, Set

import torch
import torch.nn.functional as F

from .data_synth import IGNORE


@dataclass
class ClassTokenSet:
    tokens: Dict[int, torch.Tensor]
    pixel_counts: Dict[int, int]

    @property
    def present(self) -> Set[int]:
        return set(self.tokens)

    @property
    def dim(self) -> Optional[int]:
        for t in self.tokens.values():
            return t.shape[-1]
        return None

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class DistanceGraph:
    edges: torch.Tensor  # N x N; NaN marks pairs with an absent endpoint
    presence: torch.Tensor  # bool, N

    @property
    def num_classes(self) -> int:
        return self.presence.numel()

    @property
    def defined(self) -> torch.Tensor:
        """Boolean N x N mask of off-diagonal pairs with both endpoints present."""
        p = self.presence
        mask = p[:, None] & p[None, :]
        mask.fill_diagonal_(False)
        return mask

    @property
    def degenerate(self) -> bool:
        return int(self.presence.sum()) < 2


def _match_labels(labels: torch.Tensor, size) -> torch.Tensor:
    if tuple(labels.shape[-2:]) == tuple(size):
        return labels
    # nearest-neighbour keeps label values (including IGNORE) intact
    lab = labels.unsqueeze(1).float()
    return F.interpolate(lab, size=tuple(size), mode="nearest").squeeze(1).to(labels.dtype)


def compute_class_tokens(features: torch.Tensor, labels: torch.Tensor,
                         ignore_index: int = IGNORE) -> ClassTokenSet:
    """Mean feature per ground-truth class.

    ``features`` is ``C x H x W`` or ``B x C x H x W``; ``labels`` is ``H x W`` or
    ``B x H x W``. Pixels from all batch elements are pooled. Classes with no
    labelled pixel are absent from the result.
    """
    if features.dim() == 3:
        features = features.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    if features.dim() != 4 or labels.dim() != 3 or features.shape[0] != labels.shape[0]:
        raise ValueError(f"incompatible shapes: features {tuple(features.shape)}, labels {tuple(labels.shape)}")
    if labels.shape[-2:] != features.shape[-2:]:
        # labels at a finer grid than features: resample labels, never features
        if labels.shape[-2] < features.shape[-2] or labels.shape[-1] < features.shape[-1]:
            raise ValueError(f"label map {tuple(labels.shape[-2:])} smaller than feature map "
                             f"{tuple(features.shape[-2:])}")
        labels = _match_labels(labels, features.shape[-2:])

    C = features.shape[1]
    flat_feat = features.permute(1, 0, 2, 3).reshape(C, -1)
    flat_lab = labels.reshape(-1).long()
    valid = flat_lab != ignore_index
    classes = torch.unique(flat_lab[valid]).tolist()
    if not classes:
        return ClassTokenSet({}, {})

    cls_t = torch.tensor(classes, device=flat_lab.device)
    onehot = (flat_lab[None, :] == cls_t[:, None]).to(features.dtype)  # K x P
    counts = onehot.sum(dim=1)
    sums = onehot @ flat_feat.t()  # K x C
    means = sums / counts[:, None]
    tokens = {c: means[k] for k, c in enumerate(classes)}
    pixel_counts = {c: int(counts[k].item()) for k, c in enumerate(classes)}
    return ClassTokenSet(tokens, pixel_counts)


def compute_distance_graph(tokens: ClassTokenSet, num_classes: int) -> DistanceGraph:
    """Pairwise Euclidean distances between present class tokens."""
    present = sorted(tokens.tokens)
    dims = {t.shape for t in tokens.tokens.values()}
    if len(dims) > 1:
        raise ValueError(f"tokens have mixed dimensions: {sorted(d[-1] for d in dims)}")
    if present and (present[0] < 0 or present[-1] >= num_classes):
        raise ValueError(f"token class ids {present} outside [0, {num_classes})")

    presence = torch.zeros(num_classes, dtype=torch.bool)
    presence[present] = True
    if not present:
        edges = torch.full((num_classes, num_classes), float("nan"))
        edges.fill_diagonal_(0.0)
        return DistanceGraph(edges, presence)

    stack = torch.stack([tokens.tokens[c] for c in present])
    diff = stack[:, None, :] - stack[None, :, :]
    d2 = (diff * diff).sum(dim=-1)
    # sqrt has an infinite slope at 0; route coincident pairs through a constant
    pos = d2 > 0
    dist = torch.where(pos, torch.sqrt(torch.where(pos, d2, torch.ones_like(d2))), torch.zeros_like(d2))

    edges = torch.full((num_classes, num_classes), float("nan"), dtype=stack.dtype, device=stack.device)
    idx = torch.tensor(present, device=stack.device)
    edges = edges.index_put((idx[:, None].expand(-1, len(present)), idx[None, :].expand(len(present), -1)), dist)
    diag = torch.arange(num_classes, device=stack.device)
    edges = edges.index_put((diag, diag), torch.zeros(num_classes, dtype=stack.dtype, device=stack.device))
    return DistanceGraph(edges, presence.to(stack.device))


def interclass_distance_loss(teacher: DistanceGraph, student: DistanceGraph,
                             counters: Optional[Counter] = None) -> torch.Tensor:
    """Half the symmetric double sum of squared edge differences over defined pairs.

    The teacher graph is detached. A graph with fewer than two present classes
    has no pairs and yields 0 (counted under ``degenerate_graph``).
    """
    if teacher.num_classes != student.num_classes:
        raise ValueError(f"graphs have different class counts: {teacher.num_classes} vs {student.num_classes}")
    if not torch.equal(teacher.presence.cpu(), student.presence.cpu()):
        raise ValueError("teacher and student graphs disagree on present classes; "
                         "both must be built from the same label map")
    if student.degenerate:
        if counters is not None:
            counters["degenerate_graph"] += 1
        return student.edges.new_zeros(())
    mask = student.defined
    diff = teacher.edges.detach()[mask] - student.edges[mask]
    return 0.5 * (diff * diff).sum()


def graph_from_features(features: torch.Tensor, labels: torch.Tensor, num_classes: int,
                        ignore_index: int = IGNORE) -> DistanceGraph:
    return compute_distance_graph(compute_class_tokens(features, labels, ignore_index), num_classes)


def graph_to_dict(graph: DistanceGraph) -> dict:
    """Export as plain lists; undefined edges become ``None``."""
    edges = graph.edges.detach().cpu().double()
    rows = [[None if torch.isnan(v) else float(v) for v in row] for row in edges]
    return {"edges": rows, "presence": [bool(p) for p in graph.presence.cpu()]}
