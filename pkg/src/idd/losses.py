"""Target cross-entropy, structured (pixel + pair) KD, channel-wise KD and the composite loss."""
from __future__ import annotations

import dataclasses
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from .data_synth import IGNORE
from .interclass import graph_from_features, interclass_distance_loss
from .position import PositionHead, PositionMasks, make_coordinate_targets, position_info_loss

TERMS = ("skd", "cw", "id", "pi")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 3.0  # channel-wise KD
    lambda2: float = 0.01  # inter-class distance (raw term is a sum over ordered class pairs)
    lambda3: float = 0.05  # position information (raw term is a sum over rows and columns)
    tau_pixel: float = 1.0
    tau_channel: float = 4.0
    enable_skd: bool = True
    enable_cw: bool = True
    enable_id: bool = True
    enable_pi: bool = True
    affinity_grid: int = 8
    pi_target: str = "teacher"  # or "analytic"

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("tau_pixel", "tau_channel"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.pi_target not in ("teacher", "analytic"):
            raise ValueError(f"pi_target must be 'teacher' or 'analytic', got {self.pi_target!r}")
        if self.affinity_grid < 1:
            raise ValueError(f"affinity_grid must be >= 1, got {self.affinity_grid}")

    @property
    def enabled(self) -> dict:
        return {t: getattr(self, f"enable_{t}") for t in TERMS}

    @property
    def any_distillation(self) -> bool:
        return any(self.enabled.values())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)

    @classmethod
    def preset(cls, name: str, **overrides) -> "LossWeights":
        try:
            terms = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
        flags = {f"enable_{t}": t in terms for t in TERMS}
        flags.update(overrides)
        return cls(**flags)


# ablation rows, in table order
PRESETS = {
    "baseline": (),
    "skd": ("skd",),
    "skd-cw": ("skd", "cw"),
    "skd-cw-id": ("skd", "cw", "id"),
    "skd-cw-pi": ("skd", "cw", "pi"),
    "full-idd": ("skd", "cw", "id", "pi"),
}


@dataclass
class LossBreakdown:
    l_tar: torch.Tensor
    l_skd: torch.Tensor
    l_cw: torch.Tensor
    l_id: torch.Tensor
    l_pi: torch.Tensor
    total: torch.Tensor
    counters: Counter = field(default_factory=Counter)

    FIELDS = ("l_tar", "l_skd", "l_cw", "l_id", "l_pi", "total")

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in self.FIELDS}


def combine(l_tar, l_skd, l_cw, l_id, l_pi, weights: LossWeights):
    """The one place the weighted sum is formed, so its evaluation order never varies."""
    return l_tar + l_skd + weights.lambda1 * l_cw + weights.lambda2 * l_id + weights.lambda3 * l_pi


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: teacher shape {tuple(a.shape)} != student shape {tuple(b.shape)}")


def cross_entropy_target_loss(student_logits: torch.Tensor, labels: torch.Tensor,
                              ignore_index: int = IGNORE, counters: Optional[Counter] = None) -> torch.Tensor:
    """Mean negative log-likelihood over non-ignored pixels."""
    if student_logits.dim() == 3:
        student_logits, labels = student_logits[None], labels[None]
    if student_logits.shape[0] != labels.shape[0] or student_logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError(f"logits {tuple(student_logits.shape)} do not match labels {tuple(labels.shape)}")
    labels = labels.long()
    n_valid = int((labels != ignore_index).sum())
    if n_valid == 0:
        if counters is not None:
            counters["degenerate_batch"] += 1
        return student_logits.sum() * 0.0
    total = F.cross_entropy(student_logits, labels, ignore_index=ignore_index, reduction="sum")
    return total / n_valid


def pixelwise_kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
                      tau: float = 1.0) -> torch.Tensor:
    """Per-pixel KL(teacher || student) over classes, averaged over pixels, times tau^2."""
    _check_same(teacher_logits, student_logits, "pixelwise_kd_loss")
    if teacher_logits.dim() == 3:
        teacher_logits, student_logits = teacher_logits[None], student_logits[None]
    log_p_t = F.log_softmax(teacher_logits.detach() / tau, dim=1)
    log_p_s = F.log_softmax(student_logits / tau, dim=1)
    kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=1)
    return kl.mean() * tau ** 2


def pairwise_affinity_loss(teacher_features: torch.Tensor, student_features: torch.Tensor,
                           grid: int = 8) -> torch.Tensor:
    """Mean squared difference of cosine-similarity matrices over a ``grid x grid`` pooled node set."""
    if teacher_features.dim() == 3:
        teacher_features, student_features = teacher_features[None], student_features[None]
    if teacher_features.shape[0] != student_features.shape[0] \
            or teacher_features.shape[-2:] != student_features.shape[-2:]:
        raise ValueError(f"pairwise_affinity_loss: feature grids differ, {tuple(teacher_features.shape)} "
                         f"vs {tuple(student_features.shape)}")
    H, W = student_features.shape[-2:]
    if grid > H or grid > W:
        raise ValueError(f"affinity grid {grid}x{grid} exceeds the {H}x{W} feature map")

    def affinity(x):
        x = F.adaptive_avg_pool2d(x, grid).flatten(2)  # B x C x S^2
        x = F.normalize(x, p=2, dim=1)
        return x.transpose(1, 2) @ x

    diff = affinity(teacher_features.detach()) - affinity(student_features)
    return (diff * diff).mean()


def channel_log_distribution(logits: torch.Tensor, tau: float) -> torch.Tensor:
    """``B x N x H x W`` logits to per-channel log-probabilities over the ``H*W`` positions."""
    return F.log_softmax(logits.flatten(2) / tau, dim=-1)


def channelwise_kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor,
                        tau: float = 4.0) -> torch.Tensor:
    """Per-channel spatial-softmax KL(teacher || student), averaged over channels, times tau^2."""
    _check_same(teacher_logits, student_logits, "channelwise_kd_loss")
    if teacher_logits.dim() == 3:
        teacher_logits, student_logits = teacher_logits[None], student_logits[None]
    log_p_t = channel_log_distribution(teacher_logits.detach(), tau)
    log_p_s = channel_log_distribution(student_logits, tau)
    kl = (log_p_t.exp() * (log_p_t - log_p_s)).sum(dim=-1)  # B x N
    return kl.mean() * tau ** 2


def skd_loss(out_t, out_s, weights: LossWeights) -> torch.Tensor:
    return (pixelwise_kd_loss(out_t.logits, out_s.logits, weights.tau_pixel)
            + pairwise_affinity_loss(out_t.features, out_s.features, weights.affinity_grid))


def total_loss(out_t, out_s, labels: torch.Tensor,
               heads: Optional[Tuple[PositionHead, PositionHead]], weights: LossWeights,
               teacher_masks: Optional[PositionMasks] = None) -> LossBreakdown:
    """Target cross-entropy plus every enabled distillation term.

    ``heads`` is ``(teacher_head, student_head)`` and is required exactly when the
    position term is on. ``teacher_masks`` short-circuits the teacher head with
    precomputed predictions. Disabled terms are exact zeros and are never
    computed. ``out_t`` may be ``None`` when no distillation term is enabled.
    """
    if weights.enable_pi and heads is None:
        raise ValueError("position term enabled but no position heads were supplied")
    if weights.any_distillation and out_t is None:
        raise ValueError("distillation terms enabled but no teacher outputs were supplied")
    counters: Counter = Counter()
    zero = out_s.logits.new_zeros(())
    l_tar = cross_entropy_target_loss(out_s.logits, labels, counters=counters)
    l_skd = skd_loss(out_t, out_s, weights) if weights.enable_skd else zero
    l_cw = channelwise_kd_loss(out_t.logits, out_s.logits, weights.tau_channel) if weights.enable_cw else zero
    if weights.enable_id:
        n = out_s.logits.shape[1]
        g_t = graph_from_features(out_t.features.detach(), labels, n)
        g_s = graph_from_features(out_s.features, labels, n)
        l_id = interclass_distance_loss(g_t, g_s, counters=counters)
    else:
        l_id = zero
    if weights.enable_pi:
        teacher_head, student_head = heads
        pred_s = student_head(out_s.features)
        if weights.pi_target == "analytic":
            H, W = out_s.features.shape[-2:]
            tgt = make_coordinate_targets(H, W, dtype=pred_s.p_hor.dtype)
            ref = PositionMasks(tgt.p_hor.expand_as(pred_s.p_hor), tgt.p_ver.expand_as(pred_s.p_ver))
        elif teacher_masks is not None:
            ref = teacher_masks
        else:
            with torch.no_grad():
                ref = teacher_head(out_t.features.detach())
        l_pi = position_info_loss(ref.detach(), pred_s, counters=counters)
    else:
        l_pi = zero
    total = combine(l_tar, l_skd, l_cw, l_id, l_pi, weights)
    return LossBreakdown(l_tar, l_skd, l_cw, l_id, l_pi, total, counters)
