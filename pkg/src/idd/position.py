"""Coordinate masks, the position-information head and the row/column position loss."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import is_frozen

log = logging.getLogger(__name__)


@dataclass
class PositionMasks:
    """Horizontal and vertical coordinate masks, ``H x W`` or ``B x H x W``."""
    p_hor: torch.Tensor
    p_ver: torch.Tensor

    def __post_init__(self):
        if self.p_hor.shape != self.p_ver.shape:
            raise ValueError(f"p_hor {tuple(self.p_hor.shape)} and p_ver {tuple(self.p_ver.shape)} differ in shape")

    @property
    def shape(self):
        return self.p_hor.shape

    def detach(self) -> "PositionMasks":
        return PositionMasks(self.p_hor.detach(), self.p_ver.detach())

    def scaled(self, sx: float, sy: float) -> "PositionMasks":
        return PositionMasks(self.p_hor * sx, self.p_ver * sy)


def make_coordinate_targets(height: int, width: int, dtype=torch.float32) -> PositionMasks:
    """1-indexed column index in ``p_hor``, 1-indexed row index in ``p_ver``."""
    if height < 1 or width < 1:
        raise ValueError(f"mask size must be positive, got {height}x{width}")
    cols = torch.arange(1, width + 1, dtype=dtype)
    rows = torch.arange(1, height + 1, dtype=dtype)
    return PositionMasks(cols.expand(height, width).clone(), rows[:, None].expand(height, width).clone())


class PositionHead(nn.Module):
    """Two 3x3 convs mapping a feature map to (p_hor, p_ver)."""

    def __init__(self, in_channels: int, hidden: int = 16):
        super().__init__()
        self.in_channels = in_channels
        self.hidden = hidden
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 2, 3, padding=1)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def forward(self, features: torch.Tensor) -> PositionMasks:
        if features.dim() != 4 or features.shape[1] != self.in_channels:
            raise ValueError(f"position head expects B x {self.in_channels} x H x W features, "
                             f"got {tuple(features.shape)}")
        out = self.conv2(F.relu(self.conv1(features)))
        return PositionMasks(out[:, 0], out[:, 1])


def build_position_head(in_channels: int, hidden: int = 16, init_seed: int = 0) -> PositionHead:
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(init_seed)
        head = PositionHead(in_channels, hidden)
    finally:
        torch.random.set_rng_state(state)
    head.init_seed = init_seed
    return head


def position_head_forward(head: PositionHead, features: torch.Tensor) -> PositionMasks:
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    masks = head(features)
    if squeeze:
        masks = PositionMasks(masks.p_hor[0], masks.p_ver[0])
    return masks


def _normalize(x: torch.Tensor, dim: int, eps: float) -> Tuple[torch.Tensor, int]:
    norm = torch.linalg.vector_norm(x, dim=dim, keepdim=True)
    n_zero = int((norm == 0).sum())
    return x / (norm + eps), n_zero


def _safe_norm(x: torch.Tensor, dim: int) -> torch.Tensor:
    sq = (x * x).sum(dim=dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def position_info_terms(teacher_masks: PositionMasks, student_masks: PositionMasks,
                        eps: float = 1e-12, counters: Optional[Counter] = None):
    """Return ``(l_hor, l_ver)``: summed distances between unit-normalised rows of
    ``p_hor`` and between unit-normalised columns of ``p_ver``.

    Batched inputs give per-image values of shape ``(B,)``.
    """
    if teacher_masks.shape != student_masks.shape:
        raise ValueError(f"mask shapes differ: {tuple(teacher_masks.shape)} vs {tuple(student_masks.shape)}")
    # rows of p_hor vary along the last axis, columns of p_ver along the second-to-last
    th, z1 = _normalize(teacher_masks.p_hor, -1, eps)
    sh, z2 = _normalize(student_masks.p_hor, -1, eps)
    tv, z3 = _normalize(teacher_masks.p_ver, -2, eps)
    sv, z4 = _normalize(student_masks.p_ver, -2, eps)
    zeros = z1 + z2 + z3 + z4
    if zeros:
        log.debug("position loss: %d zero-norm rows/columns", zeros)
        if counters is not None:
            counters["zero_vector"] += zeros
    # The published vertical term pairs the teacher's vertical mask with the
    # student's horizontal one; read as a typo, both terms compare like with like.
    l_hor = _safe_norm(th - sh, dim=-1).sum(dim=-1)
    l_ver = _safe_norm(tv - sv, dim=-2).sum(dim=-1)
    return l_hor, l_ver


def position_info_loss(teacher_masks: PositionMasks, student_masks: PositionMasks,
                       eps: float = 1e-12, counters: Optional[Counter] = None) -> torch.Tensor:
    """Half the horizontal term plus half the vertical term, averaged over a batch.

    Not detached on either side, so the value is symmetric in its arguments;
    ``total_loss`` passes detached teacher masks.
    """
    l_hor, l_ver = position_info_terms(teacher_masks, student_masks, eps, counters)
    loss = 0.5 * l_hor + 0.5 * l_ver
    return loss.mean() if loss.dim() else loss


def mask_correlation(pred: PositionMasks, target: PositionMasks) -> float:
    """Mean Pearson correlation between predicted and target masks, per image and axis."""
    def corr(a, b):
        a = a.reshape(a.shape[0], -1).double()
        b = b.reshape(b.shape[0], -1).double()
        a = a - a.mean(dim=1, keepdim=True)
        b = b - b.mean(dim=1, keepdim=True)
        denom = a.norm(dim=1) * b.norm(dim=1)
        return (a * b).sum(dim=1) / denom.clamp_min(1e-30)
    ph, pv = pred.p_hor, pred.p_ver
    th = target.p_hor.expand_as(ph)
    tv = target.p_ver.expand_as(pv)
    if ph.dim() == 2:
        ph, pv, th, tv = ph[None], pv[None], th[None], tv[None]
    return float(torch.cat([corr(ph, th), corr(pv, tv)]).mean())


@torch.no_grad()
def _features(model, images: torch.Tensor, batch_size: int = 32) -> List[torch.Tensor]:
    return [model(images[i:i + batch_size]).features for i in range(0, len(images), batch_size)]


def pretrain_position_head(feature_source: nn.Module, images: torch.Tensor, iters: int = 1000,
                           lr: float = 3e-3, batch_size: int = 8, seed: int = 0, hidden: int = 16,
                           val_images: Optional[torch.Tensor] = None, log_every: int = 100):
    """Fit a head on frozen features to regress coordinate masks rescaled to [0, 1].

    Returns ``(head, history)``; the head comes back frozen. ``history`` holds
    the per-iteration training MSE and, when ``val_images`` is given, the
    validation MSE and mask correlation before and after training.
    """
    if not is_frozen(feature_source):
        raise ValueError("feature source must be frozen (eval mode, no trainable parameters)")
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    H, W = images.shape[-2:]
    C = feature_source.spec.feature_dim
    target = make_coordinate_targets(H, W).scaled(1.0 / W, 1.0 / H)
    head = build_position_head(C, hidden, init_seed=seed)

    def val_stats():
        if val_images is None:
            return None
        mse, preds_h, preds_v = 0.0, [], []
        with torch.no_grad():
            for f in _features(feature_source, val_images):
                m = head(f)
                preds_h.append(m.p_hor)
                preds_v.append(m.p_ver)
            pred = PositionMasks(torch.cat(preds_h), torch.cat(preds_v))
            mse = float(_mask_mse(pred, target))
        return {"mse": mse, "correlation": mask_correlation(pred, target)}

    history = {"train_mse": [], "val_initial": val_stats()}
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    n = len(images)
    for it in range(iters):
        idx = torch.from_numpy(rng.choice(n, size=min(batch_size, n), replace=False))
        with torch.no_grad():
            feats = feature_source(images[idx]).features
        loss = _mask_mse(head(feats), target)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"position head pretraining diverged at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history["train_mse"].append(float(loss.detach()))
    history["val_final"] = val_stats()
    for p in head.parameters():
        p.requires_grad_(False)
    head.eval()
    return head, history


def _mask_mse(pred: PositionMasks, target: PositionMasks) -> torch.Tensor:
    return 0.5 * (F.mse_loss(pred.p_hor, target.p_hor.expand_as(pred.p_hor))
                  + F.mse_loss(pred.p_ver, target.p_ver.expand_as(pred.p_ver)))
