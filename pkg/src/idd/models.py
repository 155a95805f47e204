"""Tiny teacher / student segmentation networks.

Both networks share one layout: a stack of 3x3 conv-BN-ReLU blocks, the last
of which is the exposed feature layer, followed by a 1x1 classifier. The
teacher additionally runs a small pyramid-pooling context block in front of
its last block. Features and logits are bilinearly upsampled to the input
resolution inside ``forward`` so every loss works at label resolution.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelSpec:
    role: str = "student"
    channel_widths: Tuple[int, ...] = (8, 16, 16)
    num_classes: int = 6
    feature_dim: int = 16
    strides: Tuple[int, ...] = (2, 2, 1)
    pyramid_bins: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "channel_widths", tuple(self.channel_widths))
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(self, "pyramid_bins", tuple(self.pyramid_bins))

    @property
    def downsample(self) -> int:
        f = 1
        for s in self.strides:
            f *= s
        return f

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def default_teacher_spec(num_classes: int = 6) -> ModelSpec:
    return ModelSpec(role="teacher", channel_widths=(16, 32, 32, 64, 64, 64),
                     num_classes=num_classes, feature_dim=64,
                     strides=(1, 2, 1, 2, 1, 1), pyramid_bins=(1, 2, 4))


def default_student_spec(num_classes: int = 6) -> ModelSpec:
    return ModelSpec(role="student", channel_widths=(8, 16, 16), num_classes=num_classes,
                     feature_dim=16, strides=(2, 2, 1))


class ForwardOutput(NamedTuple):
    features: torch.Tensor  # B x C x H x W, pre-logit
    logits: torch.Tensor  # B x N x H x W


def conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class PyramidPooling(nn.Module):
    """Average-pool to a few grid sizes, reduce with 1x1 convs, upsample and concat."""

    def __init__(self, channels: int, bins: Tuple[int, ...]):
        super().__init__()
        self.bins = bins
        reduced = max(channels // 4, 1)
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(channels, reduced, 1, bias=False), nn.BatchNorm2d(reduced), nn.ReLU(inplace=True))
            for _ in bins
        ])
        self.out_channels = channels + reduced * len(bins)

    def forward(self, x):
        h, w = x.shape[-2:]
        outs = [x]
        for b, stage in zip(self.bins, self.stages):
            y = stage(F.adaptive_avg_pool2d(x, b))
            outs.append(F.interpolate(y, size=(h, w), mode="bilinear", align_corners=False))
        return torch.cat(outs, dim=1)


class SegNet(nn.Module):

    def __init__(self, spec: ModelSpec):
        super().__init__()
        widths = spec.channel_widths
        if len(widths) < 1:
            raise ValueError("channel_widths must have at least one entry")
        if len(spec.strides) != len(widths):
            raise ValueError(f"strides has {len(spec.strides)} entries but channel_widths has {len(widths)}")
        if spec.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {spec.num_classes}")
        self.spec = spec

        blocks = []
        cin = 3
        for w, s in zip(widths[:-1], spec.strides[:-1]):
            blocks.append(conv_block(cin, w, s))
            cin = w
        self.backbone = nn.Sequential(*blocks)
        if spec.pyramid_bins:
            self.context = PyramidPooling(cin, spec.pyramid_bins)
            cin = self.context.out_channels
        else:
            self.context = nn.Identity()
        self.feature_layer = conv_block(cin, widths[-1], spec.strides[-1])
        self.classifier = nn.Conv2d(widths[-1], spec.num_classes, 1)

        built = self.feature_layer[0].out_channels
        if built != spec.feature_dim:
            raise ValueError(f"feature layer produces {built} channels but spec declares feature_dim={spec.feature_dim}")

    def forward_lowres(self, image: torch.Tensor) -> ForwardOutput:
        """Features and logits at the network's internal stride, before upsampling."""
        feat = self.feature_layer(self.context(self.backbone(image)))
        return ForwardOutput(feat, self.classifier(feat))

    @staticmethod
    def upsample(out: ForwardOutput, size) -> ForwardOutput:
        size = tuple(size)
        if tuple(out.features.shape[-2:]) == size:
            return out
        return ForwardOutput(F.interpolate(out.features, size=size, mode="bilinear", align_corners=False),
                             F.interpolate(out.logits, size=size, mode="bilinear", align_corners=False))

    def forward(self, image: torch.Tensor) -> ForwardOutput:
        return self.upsample(self.forward_lowres(image), image.shape[-2:])


def build_model(spec: ModelSpec, init_seed: int) -> SegNet:
    """Construct a model whose initial parameters depend only on ``init_seed``."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(init_seed)
        model = SegNet(spec)
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
    finally:
        torch.random.set_rng_state(gen_state)
    model.init_seed = init_seed
    return model


class ParamCount(NamedTuple):
    trainable: int
    frozen: int

    @property
    def total(self) -> int:
        return self.trainable + self.frozen


def param_breakdown(model: nn.Module) -> ParamCount:
    trainable = frozen = 0
    for p in model.parameters():
        if p.requires_grad:
            trainable += p.numel()
        else:
            frozen += p.numel()
    return ParamCount(trainable, frozen)


def param_count(model: nn.Module) -> int:
    """Number of trainable scalars."""
    return param_breakdown(model).trainable


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def is_frozen(model: nn.Module) -> bool:
    return not model.training and not any(p.requires_grad for p in model.parameters())
