"""Small feature extractors that map an input batch to (batch, d_bbf) features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import (
    BatchNorm2d,
    Conv2d,
    GlobalAvgPool,
    InitSpec,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    Sequential,
)
from .tensor import ShapeError, Tensor

BACKBONE_KINDS = ("mlp", "mini_conv", "resnet_tiny")


@dataclass
class BackboneConfig:
    kind: str = "mlp"
    # (C, H, W) for conv kinds, (dim,) for mlp
    input_shape: tuple[int, ...] = (2,)
    stage_widths: list[int] = field(default_factory=lambda: [64, 64])
    d_bbf: int | None = None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.stage_widths = list(self.stage_widths)
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}; expected one of {BACKBONE_KINDS}")
        if not self.stage_widths or any(int(w) <= 0 for w in self.stage_widths):
            raise ValueError(f"invalid stage widths {self.stage_widths}: need a nonempty list of positive ints")
        if self.kind == "mlp":
            if len(self.input_shape) != 1:
                raise ValueError(f"mlp backbone expects a flat input shape, got {self.input_shape}")
            if self.d_bbf is None:
                self.d_bbf = self.stage_widths[-1]
        else:
            if len(self.input_shape) != 3:
                raise ValueError(f"{self.kind} expects (C, H, W) input, got {self.input_shape}")
            if self.d_bbf is None:
                self.d_bbf = self.stage_widths[-1]
            elif self.d_bbf != self.stage_widths[-1]:
                raise ValueError(
                    f"invalid stage widths {self.stage_widths}: last width must equal d_bbf={self.d_bbf}"
                )
            min_side = 2 ** (len(self.stage_widths) - 1)
            if min(self.input_shape[1:]) < min_side:
                raise ValueError(
                    f"invalid stage widths {self.stage_widths}: {len(self.stage_widths)} stages need "
                    f"spatial size >= {min_side}, got {self.input_shape[1:]}"
                )
        if self.d_bbf <= 0:
            raise ValueError("d_bbf must be positive")


class Backbone(Module):
    config: BackboneConfig

    def forward(self, x: Tensor) -> Tensor:
        out = self.body(x)
        if out.shape[1:] != (self.config.d_bbf,):
            raise ShapeError("backbone", f"produced {out.shape}, expected (N, {self.config.d_bbf})")
        return out


class MLPBackbone(Backbone):
    """Hidden linear+ReLU layers followed by a final linear+ReLU to d_bbf."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, scheme: str):
        self.config = config
        layers: list[Module] = []
        d = config.input_shape[0]
        for w in config.stage_widths:
            layers += [Linear(d, w, rng, scheme), ReLU()]
            d = w
        layers += [Linear(d, config.d_bbf, rng, scheme), ReLU()]
        self.body = Sequential(*layers)


class MiniConvBackbone(Backbone):
    """conv3x3-BN-ReLU stages with 2x2 max pooling between them, then global average pooling."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator, scheme: str):
        self.config = config
        layers: list[Module] = []
        c = config.input_shape[0]
        for i, w in enumerate(config.stage_widths):
            if i > 0:
                layers.append(MaxPool2d(2))
            layers += [Conv2d(c, w, 3, rng, padding=1, bias=False, scheme=scheme), BatchNorm2d(w), ReLU()]
            c = w
        layers.append(GlobalAvgPool())
        self.body = Sequential(*layers)


class ResidualBlock(Module):
    """Two conv3x3-BN layers plus a shortcut; the shortcut is the identity when shapes allow."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator, scheme: str):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, padding=1, bias=False, scheme=scheme)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1, bias=False, scheme=scheme)
        self.bn2 = BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, rng, stride=stride, bias=False, scheme=scheme)
            self.proj_bn = BatchNorm2d(c_out)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        shortcut = x if self.proj is None else self.proj_bn(self.proj(x))
        return T.relu(h + shortcut)


class ResNetTinyBackbone(Backbone):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator, scheme: str):
        self.config = config
        widths = config.stage_widths
        c = config.input_shape[0]
        layers: list[Module] = [
            Conv2d(c, widths[0], 3, rng, padding=1, bias=False, scheme=scheme),
            BatchNorm2d(widths[0]),
            ReLU(),
        ]
        c = widths[0]
        for i, w in enumerate(widths):
            layers.append(ResidualBlock(c, w, 1 if i == 0 else 2, rng, scheme))
            c = w
        layers.append(GlobalAvgPool())
        self.body = Sequential(*layers)


def build_backbone(config: BackboneConfig, init: InitSpec | None = None, rng: np.random.Generator | None = None) -> Backbone:
    init = init or InitSpec()
    rng = rng if rng is not None else init.rng()
    cls = {"mlp": MLPBackbone, "mini_conv": MiniConvBackbone, "resnet_tiny": ResNetTinyBackbone}[config.kind]
    return cls(config, rng, init.scheme)
