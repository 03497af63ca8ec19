"""Small residual encoder with dilated final stages (output stride 8)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, Module
from .tensor import ConfigError, Tensor


@dataclass
class BackboneConfig:
    stage_widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    stage_depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    dilation_plan: list[int] = field(default_factory=lambda: [1, 1, 2, 4])
    use_se: bool = False
    se_reduction: int = 16

    def __post_init__(self):
        if not (len(self.stage_widths) == len(self.stage_depths) == len(self.dilation_plan) == 4):
            raise ConfigError("backbone needs exactly four stages")
        for w in self.stage_widths:
            if w % 4:
                raise ConfigError(f"stage width {w} is not divisible by 4")
            if self.use_se and w % self.se_reduction:
                raise ConfigError(f"stage width {w} is not divisible by SE reduction {self.se_reduction}")
        if any(d < 1 for d in self.stage_depths + self.dilation_plan):
            raise ConfigError("depths and dilations must be positive")

    @property
    def strides(self) -> list[int]:
        # stages 2-4 halve resolution unless their dilation replaces the stride
        return [1] + [1 if d > 1 else 2 for d in self.dilation_plan[1:]]

    @property
    def output_strides(self) -> list[int]:
        out, s = [], 4
        for st in self.strides:
            s *= st
            out.append(s)
        return out


class FeaturePyramid(NamedTuple):
    c2: Tensor
    c3: Tensor
    c4: Tensor
    c5: Tensor


class SEBlock(Module):
    """Squeeze-and-excitation gate: pool, bottleneck, sigmoid, rescale."""

    def __init__(self, rng: np.random.Generator, channels: int, reduction: int = 16):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"{channels} channels not divisible by SE reduction {reduction}")
        self.squeeze = Conv2d(rng, channels, channels // reduction, 1)
        self.excite = Conv2d(rng, channels // reduction, channels, 1)
        self.gate: np.ndarray | None = None

    def forward(self, f: Tensor) -> Tensor:
        g = T.sigmoid(self.excite(T.relu(self.squeeze(T.global_avg_pool(f)))))
        self.gate = g.data
        return T.mul(f, g)


class BasicBlock(Module):
    def __init__(self, rng, in_ch: int, out_ch: int, stride: int, dilation: int, se_reduction: int | None):
        super().__init__()
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=stride, dilation=dilation, bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, dilation=dilation, bias=False)
        self.bn2 = BatchNorm2d(out_ch)
        self.se = SEBlock(rng, out_ch, se_reduction) if se_reduction else None
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = Conv2d(rng, in_ch, out_ch, 1, stride=stride, bias=False)
            self.shortcut_bn = BatchNorm2d(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        if self.se is not None:
            out = self.se(out)
        skip = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return T.relu(T.add(out, skip))


class Backbone(Module):
    """Stem (7x7 stride-2 conv, 3x3 stride-2 max pool) and four residual stages."""

    def __init__(self, rng: np.random.Generator, config: BackboneConfig | None = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        self.stem = ConvBNReLU(rng, 3, cfg.stage_widths[0], k=7, stride=2)
        self.stages = []
        in_ch = cfg.stage_widths[0]
        se = cfg.se_reduction if cfg.use_se else None
        for width, depth, stride, dil in zip(cfg.stage_widths, cfg.stage_depths, cfg.strides, cfg.dilation_plan):
            blocks = [BasicBlock(rng, in_ch, width, stride, dil, se)]
            blocks += [BasicBlock(rng, width, width, 1, dil, se) for _ in range(depth - 1)]
            self.stages.append(Stage(blocks))
            in_ch = width

    @property
    def widths(self) -> list[int]:
        return list(self.config.stage_widths)

    def stem_forward(self, image: Tensor) -> Tensor:
        return T.max_pool2d(self.stem(image), 3, 2, padding=1)

    def forward(self, image: Tensor) -> FeaturePyramid:
        H, W = image.shape[2:]
        if H % 32 or W % 32:
            raise ConfigError(f"input extent {H}x{W} must be divisible by 32")
        x = self.stem_forward(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return FeaturePyramid(*feats)


class Stage(Module):
    def __init__(self, blocks: list[BasicBlock]):
        super().__init__()
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


def encode(backbone: Backbone, image: Tensor) -> FeaturePyramid:
    return backbone(image)
