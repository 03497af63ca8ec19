"""Semantic-FPN style decoder producing full-resolution class logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid
from .nn import Conv2d, ConvBNReLU, Module
from .tensor import ConfigError, ShapeError, Tensor


@dataclass
class DecoderConfig:
    pyramid_channels: int = 64
    num_classes: int = 2

    def __post_init__(self):
        if self.pyramid_channels <= 0:
            raise ConfigError("pyramid_channels must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")


class FPNDecoder(Module):
    """Lateral 1x1 convs, top-down sum, 3x3 heads, sum at stride 4, 1x1 classifier."""

    def __init__(self, rng: np.random.Generator, in_channels: list[int], config: DecoderConfig | None = None):
        super().__init__()
        self.config = cfg = config or DecoderConfig()
        P = cfg.pyramid_channels
        self.laterals = [Conv2d(rng, c, P, 1) for c in in_channels]
        self.heads = [ConvBNReLU(rng, P, P, 3) for _ in in_channels]
        self.classifier = Conv2d(rng, P, cfg.num_classes, 1)

    def merged_levels(self, pyr: FeaturePyramid) -> list[Tensor]:
        """Top-down pathway; returns merged maps ordered fine (c2) to coarse (c5)."""
        lat = [conv(f) for conv, f in zip(self.laterals, pyr)]
        merged = [lat[-1]]
        for f in reversed(lat[:-1]):
            up = merged[-1]
            merged.append(T.add(f, T.bilinear_resize(up, *f.shape[2:])))
        return merged[::-1]

    def stride4_maps(self, pyr: FeaturePyramid) -> list[Tensor]:
        h4, w4 = pyr.c2.shape[2:]
        return [T.bilinear_resize(head(m), h4, w4) for head, m in zip(self.heads, self.merged_levels(pyr))]

    def forward(self, pyr: FeaturePyramid, out_hw: tuple[int, int]) -> Tensor:
        H, W = out_hw
        h4, w4 = pyr.c2.shape[2:]
        if (h4 * 4, w4 * 4) != (H, W):
            raise ShapeError(f"stride-4 level {h4}x{w4} does not match output {H}x{W}")
        prev = (h4, w4)
        for name, f in zip(pyr._fields[1:], pyr[1:]):
            h, w = f.shape[2:]
            if (h, w) not in (prev, (prev[0] // 2, prev[1] // 2)):
                raise ShapeError(f"{name} extent {(h, w)} breaks the stride contract after {prev}")
            prev = (h, w)
        maps = self.stride4_maps(pyr)
        fused = maps[0]
        for m in maps[1:]:
            fused = T.add(fused, m)
        return T.bilinear_resize(self.classifier(fused), H, W)


def decode(decoder: FPNDecoder, pyr: FeaturePyramid, out_hw: tuple[int, int]) -> Tensor:
    return decoder(pyr, out_hw)
