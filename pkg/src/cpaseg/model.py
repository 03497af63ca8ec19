"""Encoder, optional attention block and decoder assembled into one network."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import SCALES, CPABlock
from .backbone import Backbone, BackboneConfig, FeaturePyramid
from .decoder import DecoderConfig, FPNDecoder
from .nn import Module
from .tensor import ConfigError, Tensor

VARIANTS = ("baseline", "sa", "cpa")
BACKBONES = {
    "tiny": dict(stage_widths=[16, 32, 64, 128], stage_depths=[1, 1, 1, 1]),
    "small": dict(stage_widths=[32, 64, 128, 256], stage_depths=[2, 2, 2, 2]),
}

# per-channel statistics of the synthetic generator's RGB output
INPUT_MEAN = np.array([0.42, 0.43, 0.40])
INPUT_STD = np.array([0.20, 0.20, 0.20])


@dataclass
class ModelConfig:
    variant: str = "cpa"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    compression: int = 4
    scales: tuple[int, ...] = SCALES

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")

    @classmethod
    def build(cls, variant: str = "cpa", backbone: str = "tiny", se: bool = False, **kw) -> ModelConfig:
        if backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
        return cls(variant=variant, backbone=BackboneConfig(**BACKBONES[backbone], use_se=se), **kw)

    def describe(self) -> str:
        """Canonical text form; its digest ties checkpoints to a configuration."""
        d = asdict(self)
        lines = []
        for key in sorted(d):
            val = d[key]
            if isinstance(val, dict):
                lines += [f"{key}.{k}={val[k]}" for k in sorted(val)]
            else:
                lines.append(f"{key}={val}")
        return "\n".join(lines)

    def digest(self) -> bytes:
        return hashlib.sha256(self.describe().encode()).digest()


class SegmentationModel(Module):
    """Backbone, attention on the deepest feature (per variant), FPN decoder.

    Inputs whose extent is not a multiple of 32 are reflect-padded on the
    bottom/right and the logits cropped back.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(rng, cfg.backbone)
        widths = self.backbone.widths
        self.attention = None
        if cfg.variant == "cpa":
            self.attention = CPABlock(rng, widths[-1], cfg.compression, cfg.scales, channel=True)
        elif cfg.variant == "sa":
            self.attention = CPABlock(rng, widths[-1], cfg.compression, (1,), channel=False)
        deep = widths[-1] if self.attention is None else self.attention.channels
        self.decoder = FPNDecoder(rng, widths[:-1] + [deep], cfg.decoder)

    def features(self, x: Tensor) -> FeaturePyramid:
        pyr = self.backbone(x)
        if self.attention is not None:
            pyr = pyr._replace(c5=self.attention(pyr.c5))
        return pyr

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[2:]
        ph, pw = -H % 32, -W % 32
        if ph or pw:
            x = Tensor(np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect"))
        logits = self.decoder(self.features(x), (H + ph, W + pw))
        if ph or pw:
            logits = T.crop2d(logits, 0, 0, H, W)
        return logits

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        """Class probabilities (B, K, H, W) for uint8 images (B, H, W, 3), no grad."""
        with T.no_grad():
            logits = self(to_input(images)).data.astype(np.float64)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)


def to_input(images: np.ndarray) -> Tensor:
    """Normalize uint8 (B, H, W, 3) or (H, W, 3) rasters into an NCHW tensor."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    x = (images.astype(np.float64) / 255.0 - INPUT_MEAN) / INPUT_STD
    return Tensor(x.transpose(0, 3, 1, 2))
