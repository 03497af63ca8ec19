"""Spatial self-attention, the contextual pyramid and channel-wise attention.

Shapes follow the NCHW convention. ``C`` is the width of the incoming deep
feature; the block first compresses it to ``D = C // compression`` channels
with one shared 1x1 convolution, and both branches work at width ``D``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvReLUBN, Module, Parameter
from .tensor import ConfigError, Tensor

SCALES = (1, 2, 4)
GAMMA_INIT = 0.05
PATHWAY_WEIGHT_INIT = 1.0


@dataclass(frozen=True)
class AttentionParams:
    """Read-only snapshot of the learned attention scalars."""

    gamma_s: tuple[float, ...]
    gamma_c: float | None
    w: tuple[float, ...]
    scales: tuple[int, ...]
    compression: int


class SelfAttention(Module):
    """``f + gamma * softmax_rows(K Q^T) V`` with K, Q, V from 1x1 convolutions.

    Row ``i`` of the affinity belongs to output position ``i``; its weights
    over all positions sum to one. The last affinity is kept on
    ``self.affinity`` (detached) for inspection and export.
    """

    def __init__(self, rng: np.random.Generator, channels: int, gamma: float = GAMMA_INIT):
        super().__init__()
        self.key = Conv2d(rng, channels, channels, 1)
        self.query = Conv2d(rng, channels, channels, 1)
        self.value = Conv2d(rng, channels, channels, 1)
        self.gamma = Parameter(np.array(gamma))
        self.affinity: np.ndarray | None = None

    def tokens(self, conv: Conv2d, f: Tensor) -> Tensor:
        B, D, H, W = f.shape
        return T.transpose(T.reshape(conv(f), (B, D, H * W)), (0, 2, 1))

    def attention_map(self, f: Tensor) -> Tensor:
        k, q = self.tokens(self.key, f), self.tokens(self.query, f)
        return T.softmax_rows(T.matmul(k, T.transpose(q, (0, 2, 1))))

    def forward(self, f: Tensor) -> Tensor:
        B, D, H, W = f.shape
        aff = self.attention_map(f)
        self.affinity = aff.data
        out = T.matmul(aff, self.tokens(self.value, f))
        out = T.reshape(T.transpose(out, (0, 2, 1)), (B, D, H, W))
        return T.add(f, T.scalar_mul(self.gamma, out))


class PyramidPathway(Module):
    """One scale of the pyramid: pool, conv, attend, upsample, conv.

    The residual adds the pooled input to the self-attention output, and
    the post-convolution runs after upsampling back to full resolution.
    """

    def __init__(self, rng: np.random.Generator, channels: int, scale: int, weight: float = PATHWAY_WEIGHT_INIT):
        super().__init__()
        self.scale = scale
        self.pre = ConvReLUBN(rng, channels, channels)
        self.attention = SelfAttention(rng, channels)
        self.post = ConvReLUBN(rng, channels, channels)
        self.weight = Parameter(np.array(weight))

    def pooled(self, x: Tensor) -> Tensor:
        return x if self.scale == 1 else T.avg_pool2d(x, self.scale, self.scale)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[2:]
        xs = self.pooled(x)
        z = T.add(xs, self.attention(self.pre(xs)))
        return self.post(T.bilinear_resize(z, H, W))


class CPABlock(Module):
    """Contextual pyramid attention plus channel-wise attention.

    ``channel=False`` and ``scales=(1,)`` together give the plain
    single-scale self-attention variant used in ablations.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: int,
        compression: int = 4,
        scales: tuple[int, ...] = SCALES,
        channel: bool = True,
    ):
        super().__init__()
        if compression <= 0 or in_channels % compression:
            raise ConfigError(f"compression {compression} must divide {in_channels} input channels")
        if not scales or any(s <= 0 for s in scales):
            raise ConfigError(f"invalid scale set {scales}")
        self.in_channels = in_channels
        self.compression = compression
        self.channels = in_channels // compression
        self.scales = tuple(scales)
        self.proj = Conv2d(rng, in_channels, self.channels, 1)
        self.pathways = [PyramidPathway(rng, self.channels, s) for s in self.scales]
        self.gamma_c = Parameter(np.array(GAMMA_INIT)) if channel else None
        self.channel_affinity: np.ndarray | None = None

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(
            gamma_s=tuple(p.attention.gamma.item() for p in self.pathways),
            gamma_c=None if self.gamma_c is None else self.gamma_c.item(),
            w=tuple(p.weight.item() for p in self.pathways),
            scales=self.scales,
            compression=self.compression,
        )

    def check_input(self, f: Tensor) -> None:
        B, C, H, W = f.shape
        if C != self.in_channels:
            raise ConfigError(f"CPA block expects {self.in_channels} channels, got {C}")
        top = max(self.scales)
        if H % top or W % top:
            raise ConfigError(f"feature extent {H}x{W} is not divisible by the largest scale {top}")

    def contextual(self, x: Tensor) -> Tensor:
        """Weighted pathway sum on an already projected feature, scales in order."""
        out = None
        for path in self.pathways:
            term = T.scalar_mul(path.weight, path(x))
            out = term if out is None else T.add(out, term)
        return out

    def channel(self, x: Tensor) -> Tensor:
        B, D, H, W = x.shape
        tokens = T.reshape(x, (B, D, H * W))
        aff = T.softmax_rows(T.matmul(tokens, T.transpose(tokens, (0, 2, 1))))
        self.channel_affinity = aff.data
        out = T.reshape(T.matmul(aff, tokens), (B, D, H, W))
        return T.add(x, T.scalar_mul(self.gamma_c, out))

    def contextual_attention(self, f: Tensor) -> Tensor:
        self.check_input(f)
        return self.contextual(self.proj(f))

    def channel_attention(self, f: Tensor) -> Tensor:
        if self.gamma_c is None:
            raise ConfigError("this block was built without the channel-wise branch")
        self.check_input(f)
        return self.channel(self.proj(f))

    def forward(self, f: Tensor) -> Tensor:
        self.check_input(f)
        x = self.proj(f)
        out = self.contextual(x)
        if self.gamma_c is not None:
            out = T.add(out, self.channel(x))
        return out

    def pathway(self, scale: int) -> PyramidPathway:
        for p in self.pathways:
            if p.scale == scale:
                return p
        raise ConfigError(f"scale {scale} is not in {self.scales}")


def export_affinity(block: CPABlock, f: Tensor, scale: int, query_index: int | tuple[int, int]) -> np.ndarray:
    """One row of a pathway's spatial affinity as an 8-bit raster.

    ``query_index`` is a flat index or a (row, col) position on the pooled
    grid of that pathway. The row is min-max scaled to [0, 255]; a constant
    row maps to all zeros.
    """
    path = block.pathway(scale)
    block.check_input(f)
    with T.no_grad():
        xs = path.pooled(block.proj(f))
        aff = path.attention.attention_map(path.pre(xs)).data[0]
    h, w = xs.shape[2:]
    if isinstance(query_index, tuple):
        r, c = query_index
        if not (0 <= r < h and 0 <= c < w):
            raise IndexError(f"query {query_index} outside the {h}x{w} grid at scale {scale}")
        query_index = r * w + c
    if not 0 <= query_index < h * w:
        raise IndexError(f"query index {query_index} outside [0, {h * w}) at scale {scale}")
    row = aff[query_index].astype(np.float64).reshape(h, w)
    lo, hi = row.min(), row.max()
    if hi <= lo:
        return np.zeros((h, w), dtype=np.uint8)
    return np.round((row - lo) / (hi - lo) * 255.0).astype(np.uint8)
