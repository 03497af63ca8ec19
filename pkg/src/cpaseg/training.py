"""Loss, Adam, augmentation, the training loop and checkpoint files."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Sample
from .metrics import MetricAccumulator
from .model import SegmentationModel, to_input
from .nn import Parameter
from .tensor import NumericError, Tensor

log = logging.getLogger(__name__)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return T.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float = 1e-5,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One in-place Adam update with bias correction; ``None`` grads count as zero."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params) or len(grads) != len(params):
        raise T.ShapeError("optimizer state, grads and params disagree in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise T.ShapeError(f"gradient {g.shape} / state {m.shape} do not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: Sequence[Parameter], lr=1e-5, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugConfig:
    rot90: bool = True
    hflip: bool = True
    vflip: bool = True
    brightness_delta: float = 0.2
    contrast_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.contrast_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"contrast_range {self.contrast_range} must be positive and ordered")
        if not 0 <= self.brightness_delta < 1:
            raise ValueError("brightness_delta must lie in [0, 1)")


def apply_geometric(arr: np.ndarray, k: int, hflip: bool, vflip: bool) -> np.ndarray:
    out = np.rot90(arr, k, axes=(0, 1))
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment(sample: Sample, rng: np.random.Generator, config: AugConfig | None = None) -> Sample:
    """Random rot90/flips on image and mask, brightness/contrast on the image only.

    Photometric change, on intensities scaled to [0, 1]:
    ``x -> clip(contrast * x + brightness, 0, 1)``.
    """
    config = config or AugConfig()
    h, w = sample.mask.shape
    # draws happen unconditionally so the stream does not depend on the flags
    k = int(rng.integers(4))
    hf, vf = bool(rng.integers(2)), bool(rng.integers(2))
    brightness = rng.uniform(-config.brightness_delta, config.brightness_delta)
    contrast = rng.uniform(*config.contrast_range)
    k = k if config.rot90 else 0
    if k % 2 and h != w:
        raise ValueError(f"rot90 needs a square crop, got {h}x{w}")
    geo = dict(k=k, hflip=hf and config.hflip, vflip=vf and config.vflip)
    image = apply_geometric(sample.image, **geo)
    mask = apply_geometric(sample.mask, **geo)
    x = image.astype(np.float64) / 255.0
    x = np.clip(contrast * x + brightness, 0.0, 1.0)
    image = np.round(x * 255.0).astype(np.uint8)
    return Sample(image=image, mask=mask, region=sample.region, index=sample.index)


def random_crop(sample: Sample, rng: np.random.Generator, size: int) -> Sample:
    h, w = sample.mask.shape
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than sample {h}x{w}")
    r = int(rng.integers(h - size + 1))
    c = int(rng.integers(w - size + 1))
    return Sample(
        sample.image[r : r + size, c : c + size], sample.mask[r : r + size, c : c + size], sample.region, sample.index
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 35
    batch_size: int = 4
    crop_size: int = 64
    seed: int = 0
    max_steps: int | None = None
    aug: AugConfig | None = field(default_factory=AugConfig)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")


FULL_PRESET = dict(lr=1e-5, epochs=35, crop_size=500)
TOY_PRESET = dict(lr=1e-3, epochs=35, crop_size=64)


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    loss: float
    train_iou: float | None
    val_iou: float | None


class TrainingAborted(RuntimeError):
    pass


def batch_arrays(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]).astype(np.int64)


def evaluate(model: SegmentationModel, samples: Sequence[Sample], batch_size: int = 8) -> MetricAccumulator:
    was_training = model.training
    model.eval()
    acc = MetricAccumulator()
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        probs = model.predict_proba(np.stack([s.image for s in chunk]))
        pred = probs.argmax(axis=1).astype(np.uint8)
        for p, s in zip(pred, chunk):
            acc.accumulate(p, s.mask, s.region)
    model.train(was_training)
    return acc


def train(
    model: SegmentationModel,
    dataset: Sequence[Sample],
    config: TrainConfig,
    validation: Sequence[Sample] = (),
    step_callback: Callable[[int, float], None] | None = None,
    track_train_iou: bool = False,
) -> tuple[list[EpochRecord], list[float]]:
    """Run the epoch loop; returns per-epoch records and the per-step loss curve.

    Sample order, crops and augmentation all come from one generator seeded
    with ``config.seed``.
    """
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), config.lr, config.betas, config.eps)
    model.train()
    records: list[EpochRecord] = []
    losses: list[float] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for b in range(0, len(order), config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            batch = []
            for i in order[b : b + config.batch_size]:
                s = dataset[i]
                if s.mask.shape != (config.crop_size, config.crop_size):
                    s = random_crop(s, rng, config.crop_size)
                if config.aug is not None:
                    s = augment(s, rng, config.aug)
                batch.append(s)
            images, labels = batch_arrays(batch)
            opt.zero_grad()
            try:
                loss = cross_entropy_loss(model(to_input(images)), labels)
            except NumericError as exc:
                raise TrainingAborted(f"non-finite values in batch {b // config.batch_size} of epoch {epoch}") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingAborted(f"NaN loss in batch {b // config.batch_size} of epoch {epoch}")
            loss.backward()
            opt.step()
            step += 1
            losses.append(value)
            epoch_losses.append(value)
            if step_callback is not None:
                step_callback(step, value)
        if not epoch_losses:
            break
        train_iou = evaluate(model, dataset).iou() if track_train_iou else None
        val_iou = evaluate(model, validation).iou() if validation else None
        records.append(EpochRecord(epoch, step, float(np.mean(epoch_losses)), train_iou, val_iou))
        log.info("epoch %d step %d loss %.4f val_iou %s", epoch, step, records[-1].loss, val_iou)
    model.eval()
    return records, losses


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"CPASEGCK"
FORMAT_VERSION = 1
_DTYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def save_checkpoint(path, model: SegmentationModel) -> None:
    """Write parameters and buffers; layout documented in the README."""
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(model.config.digest())
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _DTYPES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


class CheckpointError(ValueError):
    pass


def read_checkpoint(path) -> tuple[bytes, dict[str, np.ndarray]]:
    raw = memoryview(Path(path).read_bytes())
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = raw[pos : pos + n]
        pos += n
        return out

    if bytes(take(8)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = bytes(take(32))
    (count,) = struct.unpack("<I", take(4))
    codes = {v: k for k, v in _DTYPES.items()}
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = codes[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        state[name] = np.frombuffer(take(size), dtype=dtype).reshape(shape).copy()
    return digest, state


def load_checkpoint(path, model: SegmentationModel) -> SegmentationModel:
    digest, state = read_checkpoint(path)
    if digest != model.config.digest():
        raise CheckpointError(f"{path}: checkpoint was written for a different model configuration")
    model.load_state_dict(state)
    model.eval()
    return model
