"""Synthetic aerial scenes, netpbm raster I/O, and tile/stitch helpers.

Scenes are top-down views of rotated rectangular buildings on a textured
ground with paved distractor areas. Every building casts a shadow toward a
scene-wide sun direction, and roofs in one scene share a palette, so a
scene has the repeated structure attention is meant to exploit.

On-disk layout::

    <root>/<region>/images/<region><index>.ppm   RGB, P6, maxval 255
    <root>/<region>/gt/<region><index>.pgm       mask, P5, values 0 / 255
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

VALIDATION_INDICES = range(1, 6)
TRAINING_INDICES = range(6, 37)


class RasterFormatError(ValueError):
    """A netpbm file is malformed or carries unexpected values."""


class TilingError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    region: str = ""
    index: int = 0

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} extents differ")
        if self.mask.size and self.mask.max() > 1:
            raise ValueError("mask must be binary {0, 1}")


@dataclass
class SceneConfig:
    extent: int = 64
    # buildings per 64x64 area; scaled with the scene area
    building_count_range: tuple[int, int] = (3, 6)
    # side length ranges for the small and large building populations
    small_size_range: tuple[int, int] = (8, 14)
    large_size_range: tuple[int, int] = (15, 26)
    large_fraction: float = 0.4
    rotation: tuple[float, float] = (0.0, 90.0)
    distractor_count_range: tuple[int, int] = (1, 2)
    ground_noise: float = 10.0
    roof_noise: float = 6.0
    min_fraction: float = 0.02
    max_fraction: float = 0.6

    def __post_init__(self):
        lo, hi = self.building_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid building_count_range {self.building_count_range}")
        for name in ("small_size_range", "large_size_range"):
            a, b = getattr(self, name)
            if a <= 0 or b < a:
                raise ValueError(f"invalid {name} {(a, b)}")
        if not 0.0 <= self.large_fraction <= 1.0:
            raise ValueError("large_fraction must lie in [0, 1]")


# Region presets stand in for different cities: dense small housing, large
# downtown blocks, and a mixed suburb.
REGION_PRESETS: dict[str, dict] = {
    "suburb": dict(building_count_range=(4, 7), large_fraction=0.15),
    "downtown": dict(building_count_range=(2, 4), large_fraction=0.8),
    "mixed": dict(building_count_range=(3, 6), large_fraction=0.4),
}

GROUND_COLORS = np.array([[96, 122, 70], [120, 128, 84], [142, 130, 102], [84, 104, 74]], dtype=np.float64)
ROOF_PALETTES = np.array(
    [[168, 80, 64], [190, 186, 176], [120, 118, 126], [152, 112, 82], [96, 96, 104], [200, 160, 130]],
    dtype=np.float64,
)
PAVEMENT_COLORS = np.array([[128, 128, 124], [150, 146, 138], [108, 106, 104]], dtype=np.float64)


def region_config(region: str, base: SceneConfig | None = None) -> SceneConfig:
    base = base or SceneConfig()
    if region not in REGION_PRESETS:
        raise KeyError(f"unknown region {region!r}; presets: {sorted(REGION_PRESETS)}")
    return replace(base, **REGION_PRESETS[region])


def scene_rng(seed: int, region: str, index: int) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{region}:{index}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def _smooth_noise(rng: np.random.Generator, extent: int, cell: int) -> np.ndarray:
    n = extent // cell + 2
    coarse = rng.standard_normal((n, n))
    pos = (np.arange(extent) + 0.5) / cell
    m = np.zeros((extent, n))
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    m[np.arange(extent), lo] = 1 - frac
    m[np.arange(extent), lo + 1] = frac
    return m @ coarse @ m.T


def _rect_footprint(cy, cx, h, w, angle, grow=0.0):
    """Pixel-center rasterization of a rotated rectangle; returns (r0, c0, bool patch)."""
    rad = np.deg2rad(angle)
    ca, sa = np.cos(rad), np.sin(rad)
    hh, hw = h / 2 + grow, w / 2 + grow
    ext_r = abs(hh * ca) + abs(hw * sa)
    ext_c = abs(hh * sa) + abs(hw * ca)
    r0, r1 = int(np.floor(cy - ext_r)), int(np.ceil(cy + ext_r)) + 1
    c0, c1 = int(np.floor(cx - ext_c)), int(np.ceil(cx + ext_c)) + 1
    rr = np.arange(r0, r1)[:, None] + 0.5 - cy
    cc = np.arange(c0, c1)[None, :] + 0.5 - cx
    u = rr * ca + cc * sa
    v = -rr * sa + cc * ca
    return r0, c0, (np.abs(u) <= hh) & (np.abs(v) <= hw)


def _paste(canvas: np.ndarray, r0: int, c0: int, patch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clip ``patch`` to the canvas; returns (canvas view, clipped patch)."""
    H, W = canvas.shape[:2]
    pr0, pc0 = max(0, -r0), max(0, -c0)
    r0c, c0c = max(r0, 0), max(c0, 0)
    r1c, c1c = min(r0 + patch.shape[0], H), min(c0 + patch.shape[1], W)
    if r1c <= r0c or c1c <= c0c:
        return canvas[0:0, 0:0], patch[0:0, 0:0]
    view = canvas[r0c:r1c, c0c:c1c]
    return view, patch[pr0 : pr0 + (r1c - r0c), pc0 : pc0 + (c1c - c0c)]


def _place(rng, config: SceneConfig, occupied: np.ndarray, sizes, retries: int = 30):
    """Try to place one rectangle clear of ``occupied``; returns its footprint or None."""
    E = occupied.shape[0]
    for _ in range(retries):
        h, w = rng.integers(sizes[0], sizes[1] + 1, size=2)
        angle = rng.uniform(*config.rotation)
        cy, cx = rng.uniform(0, E, size=2)
        r0, c0, grown = _rect_footprint(cy, cx, h, w, angle, grow=1.5)
        view, clipped = _paste(occupied, r0, c0, grown)
        if clipped.size == 0 or (view & clipped).any():
            continue
        r0, c0, patch = _rect_footprint(cy, cx, h, w, angle)
        view, clipped = _paste(occupied, r0, c0, patch)
        if not clipped.any():
            continue
        return r0, c0, patch
    return None


def _draw_scene(rng: np.random.Generator, config: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    E = config.extent
    area = E * E / 4096.0
    img = np.empty((E, E, 3))
    ground = GROUND_COLORS[rng.integers(len(GROUND_COLORS))]
    tone = _smooth_noise(rng, E, 16) * config.ground_noise * 1.5
    grain = rng.standard_normal((E, E)) * config.ground_noise
    img[:] = ground + (tone + grain)[..., None]

    occupied = np.zeros((E, E), dtype=bool)
    mask = np.zeros((E, E), dtype=np.uint8)

    pavement = PAVEMENT_COLORS[rng.integers(len(PAVEMENT_COLORS))]
    n_dis = int(round(rng.integers(config.distractor_count_range[0], config.distractor_count_range[1] + 1) * area))
    for _ in range(n_dis):
        placed = _place(rng, config, occupied, config.large_size_range)
        if placed is None:
            continue
        r0, c0, patch = placed
        view, clipped = _paste(occupied, r0, c0, patch)
        view |= clipped
        iview, _ = _paste(img, r0, c0, patch)
        iview[clipped] = pavement + rng.standard_normal((int(clipped.sum()), 1)) * config.roof_noise

    lo, hi = config.building_count_range
    target = int(round(rng.integers(lo, hi + 1) * area)) if hi > 0 else 0
    palette = ROOF_PALETTES[rng.choice(len(ROOF_PALETTES), size=2, replace=False)]
    sun = rng.uniform(0, 2 * np.pi)
    shadow = np.array([np.sin(sun), np.cos(sun)]) * 2.0
    placed_count = 0
    for _ in range(target):
        sizes = config.large_size_range if rng.random() < config.large_fraction else config.small_size_range
        placed = _place(rng, config, occupied, sizes)
        if placed is None:
            continue
        placed_count += 1
        r0, c0, patch = placed
        view, clipped = _paste(occupied, r0, c0, patch)
        view |= clipped
        # shadow: the footprint shifted along the sun direction, drawn on free ground only
        sr, sc = int(round(r0 + shadow[0])), int(round(c0 + shadow[1]))
        sview, sclip = _paste(img, sr, sc, patch)
        oview, _ = _paste(occupied, sr, sc, patch)
        if sclip.size:
            sview[sclip & ~oview] *= 0.55
        roof = palette[rng.integers(2)] + rng.normal(0, 12, size=3)
        iview, _ = _paste(img, r0, c0, patch)
        n = int(clipped.sum())
        iview[clipped] = roof + rng.standard_normal((n, 1)) * config.roof_noise
        mview, _ = _paste(mask, r0, c0, patch)
        mview[clipped] = 1
    if placed_count < target:
        log.warning("placed %d of %d buildings after bounded retries", placed_count, target)
    return np.clip(np.round(img), 0, 255).astype(np.uint8), mask


def generate_scene(seed: int, region: str, index: int, config: SceneConfig | None = None) -> Sample:
    """Deterministic scene for (seed, region, index).

    ``config`` defaults to the region preset. When buildings are requested,
    draws are repeated until the building fraction lies within the
    configured bounds.
    """
    config = config or region_config(region)
    rng = scene_rng(seed, region, index)
    for _ in range(50):
        image, mask = _draw_scene(rng, config)
        if config.building_count_range[1] == 0:
            break
        frac = mask.mean()
        if config.min_fraction <= frac <= config.max_fraction:
            break
    else:
        log.warning("scene %s%d: building fraction %.3f outside bounds", region, index, frac)
    return Sample(image=image, mask=mask, region=region, index=index)


def generate_dataset(
    seed: int,
    regions: Sequence[str] = tuple(REGION_PRESETS),
    indices: Iterable[int] = range(1, 37),
    base: SceneConfig | None = None,
) -> list[Sample]:
    indices = list(indices)
    return [generate_scene(seed, r, i, region_config(r, base)) for r in regions for i in indices]


def split(samples: Iterable[Sample]) -> tuple[list[Sample], list[Sample]]:
    """(training, validation): scene indices 1-5 of every region validate."""
    train, val = [], []
    for s in samples:
        (val if s.index in VALIDATION_INDICES else train).append(s)
    return train, val


# ---------------------------------------------------------------------------
# Netpbm I/O
# ---------------------------------------------------------------------------

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def _read_netpbm(path: str | os.PathLike, magic: bytes) -> np.ndarray:
    raw = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise RasterFormatError(f"{path}: truncated header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != magic:
        raise RasterFormatError(f"{path}: expected {magic.decode()} magic, found {fields[0][:8]!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise RasterFormatError(f"{path}: non-numeric header field") from exc
    if maxval != 255:
        raise RasterFormatError(f"{path}: maxval {maxval}, only 255 is supported")
    if w <= 0 or h <= 0:
        raise RasterFormatError(f"{path}: invalid extent {w}x{h}")
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise RasterFormatError(f"{path}: missing whitespace after header")
    pos += 1
    depth = 3 if magic == b"P6" else 1
    n = w * h * depth
    payload = raw[pos : pos + n]
    if len(payload) != n:
        raise RasterFormatError(f"{path}: truncated payload ({len(payload)} of {n} bytes)")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if depth == 3 else arr.reshape(h, w)


def _write_netpbm(path: str | os.PathLike, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def read_image(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise RasterFormatError(f"RGB image must be (H, W, 3) uint8, got {image.shape} {image.dtype}")
    _write_netpbm(path, b"P6", image)


def read_gray(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def write_gray(path, raster: np.ndarray) -> None:
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.dtype != np.uint8:
        raise RasterFormatError(f"gray raster must be (H, W) uint8, got {raster.shape} {raster.dtype}")
    _write_netpbm(path, b"P5", raster)


def read_mask(path) -> np.ndarray:
    raw = read_gray(path)
    bad = (raw != 0) & (raw != 255)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise RasterFormatError(f"{path}: non-binary mask value {raw[r, c]} at ({r}, {c})")
    return (raw == 255).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() > 1):
        raise RasterFormatError("mask must be binary {0, 1}")
    write_gray(path, mask.astype(np.uint8) * 255)


def sample_paths(root, region: str, index: int) -> tuple[Path, Path]:
    root = Path(root)
    return (
        root / region / "images" / f"{region}{index}.ppm",
        root / region / "gt" / f"{region}{index}.pgm",
    )


def write_dataset(root, samples: Iterable[Sample]) -> int:
    n = 0
    for s in samples:
        img_path, gt_path = sample_paths(root, s.region, s.index)
        write_image(img_path, s.image)
        write_mask(gt_path, s.mask)
        n += 1
    return n


def load_dataset(root, regions: Sequence[str] | None = None) -> list[Sample]:
    """Read every sample under ``root``, ordered by region then index."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    regions = sorted(p.name for p in root.iterdir() if (p / "images").is_dir()) if regions is None else regions
    samples = []
    for region in regions:
        pattern = re.compile(rf"{re.escape(region)}(\d+)\.ppm$")
        found = []
        for p in (root / region / "images").iterdir():
            m = pattern.match(p.name)
            if m:
                found.append(int(m.group(1)))
        for index in sorted(found):
            img_path, gt_path = sample_paths(root, region, index)
            samples.append(Sample(read_image(img_path), read_mask(gt_path), region, index))
    if not samples:
        raise FileNotFoundError(f"no samples found under {root}")
    return samples


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------


def _starts(extent: int, crop: int, stride: int) -> list[int]:
    starts = list(range(0, extent - crop + 1, stride))
    if starts[-1] + crop < extent:
        starts.append(extent - crop)  # edge-aligned last window
    return starts


def tile_coords(height: int, width: int, crop: int, stride: int) -> list[tuple[int, int]]:
    if crop <= 0 or stride <= 0:
        raise TilingError("crop and stride must be positive")
    if crop > height or crop > width:
        raise TilingError(f"crop {crop} is larger than the image {height}x{width}")
    if stride > crop:
        raise TilingError(f"stride {stride} exceeds crop {crop}; pixels would be skipped")
    return [(r, c) for r in _starts(height, crop, stride) for c in _starts(width, crop, stride)]


def tile(image: np.ndarray, crop: int, stride: int) -> list[tuple[np.ndarray, tuple[int, int]]]:
    """Row-major crops of an (H, W, ...) raster with their top-left corners."""
    coords = tile_coords(image.shape[0], image.shape[1], crop, stride)
    return [(image[r : r + crop, c : c + crop], (r, c)) for r, c in coords]


def stitch(pieces: Iterable[tuple[np.ndarray, tuple[int, int]]], extent: tuple[int, int]) -> np.ndarray:
    """Average channel-first (C, h, w) pieces into a (C, H, W) float64 raster."""
    total = count = None
    H, W = extent
    for arr, (r, c) in pieces:
        arr = np.asarray(arr, dtype=np.float64)
        if total is None:
            total = np.zeros((arr.shape[0], H, W))
            count = np.zeros((H, W), dtype=np.int64)
        h, w = arr.shape[1:]
        total[:, r : r + h, c : c + w] += arr
        count[r : r + h, c : c + w] += 1
    if total is None:
        raise TilingError("nothing to stitch")
    holes = np.argwhere(count == 0)
    if len(holes):
        listed = ", ".join(f"({r}, {c})" for r, c in holes[:5])
        raise TilingError(f"{len(holes)} uncovered pixels, first: {listed}")
    return total / count


def stitch_mask(pieces, extent: tuple[int, int]) -> np.ndarray:
    """Argmax of averaged class probabilities."""
    return stitch(pieces, extent).argmax(axis=0).astype(np.uint8)
