"""Command-line entry point: ``cpaseg <command> [flags]``.

Every flag can also be given in a flat ``key=value`` config file passed
with ``--config``; keys are the flag names without the leading dashes.
Flags override the file, the file overrides defaults.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import gradcheck
from .attention import export_affinity
from .metrics import MetricAccumulator
from .model import BACKBONES, VARIANTS, ModelConfig, SegmentationModel, to_input
from .training import AugConfig, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

log = logging.getLogger("cpaseg")

COMMANDS = ("gen-data", "train", "eval", "infer", "ablate", "gradcheck", "attn-export", "bench")

# flag -> (type, default, help)
OPTIONS: dict[str, tuple[type, object, str]] = {
    "seed": (int, 0, "random seed for data, initialization and training order"),
    "variant": (str, "cpa", f"model variant: {', '.join(VARIANTS)}"),
    "backbone": (str, "tiny", f"backbone size: {', '.join(BACKBONES)}"),
    "se": (int, 0, "1 adds squeeze-and-excitation gates to the backbone"),
    "data-root": (str, "data", "dataset directory (<root>/<region>/images, <root>/<region>/gt)"),
    "out": (str, "runs", "output directory"),
    "epochs": (int, 35, "training epochs"),
    "batch": (int, 4, "batch size"),
    "crop": (int, 64, "training crop / inference tile size in pixels"),
    "stride": (int, 0, "tile stride for infer and bench (0 = crop)"),
    "threads": (int, 1, "BLAS threads (1 keeps runs bit-reproducible)"),
    "lr": (float, 1e-3, "Adam learning rate (1e-5 for full-scale 500 px training)"),
    "steps": (int, 0, "stop after this many optimizer steps (0 = no limit)"),
    "aug": (int, 1, "1 enables rot90/flip/brightness/contrast augmentation"),
    "checkpoint": (str, "", "checkpoint path (default <out>/checkpoint.bin)"),
    "image": (str, "", "input RGB raster (P6) for infer / attn-export"),
    "scenes": (int, 36, "scenes per region for gen-data / ablate"),
    "extent": (int, 64, "scene side length in pixels (bench default 5000)"),
    "regions": (str, ",".join(D.REGION_PRESETS), "comma-separated region presets"),
    "runs": (int, 3, "seeds per variant in ablate"),
    "query": (str, "", "attention query position 'row,col' on the deep grid (default center)"),
}


class UsageError(Exception):
    pass


def read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    for n, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in OPTIONS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = value
    return values


def write_config_file(path: Path, opts: dict[str, object]) -> None:
    path.write_text("".join(f"{k}={opts[k]}\n" for k in OPTIONS))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value file mirroring these flags")
    for name, (typ, default, text) in OPTIONS.items():
        common.add_argument(f"--{name}", type=typ, default=argparse.SUPPRESS, help=f"{text} (default: {default})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="cpaseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "write a synthetic dataset to --data-root",
        "train": "train a model on --data-root and write a checkpoint to --out",
        "eval": "IoU / accuracy on the validation scenes (indices 1-5)",
        "infer": "tiled inference over --image, writes a stitched mask",
        "ablate": "train baseline, sa and cpa variants and compare them",
        "gradcheck": "finite-difference gradient suite",
        "attn-export": "write high- and low-resolution attention maps",
        "bench": "seconds per large synthetic tile per backbone",
    }
    for cmd in COMMANDS:
        sub.add_parser(cmd, parents=[common], help=helps[cmd], description=helps[cmd])
    return parser


def resolve(args: argparse.Namespace) -> tuple[dict[str, object], set[str]]:
    """Merge defaults, config file and flags (in increasing priority).

    Also returns the keys set explicitly by the file or a flag.
    """
    opts = {k: v[1] for k, v in OPTIONS.items()}
    explicit: set[str] = set()
    if args.config:
        for key, raw in read_config_file(args.config).items():
            explicit.add(key)
            try:
                opts[key] = OPTIONS[key][0](raw)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from exc
    for key in OPTIONS:
        attr = key.replace("-", "_")
        if hasattr(args, attr):
            opts[key] = getattr(args, attr)
            explicit.add(key)
    if opts["variant"] not in VARIANTS:
        raise UsageError(f"--variant must be one of {VARIANTS}")
    if opts["backbone"] not in BACKBONES:
        raise UsageError(f"--backbone must be one of {tuple(BACKBONES)}")
    for key in ("epochs", "batch", "crop", "threads", "scenes", "extent", "runs"):
        if opts[key] <= 0 and not (key == "epochs" and opts[key] == 0):
            raise UsageError(f"--{key} must be positive")
    if opts["lr"] < 0:
        raise UsageError("--lr must be non-negative")
    regions = [r for r in str(opts["regions"]).split(",") if r]
    unknown = [r for r in regions if r not in D.REGION_PRESETS]
    if unknown or not regions:
        raise UsageError(f"unknown regions {unknown}; presets: {sorted(D.REGION_PRESETS)}")
    return opts, explicit


@dataclass
class RunConfig:
    command: str
    opts: dict[str, object]
    explicit: set[str] = field(default_factory=set)

    @property
    def out(self) -> Path:
        return Path(str(self.opts["out"]))

    @property
    def regions(self) -> list[str]:
        return [r for r in str(self.opts["regions"]).split(",") if r]

    @property
    def checkpoint(self) -> Path:
        return Path(str(self.opts["checkpoint"])) if self.opts["checkpoint"] else self.out / "checkpoint.bin"

    @property
    def stride(self) -> int:
        return int(self.opts["stride"]) or int(self.opts["crop"])

    def model_config(self, variant: str | None = None, backbone: str | None = None, se: bool | None = None) -> ModelConfig:
        return ModelConfig.build(
            variant or str(self.opts["variant"]),
            backbone or str(self.opts["backbone"]),
            bool(self.opts["se"]) if se is None else se,
        )

    def train_config(self, seed: int | None = None) -> TrainConfig:
        o = self.opts
        return TrainConfig(
            lr=float(o["lr"]),
            epochs=int(o["epochs"]),
            batch_size=int(o["batch"]),
            crop_size=int(o["crop"]),
            seed=int(o["seed"]) if seed is None else seed,
            max_steps=int(o["steps"]) or None,
            aug=AugConfig() if o["aug"] else None,
        )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(rc: RunConfig) -> int:
    base = D.SceneConfig(extent=int(rc.opts["extent"]))
    samples = D.generate_dataset(int(rc.opts["seed"]), rc.regions, range(1, int(rc.opts["scenes"]) + 1), base)
    n = D.write_dataset(rc.opts["data-root"], samples)
    print(f"wrote {n} scenes to {rc.opts['data-root']}")
    return 0


def _load_splits(rc: RunConfig) -> tuple[list[D.Sample], list[D.Sample]]:
    return D.split(D.load_dataset(rc.opts["data-root"], rc.regions))


def cmd_train(rc: RunConfig) -> int:
    train_set, val_set = _load_splits(rc)
    if not train_set:
        raise UsageError("no training scenes (indices >= 6) found")
    model = SegmentationModel(rc.model_config(), seed=int(rc.opts["seed"]))
    records, losses = train(model, train_set, rc.train_config(), validation=val_set)
    rc.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(rc.checkpoint, model)
    write_config_file(rc.out / "run.cfg", rc.opts)
    (rc.out / "loss_curve.txt").write_text("".join(f"{v!r}\n" for v in losses))
    with open(rc.out / "train_log.txt", "w") as fh:
        fh.write("epoch steps loss val_iou\n")
        for r in records:
            val = "n/a" if r.val_iou is None else f"{r.val_iou:.6f}"
            fh.write(f"{r.epoch} {r.steps} {r.loss:.6f} {val}\n")
    last = records[-1] if records else None
    print(f"trained {len(losses)} steps; final loss {losses[-1] if losses else float('nan'):.6f}")
    if last is not None and last.val_iou is not None:
        print(f"validation IoU {100 * last.val_iou:.2f}")
    print(f"checkpoint written to {rc.checkpoint}")
    return 0


def _load_model(rc: RunConfig) -> SegmentationModel:
    path = rc.checkpoint
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path, SegmentationModel(rc.model_config()))


def cmd_eval(rc: RunConfig) -> int:
    model = _load_model(rc)
    _, val_set = _load_splits(rc)
    if not val_set:
        raise UsageError("no validation scenes (indices 1-5) found")
    report = evaluate(model, val_set).report()
    rc.out.mkdir(parents=True, exist_ok=True)
    (rc.out / "metrics.txt").write_text(report + "\n")
    print(report)
    return 0


def predict_tiled(model: SegmentationModel, image: np.ndarray, crop: int, stride: int) -> tuple[np.ndarray, int]:
    """Stitched argmax mask of ``image`` and the number of crops processed."""
    model.eval()
    pieces = []
    for window, pos in D.tile(image, crop, stride):
        pieces.append((model.predict_proba(window)[0], pos))
    return D.stitch_mask(pieces, image.shape[:2]), len(pieces)


def cmd_infer(rc: RunConfig) -> int:
    if not rc.opts["image"]:
        raise UsageError("infer needs --image")
    image = D.read_image(rc.opts["image"])
    model = _load_model(rc)
    mask, n = predict_tiled(model, image, int(rc.opts["crop"]), rc.stride)
    dest = rc.out / (Path(str(rc.opts["image"])).stem + "_mask.pgm")
    D.write_mask(dest, mask)
    print(f"processed {n} crops; mask written to {dest}")
    return 0


def ablation_table(results: dict[str, list[MetricAccumulator]]) -> str:
    lines = [f"{'model':<10}{'Accuracy':>10}{'IoU':>10}"]
    for variant in VARIANTS:
        accs = results[variant]
        acc = np.mean([a.accuracy() for a in accs])
        iou = np.mean([a.iou() or 0.0 for a in accs])
        lines.append(f"{variant:<10}{100 * acc:>10.2f}{100 * iou:>10.2f}")
    return "\n".join(lines)


def run_ablation(rc: RunConfig, train_set, val_set) -> dict[str, list[MetricAccumulator]]:
    base_seed = int(rc.opts["seed"])
    results: dict[str, list[MetricAccumulator]] = {}
    for variant in VARIANTS:
        for run in range(int(rc.opts["runs"])):
            seed = base_seed + run
            model = SegmentationModel(rc.model_config(variant=variant), seed=seed)
            train(model, train_set, rc.train_config(seed))
            acc = evaluate(model, val_set)
            results.setdefault(variant, []).append(acc)
            log.info("ablate %s seed %d: iou %.4f", variant, seed, acc.iou() or 0.0)
    return results


def cmd_ablate(rc: RunConfig) -> int:
    root = Path(str(rc.opts["data-root"]))
    if root.is_dir():
        samples = D.load_dataset(root, rc.regions)
    else:
        base = D.SceneConfig(extent=int(rc.opts["extent"]))
        samples = D.generate_dataset(int(rc.opts["seed"]), rc.regions, range(1, int(rc.opts["scenes"]) + 1), base)
    train_set, val_set = D.split(samples)
    results = run_ablation(rc, train_set, val_set)
    table = ablation_table(results)
    rc.out.mkdir(parents=True, exist_ok=True)
    with open(rc.out / "ablation.txt", "w") as fh:
        fh.write(table + "\n")
        for variant, accs in results.items():
            for run, acc in enumerate(accs):
                fh.write(f"iou.{variant}.{run}={acc.iou()!r}\nacc.{variant}.{run}={acc.accuracy()!r}\n")
    print(table)
    return 0


def cmd_gradcheck(rc: RunConfig) -> int:
    results = gradcheck.run_all(int(rc.opts["seed"]))
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:.3e}  n={r.checked:<5} {status}")
    bad = [r.name for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} groups below {gradcheck.TOLERANCE:g}")
    return 1 if bad else 0


def _parse_query(text: str, h: int, w: int) -> tuple[int, int]:
    if not text:
        return h // 2, w // 2
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError("--query must look like 'row,col'") from exc
    return r, c


def cmd_attn_export(rc: RunConfig) -> int:
    if rc.opts["variant"] != "cpa":
        raise UsageError("attn-export needs --variant cpa")
    if rc.opts["image"]:
        image = D.read_image(rc.opts["image"])
    else:
        extent = max(int(rc.opts["extent"]), 128)
        image = D.generate_scene(int(rc.opts["seed"]), rc.regions[0], 1, D.region_config(rc.regions[0], D.SceneConfig(extent=extent))).image
    if rc.checkpoint.is_file():
        model = _load_model(rc)
    else:
        log.warning("no checkpoint at %s; exporting attention of an untrained model", rc.checkpoint)
        model = SegmentationModel(rc.model_config(), seed=int(rc.opts["seed"])).eval()
    H, W = image.shape[:2]
    if H % 32 or W % 32:
        raise UsageError(f"attn-export needs an image extent divisible by 32, got {H}x{W}")
    rc.out.mkdir(parents=True, exist_ok=True)
    probs = model.predict_proba(image)
    D.write_mask(rc.out / "prediction.pgm", probs[0].argmax(axis=0).astype(np.uint8))
    pyr = model.backbone(to_input(image))
    h8, w8 = pyr.c5.shape[2:]
    r, c = _parse_query(str(rc.opts["query"]), h8, w8)
    if not (0 <= r < h8 and 0 <= c < w8):
        raise UsageError(f"--query {r},{c} outside the {h8}x{w8} deep grid")
    block = model.attention
    names = {min(block.scales): "high", max(block.scales): "low"}
    for scale in block.scales:
        raster = export_affinity(block, pyr.c5, scale, (r // scale, c // scale))
        D.write_gray(rc.out / f"attention_s{scale}.pgm", raster)
        if scale in names:
            D.write_gray(rc.out / f"attention_{names[scale]}.pgm", raster)
    print(f"attention maps for query ({r}, {c}) written to {rc.out}")
    return 0


def cmd_bench(rc: RunConfig) -> int:
    # the bench defaults mirror a full 5000 x 5000 tile cut into 500 x 500 crops
    extent = int(rc.opts["extent"]) if "extent" in rc.explicit else 5000
    crop = int(rc.opts["crop"]) if "crop" in rc.explicit else 500
    stride = int(rc.opts["stride"]) or crop
    region = rc.regions[0]
    scene = D.generate_scene(int(rc.opts["seed"]), region, 1, D.region_config(region, D.SceneConfig(extent=extent)))
    rows = []
    for name, backbone, se in BENCH_BACKBONES:
        model = SegmentationModel(rc.model_config(variant="cpa", backbone=backbone, se=se), seed=int(rc.opts["seed"]))
        start = time.perf_counter()
        _, n = predict_tiled(model, scene.image, crop, stride)
        seconds = time.perf_counter() - start
        rows.append((name, n, seconds))
        log.info("bench %s: %d crops in %.2f s", name, n, seconds)
    rc.out.mkdir(parents=True, exist_ok=True)
    with open(rc.out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["backbone", "tile", "crop", "stride", "crops", "seconds", "crops_per_second"])
        for name, n, s in rows:
            w.writerow([name, f"{extent}x{extent}", crop, stride, n, f"{s:.3f}", f"{n / s:.3f}"])
    print(f"{'Model':<12}{'Time/tile':>12}{'Crops':>8}")
    for name, n, s in rows:
        print(f"{name:<12}{s:>10.2f} s{n:>8}")
    return 0


BENCH_BACKBONES = (("tiny", "tiny", False), ("small", "small", False), ("small-se", "small", True))

HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "attn-export": cmd_attn_export,
    "bench": cmd_bench,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        opts, explicit = resolve(args)
        rc = RunConfig(args.command, opts, explicit)
        with _threads(int(rc.opts["threads"])):
            return HANDLERS[args.command](rc)
    except (UsageError, FileNotFoundError, D.RasterFormatError, ValueError) as exc:
        print(f"cpaseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


def _threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
