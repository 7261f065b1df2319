"""Command-line front end: dataset generation, training, attacks, sweeps,
benchmarks and sparsity studies, all emitting plain CSV artifacts.

Subcommands: generate, train, attack, sweep, bench, sparsity, eval.
Every CSV has a stable documented header; timing columns are the only
fields that vary between identically-seeded runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import anchornet, attacks, metrics, synthdata
from .anchornet import DetectorConfig, DetectorModel
from .attacks import AttackConfig, PerturbationResult
from .errors import ConfigError, DimensionError, FormatError, TapeUsageError, TrainingError
from .gradtape import Tensor
from .metrics import EVAL_CSV_HEADER, EvalReport
from .synthdata import SyntheticDataset

SWEEP_CSV_HEADER = ("attack", "variable", "value", "map", "mean_l1", "psnr",
                    "ms_per_image")
BENCH_CSV_HEADER = ("attack", "fa_variant", "steps", "threshold", "mean_ms",
                    "std_ms", "repeats")
SPARSITY_CSV_HEADER = ("kind", "threshold", "fraction_le", "bin_lo", "bin_hi",
                       "count", "bin_fraction")
LOSS_CSV_HEADER = ("epoch", "train_loss", "val_map")

MANIFEST_NAME = "manifest.json"
ANNOTATIONS_NAME = "annotations.txt"

SWEEP_EPSILONS = (0.01, 0.02, 0.05, 0.1)
SWEEP_STEPS = (1, 3, 5, 10)
SWEEP_FOCUS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


# ---------------------------------------------------------------------------
# dataset on disk


def write_dataset(dataset: SyntheticDataset, out_dir: Path, seed: int,
                  force: bool = False) -> Path:
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ConfigError(f"output directory {out_dir} is not empty (use --force)")
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, image in enumerate(dataset.images):
        name = f"images/img_{i:05d}.ppm"
        synthdata.write_image(image, out_dir / name)
        names.append(name)
    synthdata.write_annotations(names, dataset.annotations,
                                out_dir / ANNOTATIONS_NAME)
    cfg = dataset.config
    manifest = {
        "kind": "advfocus-dataset",
        "seed": int(seed),
        "n": len(dataset),
        "config": {
            "input_size": cfg.input_size,
            "grid": cfg.grid,
            "anchors_per_cell": cfg.anchors_per_cell,
            "num_classes": cfg.num_classes,
            "channels": list(cfg.channels),
            "anchor_scales": list(cfg.anchor_scales),
        },
        "images": names,
        "annotations": ANNOTATIONS_NAME,
    }
    # the manifest goes last: its presence marks a complete dataset
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                             encoding="ascii")
    return manifest_path


def config_from_manifest(manifest: dict) -> DetectorConfig:
    raw = manifest["config"]
    return DetectorConfig(
        input_size=int(raw["input_size"]),
        grid=int(raw["grid"]),
        anchors_per_cell=int(raw["anchors_per_cell"]),
        num_classes=int(raw["num_classes"]),
        channels=tuple(int(c) for c in raw["channels"]),
        anchor_scales=tuple(float(s) for s in raw["anchor_scales"]),
    )


def load_dataset(path) -> tuple[SyntheticDataset, Path, dict]:
    """Read a dataset directory (or its manifest path) back into memory."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME if path.is_dir() else path
    if not manifest_path.is_file():
        raise FormatError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="ascii"))
    if manifest.get("kind") != "advfocus-dataset":
        raise FormatError(f"{manifest_path} is not a dataset manifest")
    root = manifest_path.parent
    config = config_from_manifest(manifest)
    by_name = dict(synthdata.read_annotations(root / manifest["annotations"]))
    ds = SyntheticDataset(config=config)
    size = (config.input_size, config.input_size)
    for name in manifest["images"]:
        ann = by_name.get(name)
        if ann is None:
            raise FormatError(f"image {name} has no annotation record")
        ds.images.append(synthdata.read_image(root / name, expected_size=size))
        ds.annotations.append(ann)
        ds.grid_labels.append(synthdata.annotation_to_grid(ann, config))
    return ds, root, manifest


def split_dataset(dataset: SyntheticDataset,
                  val_fraction: float = 0.2) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Deterministic head/tail split: the last val_fraction goes to validation."""
    if not (0.0 < val_fraction < 1.0):
        raise ConfigError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    n_val = max(1, int(round(len(dataset) * val_fraction)))
    n_train = len(dataset) - n_val
    if n_train < 1:
        raise ConfigError("dataset too small to split")
    return (dataset.subset(range(n_train)),
            dataset.subset(range(n_train, len(dataset))))


# ---------------------------------------------------------------------------
# evaluation drivers (shared by the CLI and the acceptance suite)


def evaluate_clean(model: DetectorModel, dataset: SyntheticDataset,
                   confidence: float = 0.5, nms_iou: float = 0.5) -> EvalReport:
    start = time.perf_counter()
    map_value, per_class = metrics.map_score(model, dataset, confidence, nms_iou)
    elapsed = time.perf_counter() - start
    return EvalReport(map=map_value, per_class_ap=per_class, mean_l1=0.0,
                      linf=0.0, psnr=metrics.PSNR_CAP,
                      ms_per_image=1000.0 * elapsed / len(dataset))


def attack_dataset(model: DetectorModel, dataset: SyntheticDataset,
                   cfg: AttackConfig) -> list[PerturbationResult]:
    return [attacks.run_attack(model, image, cfg) for image in dataset.images]


def evaluate_attack(model: DetectorModel, dataset: SyntheticDataset,
                    cfg: AttackConfig, quantize: bool = False,
                    confidence: float = 0.5, nms_iou: float = 0.5,
                    results: list[PerturbationResult] | None = None) -> EvalReport:
    """Attack every image, then score the detector on the adversarial set."""
    if results is None:
        results = attack_dataset(model, dataset, cfg)
    adv_images = [r.x_adv for r in results]
    if quantize:
        adv_images = [attacks.quantize_image(img) for img in adv_images]
    map_value, per_class = metrics.map_score(model, dataset, confidence, nms_iou,
                                             images=adv_images)
    l1s, psnrs, linfs = [], [], []
    for image, adv in zip(dataset.images, adv_images):
        l1s.append(metrics.mean_l1(image, adv))
        psnrs.append(metrics.psnr(image, adv))
        linfs.append(metrics.linf(image, adv))
    return EvalReport(
        map=map_value, per_class_ap=per_class,
        mean_l1=float(np.mean(l1s)), linf=float(np.max(linfs)),
        psnr=float(np.mean(psnrs)),
        ms_per_image=1000.0 * float(np.mean([r.wall_time_s for r in results])))


@dataclass
class SweepSpec:
    variable: str                      # epsilon | steps | focus
    values: tuple = ()
    base: AttackConfig = field(default_factory=AttackConfig)
    confidence: float = 0.5
    nms_iou: float = 0.5
    limit: int | None = None

    def __post_init__(self):
        if self.variable not in ("epsilon", "steps", "focus"):
            raise ConfigError(f"unknown sweep variable {self.variable!r}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        for v in self.values:
            if self.variable == "epsilon" and not 0.0 <= v <= 1.0:
                raise ConfigError(f"epsilon {v} outside [0, 1]")
            if self.variable == "steps" and (int(v) != v or v < 1):
                raise ConfigError(f"steps {v} must be a positive integer")
            if self.variable == "focus" and not 0.0 <= v < 1.0:
                raise ConfigError(f"focus {v} outside [0, 1)")


def run_sweep(model: DetectorModel, dataset: SyntheticDataset,
              spec: SweepSpec) -> list[dict]:
    """One row per (attack, value); FGSM / PGD rows in the focus sweep are
    computed once since the threshold cannot affect them."""
    ds = dataset if spec.limit is None else dataset.subset(range(min(spec.limit, len(dataset))))
    base = spec.base
    rows: list[dict] = []

    def eval_cfg(cfg: AttackConfig) -> EvalReport:
        return evaluate_attack(model, ds, cfg, confidence=spec.confidence,
                               nms_iou=spec.nms_iou)

    def emit(attack: str, value, report: EvalReport) -> None:
        rows.append({"attack": attack, "variable": spec.variable, "value": value,
                     "map": report.map, "mean_l1": report.mean_l1,
                     "psnr": report.psnr, "ms_per_image": report.ms_per_image})

    if spec.variable == "epsilon":
        for eps in spec.values:
            emit("fgsm", eps, eval_cfg(AttackConfig(kind="fgsm", budget=eps, steps=1)))
            emit("pgd", eps, eval_cfg(AttackConfig(kind="pgd", budget=eps, steps=base.steps)))
            emit("fa1", eps, eval_cfg(AttackConfig(kind="fa", budget=eps, steps=1,
                                                   focus=base.focus, fa_variant=base.fa_variant)))
            emit("fa5", eps, eval_cfg(AttackConfig(kind="fa", budget=eps, steps=base.steps,
                                                   focus=base.focus, fa_variant=base.fa_variant)))
    elif spec.variable == "steps":
        fgsm_report = eval_cfg(AttackConfig(kind="fgsm", budget=base.budget, steps=1))
        for s in spec.values:
            s = int(s)
            emit("fgsm", s, fgsm_report)
            emit("pgd", s, eval_cfg(AttackConfig(kind="pgd", budget=base.budget, steps=s)))
            emit("fa", s, eval_cfg(AttackConfig(kind="fa", budget=base.budget, steps=s,
                                                focus=base.focus, fa_variant=base.fa_variant)))
    else:  # focus
        fgsm_report = eval_cfg(AttackConfig(kind="fgsm", budget=base.budget, steps=1))
        pgd_report = eval_cfg(AttackConfig(kind="pgd", budget=base.budget, steps=base.steps))
        for t in spec.values:
            emit("fgsm", t, fgsm_report)
            emit("pgd", t, pgd_report)
            emit("fa1", t, eval_cfg(AttackConfig(kind="fa", budget=base.budget, steps=1,
                                                 focus=t, fa_variant=base.fa_variant)))
            emit("fa5", t, eval_cfg(AttackConfig(kind="fa", budget=base.budget,
                                                 steps=base.steps, focus=t,
                                                 fa_variant=base.fa_variant)))
    return rows


@dataclass
class BenchCell:
    attack: str
    fa_variant: str
    steps: int
    threshold: float | None
    mean_ms: float
    std_ms: float
    repeats: int


def bench_attack(model: DetectorModel, images: Sequence[Tensor],
                 cfg: AttackConfig, repeats: int = 20, warmups: int = 3,
                 io_paths: Sequence | None = None) -> tuple[float, float]:
    """Mean and stddev of per-image attack wall time in milliseconds.

    Images are preloaded; the clock wraps only the attack call unless
    io_paths is given, in which case each run re-reads its image from disk
    (the I/O-inclusive protocol, not used by acceptance).
    """
    if repeats < 1:
        raise ConfigError("bench needs repeats >= 1")
    times = []
    total = warmups + repeats
    for i in range(total):
        idx = i % len(images)
        if io_paths is not None:
            start = time.perf_counter()
            image = synthdata.read_image(io_paths[idx])
            attacks.run_attack(model, image, cfg)
            elapsed = time.perf_counter() - start
        else:
            start = time.perf_counter()
            attacks.run_attack(model, images[idx], cfg)
            elapsed = time.perf_counter() - start
        if i >= warmups:
            times.append(elapsed * 1000.0)
    mean = float(np.mean(times))
    std = float(np.std(times)) if len(times) > 1 else 0.0
    return mean, std


def run_bench(model: DetectorModel, dataset: SyntheticDataset,
              thresholds: Sequence[float], repeats: int = 20, warmups: int = 3,
              budget: float = 0.02, steps: int = 5,
              io_paths: Sequence | None = None,
              fa_variants: Sequence[str] = ("indexed", "parallel")) -> list[BenchCell]:
    """Timing table: FGSM and PGD once, the focused attack per threshold and
    variant at 1 and `steps` iterations."""
    images = dataset.images
    cells: list[BenchCell] = []
    mean, std = bench_attack(model, images, AttackConfig(kind="fgsm", budget=budget,
                                                         steps=1),
                             repeats, warmups, io_paths)
    cells.append(BenchCell("fgsm", "", 1, None, mean, std, repeats))
    mean, std = bench_attack(model, images, AttackConfig(kind="pgd", budget=budget,
                                                         steps=steps),
                             repeats, warmups, io_paths)
    cells.append(BenchCell("pgd", "", steps, None, mean, std, repeats))
    for variant in fa_variants:
        for s in (1, steps):
            for t in thresholds:
                cfg = AttackConfig(kind="fa", budget=budget, steps=s, focus=t,
                                   fa_variant=variant)
                mean, std = bench_attack(model, images, cfg, repeats, warmups, io_paths)
                cells.append(BenchCell("fa", variant, s, t, mean, std, repeats))
    return cells


# ---------------------------------------------------------------------------
# CSV helpers


def _write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value, spec: str = "") -> str:
    if value is None or value == "":
        return ""
    return format(value, spec) if spec else str(value)


# ---------------------------------------------------------------------------
# subcommands


def _config_from_args(args) -> DetectorConfig:
    return DetectorConfig(
        input_size=args.input_size,
        grid=args.grid,
        anchors_per_cell=args.anchors,
        num_classes=args.classes,
        channels=tuple(int(c) for c in args.channels.split(",")),
        anchor_scales=tuple(float(s) for s in args.anchor_scales.split(",")),
    )


def cmd_generate(args) -> int:
    config = _config_from_args(args)
    dataset = synthdata.generate(args.seed, args.n, config)
    manifest = write_dataset(dataset, Path(args.out), args.seed, force=args.force)
    print(f"wrote {len(dataset)} images under {manifest.parent}")
    return 0


def cmd_train(args) -> int:
    dataset, _, _ = load_dataset(args.dataset)
    config = dataset.config
    model = anchornet.init_model(config, seed=args.seed)
    train_ds, val_ds = split_dataset(dataset, args.val_fraction)
    result = anchornet.train(model, train_ds.samples(), epochs=args.epochs,
                             learning_rate=args.lr, seed=args.seed)
    anchornet.save_weights(result.model, args.out)
    val_report = evaluate_clean(result.model, val_ds)
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    rows = [[str(i + 1), f"{loss:.8f}", ""] for i, loss in enumerate(result.losses)]
    rows.append(["final", "", f"{val_report.map:.6f}"])
    _write_csv(loss_csv, LOSS_CSV_HEADER, rows)
    print(f"saved weights to {args.out}; validation mAP {val_report.map:.4f}")
    return 0


def _load_model(weights_path, dataset: SyntheticDataset) -> DetectorModel:
    model = anchornet.init_model(dataset.config, seed=0)
    return anchornet.load_weights(model, weights_path)


def _attack_config_from_args(args) -> AttackConfig:
    return AttackConfig(kind=args.attack, budget=args.epsilon,
                        steps=1 if args.attack == "fgsm" else args.steps,
                        focus=args.focus, fa_variant=args.fa_variant,
                        fa_descend=not args.fa_ascend)


def cmd_attack(args) -> int:
    dataset, root, manifest = load_dataset(args.dataset)
    model = _load_model(args.weights, dataset)
    cfg = _attack_config_from_args(args)
    out_dir = Path(args.out)
    results = attack_dataset(model, dataset, cfg)
    report = evaluate_attack(model, dataset, cfg, quantize=args.quantize,
                             confidence=args.confidence, nms_iou=args.nms_iou,
                             results=results)
    (out_dir / "adversarial").mkdir(parents=True, exist_ok=True)
    (out_dir / "original").mkdir(parents=True, exist_ok=True)
    for name, res in zip(manifest["images"], results):
        base = Path(name).name
        synthdata.write_image(res.x_adv, out_dir / "adversarial" / base)
        shutil.copyfile(root / name, out_dir / "original" / base)
    _write_csv(out_dir / "report.csv", EVAL_CSV_HEADER,
               [report.csv_row(model=Path(args.weights).name, attack=args.attack,
                               epsilon=args.epsilon, steps=cfg.steps,
                               focus=args.focus if args.attack == "fa" else None)])
    if args.heat:
        heat = attacks.perturbation_heat(results)
        _write_csv(out_dir / "heat.csv",
                   [f"col_{j}" for j in range(heat.shape[1])],
                   [[f"{v:.8f}" for v in row] for row in heat])
    print(f"attack {args.attack}: mAP {report.map:.4f}, "
          f"mean L1 {report.mean_l1:.5f}, PSNR {report.psnr:.2f} dB")
    return 0


def cmd_sweep(args) -> int:
    dataset, _, _ = load_dataset(args.dataset)
    model = _load_model(args.weights, dataset)
    defaults = {"epsilon": SWEEP_EPSILONS, "steps": SWEEP_STEPS, "focus": SWEEP_FOCUS}
    values = tuple(float(v) for v in args.values.split(",")) if args.values \
        else defaults[args.variable]
    spec = SweepSpec(
        variable=args.variable, values=values,
        base=AttackConfig(kind="fa", budget=args.epsilon, steps=args.steps,
                          focus=args.focus, fa_variant=args.fa_variant),
        confidence=args.confidence, nms_iou=args.nms_iou, limit=args.limit)
    rows = run_sweep(model, dataset, spec)
    _write_csv(args.out, SWEEP_CSV_HEADER,
               [[r["attack"], r["variable"], _fmt(r["value"], ".6g"),
                 f"{r['map']:.6f}", f"{r['mean_l1']:.8f}", f"{r['psnr']:.4f}",
                 f"{r['ms_per_image']:.3f}"] for r in rows])
    print(f"wrote {len(rows)} sweep rows to {args.out}")
    return 0


def cmd_bench(args) -> int:
    dataset, root, manifest = load_dataset(args.dataset)
    if args.limit:
        dataset = dataset.subset(range(min(args.limit, len(dataset))))
    model = _load_model(args.weights, dataset)
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    io_paths = None
    if args.include_io:
        io_paths = [root / name for name in manifest["images"]][:len(dataset)]
    cells = run_bench(model, dataset, thresholds, repeats=args.repeats,
                      warmups=args.warmups, budget=args.epsilon,
                      steps=args.steps, io_paths=io_paths)
    _write_csv(args.out, BENCH_CSV_HEADER,
               [[c.attack, c.fa_variant, str(c.steps),
                 _fmt(c.threshold, ".3g") if c.threshold is not None else "",
                 f"{c.mean_ms:.4f}", f"{c.std_ms:.4f}", str(c.repeats)]
                for c in cells])
    print(f"wrote {len(cells)} bench cells to {args.out}")
    return 0


def cmd_sparsity(args) -> int:
    dataset, _, _ = load_dataset(args.dataset)
    model = _load_model(args.weights, dataset)
    maps = [anchornet.forward(model, image).values.data for image in dataset.images]
    stacked = np.concatenate(maps, axis=0)
    thresholds = tuple(float(t) for t in args.thresholds.split(","))
    stats = anchornet.sparsity_stats(stacked, thresholds,
                                     top_fraction=args.top_fraction, bins=args.bins)
    rows = [["cumulative", f"{t:.6g}", f"{f:.8f}", "", "", "", ""]
            for t, f in zip(stats.thresholds, stats.fractions_le)]
    for i, (count, frac) in enumerate(zip(stats.hist_counts, stats.hist_fractions)):
        rows.append(["hist", "", "", f"{stats.hist_edges[i]:.8f}",
                     f"{stats.hist_edges[i + 1]:.8f}", str(count), f"{frac:.8f}"])
    _write_csv(args.out, SPARSITY_CSV_HEADER, rows)
    print(f"sparsity over {stats.total_entries} entries "
          f"({stats.top_entries} in the top subset) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    dataset, _, _ = load_dataset(args.dataset)
    model = _load_model(args.weights, dataset)
    report = evaluate_clean(model, dataset, confidence=args.confidence,
                            nms_iou=args.nms_iou)
    _write_csv(args.out, EVAL_CSV_HEADER,
               [report.csv_row(model=Path(args.weights).name, attack="none",
                               epsilon=0.0, steps=0, focus=None)])
    print(f"clean mAP {report.map:.4f} -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--grid", type=int, default=8)
    p.add_argument("--anchors", type=int, default=1)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--channels", default="16,32,64")
    p.add_argument("--anchor-scales", default="1.25")


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--confidence", type=float, default=0.5)
    p.add_argument("--nms-iou", type=float, default=0.5)


def _add_attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", type=float, default=0.02)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--focus", type=float, default=0.5)
    p.add_argument("--fa-variant", choices=attacks.FA_VARIANTS, default="indexed")
    p.add_argument("--fa-ascend", action="store_true",
                   help="use the raw '+' update instead of descending the objective")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advfocus",
        description="toy detector + focused/FGSM/PGD attack workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset to disk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the detector on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--epochs", type=int, default=anchornet.DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=anchornet.DEFAULT_LEARNING_RATE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a dataset and score the result")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--attack", choices=attacks.ATTACK_KINDS, required=True)
    _add_attack_flags(p)
    _add_decode_flags(p)
    p.add_argument("--quantize", action="store_true",
                   help="evaluate on 8-bit quantized adversarial images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heat", action="store_true",
                   help="also write the per-pixel mean |delta| grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="hyperparameter sweep to a curve CSV")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--variable", choices=("epsilon", "steps", "focus"), required=True)
    p.add_argument("--values", default=None,
                   help="comma list; defaults mirror the standard grids")
    _add_attack_flags(p)
    _add_decode_flags(p)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="attack timing table")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--thresholds", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--warmups", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=0.02)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--include-io", action="store_true",
                   help="time image file reads too (not the default protocol)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sparsity", help="feature-map sparsity histogram CSV")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--thresholds", default="0.01,0.05,0.1,0.25,0.5")
    p.add_argument("--top-fraction", type=float, default=0.0002)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sparsity)

    p = sub.add_parser("eval", help="clean mAP of saved weights on a dataset")
    p.add_argument("--weights", required=True)
    p.add_argument("--dataset", required=True)
    _add_decode_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, FormatError, TapeUsageError,
            TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
