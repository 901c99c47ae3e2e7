"""Command line experiment runner and reporter.

Verbs: run (train a config's full grid), aggregate (rebuild the summary
table from a finished run directory), profile (cost reports without
training), features (structure features of a volume directory), render
(slice image with label overlay), generate (write a phantom cohort).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import analysis, volio
from .config import (ConfigError, ExperimentConfig, SourceConfig, config_to_dict,
                     expand_grid, load_config, save_config)
from .data import make_folds, normalize_ct, normalize_zscore
from .models import ModelSpec, SegmentationModel, assemble_model
from .phantom import LabeledVolume, dataset_presets, generate_cohort
from .training import build_samples, evaluate, run_training

_PALETTE = (
    (230, 60, 60), (60, 130, 230), (70, 200, 90), (240, 200, 40),
    (190, 80, 220), (40, 210, 210), (250, 140, 40), (160, 160, 160),
)


# ---------------------------------------------------------------------------
# data source


def _normalize_volume(vol: LabeledVolume, how: str) -> LabeledVolume:
    if how == "none":
        return vol
    fn = normalize_ct if how == "ct" else normalize_zscore
    return dataclasses.replace(vol, image=fn(vol.image))


def load_source(source: SourceConfig) -> list[LabeledVolume]:
    """Materialize the configured cohort, normalized and ready to train on."""
    if source.kind == "phantom":
        presets = dataset_presets()
        if source.preset not in presets:
            raise ConfigError(f"unknown phantom preset {source.preset!r}"
                              f" (available: {', '.join(sorted(presets))})")
        volumes = generate_cohort(presets[source.preset], source.num_volumes,
                                  seed=source.seed)
    else:
        stems = volio.list_case_stems(source.directory)
        volumes = [volio.load_case(source.directory, s) for s in stems]
    return [_normalize_volume(v, source.normalization) for v in volumes]


def source_fingerprint(volumes: list[LabeledVolume]) -> str:
    """Content hash of the cohort actually trained on."""
    h = hashlib.sha256()
    for v in volumes:
        h.update(v.patient_id.encode())
        h.update(np.ascontiguousarray(v.image, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(v.labels, dtype=np.uint8).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# grid execution


def cell_name(spec: ModelSpec) -> str:
    return f"{spec.mode}-{spec.backbone}-d{spec.d:02d}"


def _cell_hash(spec: ModelSpec, cfg: ExperimentConfig, fold: int, fingerprint: str) -> str:
    payload = json.dumps({
        "cell": spec.to_dict(),
        "train": config_to_dict(cfg)["train"],
        "folds": {"count": cfg.folds.count, "seed": cfg.folds.seed},
        "fold": fold,
        "source": fingerprint,
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _derived_seed(name: str, fold: int, base_seed: int, salt: str) -> int:
    digest = hashlib.sha256(f"{salt}|{name}|{fold}|{base_seed}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _train_one_fold(spec: ModelSpec, cfg: ExperimentConfig, fold_index: int,
                    split, by_id: dict, fold_dir: str) -> dict:
    name = cell_name(spec)
    model = assemble_model(spec, seed=_derived_seed(name, fold_index, cfg.train.seed, "init"))
    train_cfg = dataclasses.replace(
        cfg.train, seed=_derived_seed(name, fold_index, cfg.train.seed, "train"))
    train_samples = build_samples([by_id[i] for i in split.train], spec)
    val_samples = build_samples([by_id[i] for i in split.val], spec)
    history = run_training(model, train_samples, val_samples, train_cfg)
    result = evaluate(model, [by_id[i] for i in split.test], batch_size=cfg.train.batch_size)

    history.write(os.path.join(fold_dir, "history.csv"))
    metrics = {
        "per_class_dsc": [float(x) for x in result.per_class],
        "mean_foreground_dsc": float(result.mean_foreground),
        "epochs": len(history.records),
        "stop_reason": history.stop_reason,
        "best_val_loss": float(history.best_val_loss),
        "test_patients": list(split.test),
    }
    with open(os.path.join(fold_dir, "metrics.json"), "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics


def run_grid(cfg: ExperimentConfig, out_dir: str, log=print) -> str:
    """Train every (cell, fold), then write the aggregate table.

    Finished cells are detected by their completion marker and skipped, so
    an interrupted run resumes where it stopped. Returns the aggregate
    table path.
    """
    volumes = load_source(cfg.source)
    fingerprint = source_fingerprint(volumes)
    by_id = {v.patient_id: v for v in volumes}
    folds = make_folds(sorted(by_id), num_folds=cfg.folds.count, seed=cfg.folds.seed)
    k, c = volumes[0].labels.max() + 1, volumes[0].image.shape[-1]
    cells = expand_grid(cfg.grid, in_channels=c, num_classes=int(k))

    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.json"))
    with open(os.path.join(out_dir, "source.fingerprint"), "w", encoding="utf-8") as fh:
        fh.write(fingerprint + "\n")

    for spec in cells:
        name = cell_name(spec)
        cell_dir = os.path.join(out_dir, "cells", name)
        os.makedirs(cell_dir, exist_ok=True)
        with open(os.path.join(cell_dir, "cell.json"), "w", encoding="utf-8") as fh:
            json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        report = analysis.cost_report(assemble_model(spec, seed=0),
                                      volumes[0].image.shape[:2])
        with open(os.path.join(cell_dir, "cost.csv"), "w", encoding="utf-8") as fh:
            fh.write("parameter_count,flop_count,activation_memory_bytes\n")
            fh.write(f"{report.parameter_count},{report.flop_count},"
                     f"{report.activation_memory_bytes}\n")

        for fold_index, split in enumerate(folds):
            fold_dir = os.path.join(cell_dir, f"fold{fold_index}")
            os.makedirs(fold_dir, exist_ok=True)
            marker = os.path.join(fold_dir, "done.marker")
            want = _cell_hash(spec, cfg, fold_index, fingerprint)
            if os.path.exists(marker):
                with open(marker, "r", encoding="utf-8") as fh:
                    if fh.read().strip() == want:
                        log(f"[skip] {name} fold{fold_index} (complete)")
                        continue
            metrics = _train_one_fold(spec, cfg, fold_index, split, by_id, fold_dir)
            with open(marker, "w", encoding="utf-8") as fh:
                fh.write(want + "\n")
            log(f"[done] {name} fold{fold_index}"
                f" dsc={metrics['mean_foreground_dsc']:.4f}"
                f" epochs={metrics['epochs']}")

    return write_aggregate(out_dir)


def write_aggregate(out_dir: str) -> str:
    """Rebuild aggregate.csv from the metrics stored in a run directory."""
    cfg = load_config(os.path.join(out_dir, "config.json"))
    cells_dir = os.path.join(out_dir, "cells")
    rows = []
    expected = []
    # channel/class counts do not matter for cell identity
    for spec in expand_grid(cfg.grid, in_channels=1, num_classes=2):
        expected.append((spec.mode, spec.backbone, spec.d))
        cell_dir = os.path.join(cells_dir, cell_name(spec))
        for fold_index in range(cfg.folds.count):
            path = os.path.join(cell_dir, f"fold{fold_index}", "metrics.json")
            if not os.path.exists(path):
                raise ValueError(f"missing result {path}; run the grid to completion first")
            with open(path, "r", encoding="utf-8") as fh:
                metrics = json.load(fh)
            rows.append({"mode": spec.mode, "backbone": spec.backbone, "d": spec.d,
                         "mean_dsc": metrics["mean_foreground_dsc"]})
    table = analysis.aggregate_results(rows, expected_cells=expected)
    out_path = os.path.join(out_dir, "aggregate.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(analysis.aggregate_table_lines(table)) + "\n")
    return out_path


# ---------------------------------------------------------------------------
# rendering


def render_slice(image_slice: np.ndarray, label_slice: np.ndarray) -> bytes:
    """Encode a grayscale slice with 50% label-color overlay as binary PPM."""
    if image_slice.shape != label_slice.shape:
        raise ValueError("image and label slices must share a shape")
    lo, hi = float(image_slice.min()), float(image_slice.max())
    gray = np.zeros_like(image_slice, dtype=np.float64) if hi <= lo \
        else (image_slice - lo) / (hi - lo)
    rgb = np.repeat((gray * 255.0)[:, :, None], 3, axis=2)
    for k in np.unique(label_slice):
        if k == 0:
            continue
        color = np.array(_PALETTE[(int(k) - 1) % len(_PALETTE)], dtype=np.float64)
        mask = label_slice == k
        rgb[mask] = 0.5 * rgb[mask] + 0.5 * color
    h, w = rgb.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.round().astype(np.uint8).tobytes()


# ---------------------------------------------------------------------------
# verbs


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out if args.out else cfg.output_dir
    path = run_grid(cfg, out_dir)
    print(f"aggregate table: {path}")
    return 0


def _cmd_aggregate(args) -> int:
    path = write_aggregate(args.dir)
    with open(path, "r", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def _cmd_profile(args) -> int:
    cfg = load_config(args.config)
    volumes = load_source(cfg.source)
    k, c = int(volumes[0].labels.max() + 1), volumes[0].image.shape[-1]
    in_plane = volumes[0].image.shape[:2]
    lines = ["mode,backbone,d,parameter_count,flop_count,activation_memory_bytes,"
             "seconds_per_training_step,seconds_per_prediction"]
    for spec in expand_grid(cfg.grid, in_channels=c, num_classes=k):
        model = assemble_model(spec, seed=0)
        samples = build_samples(volumes[:1], spec)[:cfg.train.batch_size]
        x = np.stack([s.stack for s in samples])
        y = np.eye(k)[np.stack([s.target for s in samples]).astype(np.int64)]
        report = analysis.cost_report(model, in_plane, timing_batch=(x, y),
                                      loss_fn=cfg.train.loss_fn)
        lines.append(f"{spec.mode},{spec.backbone},{spec.d},{report.parameter_count},"
                     f"{report.flop_count},{report.activation_memory_bytes},"
                     f"{report.seconds_per_training_step:.4f},"
                     f"{report.seconds_per_prediction:.4f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_features(args) -> int:
    stems = volio.list_case_stems(args.dir)
    labels = [volio.load_case(args.dir, s).labels for s in stems]
    num_classes = int(max(v.max() for v in labels)) + 1
    if num_classes < 2:
        raise ValueError("no foreground classes present in the volume directory")
    rows = analysis.class_feature_table(labels, num_classes)
    lines = ["class_id,depth,size_fraction,displacement"]
    for r in rows:
        lines.append(f"{r['class_id']},{r['depth']!r},{r['size_fraction']!r},"
                     f"{r['displacement']!r}")
    for agg_name, fn in (("min", min), ("mean", lambda v: sum(v) / len(v)), ("max", max)):
        lines.append(f"{agg_name},{fn([r['depth'] for r in rows])!r},"
                     f"{fn([r['size_fraction'] for r in rows])!r},"
                     f"{fn([r['displacement'] for r in rows])!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_render(args) -> int:
    directory, stem = os.path.split(args.case)
    volume = volio.load_case(directory or ".", stem)
    depth = volume.labels.shape[2]
    if not 0 <= args.slice < depth:
        raise ValueError(f"slice {args.slice} out of range for depth {depth}")
    data = render_slice(volume.image[:, :, args.slice, 0],
                        volume.labels[:, :, args.slice])
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(f"wrote {args.out}")
    return 0


def _cmd_generate(args) -> int:
    presets = dataset_presets()
    if args.preset not in presets:
        raise ValueError(f"unknown preset {args.preset!r}"
                         f" (available: {', '.join(sorted(presets))})")
    os.makedirs(args.dir, exist_ok=True)
    for volume in generate_cohort(presets[args.preset], args.count, seed=args.seed):
        volio.save_case(args.dir, volume)
        print(f"wrote {volume.patient_id}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sliceseg",
                                     description="Volumetric segmentation laboratory")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="train every grid cell of a config")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("aggregate", help="rebuild aggregate.csv from a run directory")
    p.add_argument("dir")
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("profile", help="cost reports for a config, no training")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_profile)

    p = sub.add_parser("features", help="structure features of a volume directory")
    p.add_argument("dir")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_features)

    p = sub.add_parser("render", help="write a PPM slice image with label overlay")
    p.add_argument("case", help="case path without suffix, e.g. data/case000")
    p.add_argument("slice", type=int)
    p.add_argument("out")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("generate", help="write a phantom cohort to disk")
    p.add_argument("preset")
    p.add_argument("count", type=int)
    p.add_argument("dir")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_generate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
