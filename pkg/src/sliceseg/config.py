"""Experiment configuration: a strict JSON schema for grid runs.

Unknown keys anywhere in the file are hard errors carrying the offending
field path, so typos in grid definitions cannot silently change a run.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .data import AugmentParams
from .models import BACKBONES, MODES, ModelSpec
from .training import TrainConfig

NORMALIZATIONS = ("zscore", "ct", "none")


class ConfigError(ValueError):
    """Invalid configuration; message includes the field path."""


def _check_keys(d: dict, allowed, path: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key '{path}.{unknown[0]}'"
                          f" (allowed: {', '.join(sorted(allowed))})")


def _require(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigError(f"missing required key '{path}.{key}'")
    return d[key]


def _as_int(v, path: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"'{path}' must be an integer, got {v!r}")
    return v


def _as_float(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"'{path}' must be a number, got {v!r}")
    return float(v)


def _as_bool(v, path: str) -> bool:
    if not isinstance(v, bool):
        raise ConfigError(f"'{path}' must be true or false, got {v!r}")
    return v


def _as_str(v, path: str) -> str:
    if not isinstance(v, str):
        raise ConfigError(f"'{path}' must be a string, got {v!r}")
    return v


def _as_pair(v, path: str) -> tuple[float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigError(f"'{path}' must be a 2-element list, got {v!r}")
    return (_as_float(v[0], path), _as_float(v[1], path))


@dataclass(frozen=True)
class SourceConfig:
    """Where volumes come from: a named phantom preset or a directory of
    serialized cases."""
    kind: str = "phantom"
    preset: str = "organ_and_lesion"
    num_volumes: int = 8
    seed: int = 0
    directory: str = ""
    normalization: str = "zscore"

    def __post_init__(self):
        if self.kind not in ("phantom", "volumes"):
            raise ConfigError(f"'source.kind' must be phantom or volumes, got {self.kind!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"'source.normalization' must be one of {NORMALIZATIONS}")
        if self.kind == "phantom" and self.num_volumes < 1:
            raise ConfigError("'source.num_volumes' must be positive")
        if self.kind == "volumes" and not self.directory:
            raise ConfigError("'source.directory' required when kind is volumes")


@dataclass(frozen=True)
class GridConfig:
    modes: tuple[str, ...] = tuple(MODES)
    backbones: tuple[str, ...] = ("unet",)
    d_values: tuple[int, ...] = (3, 5, 7, 9, 11, 13)
    base_filters: int = 16
    patch_depth: int = 16

    def __post_init__(self):
        if not self.modes:
            raise ConfigError("'grid.modes' must not be empty")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"'grid.modes' entry {m!r} not in {MODES}")
        for b in self.backbones:
            if b not in BACKBONES:
                raise ConfigError(f"'grid.backbones' entry {b!r} not in {BACKBONES}")
        if not self.backbones:
            raise ConfigError("'grid.backbones' must not be empty")
        needs_d = any(m in ("proposed", "channel_based") for m in self.modes)
        if needs_d and not self.d_values:
            raise ConfigError("'grid.d_values' must not be empty for pseudo-3D modes")


@dataclass(frozen=True)
class FoldConfig:
    count: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.count < 2:
            raise ConfigError("'folds.count' must be at least 2")


@dataclass(frozen=True)
class ExperimentConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: FoldConfig = field(default_factory=FoldConfig)
    output_dir: str = "runs"


# ---------------------------------------------------------------------------
# dict <-> dataclass, with path-carrying validation

_SOURCE_KEYS = ("kind", "preset", "num_volumes", "seed", "directory", "normalization")
_GRID_KEYS = ("modes", "backbones", "d_values", "base_filters", "patch_depth")
_FOLD_KEYS = ("count", "seed")
_AUGMENT_KEYS = ("probability", "enable_flip", "rotation_degrees", "shear_range",
                 "zoom_range", "elastic_sigma", "elastic_alpha")
_TRAIN_KEYS = ("initial_lr", "lr_drop_factor", "patience_epochs", "early_stop_epochs",
               "max_epochs", "min_improvement", "l2_coefficient", "batch_size",
               "seed", "loss", "augment")
_TOP_KEYS = ("source", "grid", "train", "folds", "output_dir")


def _source_from_dict(d: dict) -> SourceConfig:
    _check_keys(d, _SOURCE_KEYS, "source")
    kw = {}
    for key in _SOURCE_KEYS:
        if key not in d:
            continue
        if key in ("num_volumes", "seed"):
            kw[key] = _as_int(d[key], f"source.{key}")
        else:
            kw[key] = _as_str(d[key], f"source.{key}")
    return SourceConfig(**kw)


def _grid_from_dict(d: dict) -> GridConfig:
    _check_keys(d, _GRID_KEYS, "grid")
    kw = {}
    if "modes" in d:
        kw["modes"] = tuple(_as_str(m, "grid.modes") for m in d["modes"])
    if "backbones" in d:
        kw["backbones"] = tuple(_as_str(b, "grid.backbones") for b in d["backbones"])
    if "d_values" in d:
        kw["d_values"] = tuple(_as_int(v, "grid.d_values") for v in d["d_values"])
    for key in ("base_filters", "patch_depth"):
        if key in d:
            kw[key] = _as_int(d[key], f"grid.{key}")
    return GridConfig(**kw)


def _augment_from_dict(d: dict) -> AugmentParams:
    _check_keys(d, _AUGMENT_KEYS, "train.augment")
    kw = {}
    if "probability" in d:
        kw["probability"] = _as_float(d["probability"], "train.augment.probability")
    if "enable_flip" in d:
        kw["enable_flip"] = _as_bool(d["enable_flip"], "train.augment.enable_flip")
    for key in ("rotation_degrees", "shear_range", "zoom_range"):
        if key in d:
            kw[key] = _as_pair(d[key], f"train.augment.{key}")
    for key in ("elastic_sigma", "elastic_alpha"):
        if key in d:
            kw[key] = _as_float(d[key], f"train.augment.{key}")
    return AugmentParams(**kw)


def _train_from_dict(d: dict) -> TrainConfig:
    _check_keys(d, _TRAIN_KEYS, "train")
    kw = {}
    for key in ("initial_lr", "lr_drop_factor", "min_improvement", "l2_coefficient"):
        if key in d:
            kw[key] = _as_float(d[key], f"train.{key}")
    for key in ("patience_epochs", "early_stop_epochs", "max_epochs", "batch_size", "seed"):
        if key in d:
            kw[key] = _as_int(d[key], f"train.{key}")
    if "loss" in d:
        kw["loss"] = _as_str(d["loss"], "train.loss")
    if "augment" in d:
        if not isinstance(d["augment"], dict):
            raise ConfigError("'train.augment' must be an object")
        kw["augment"] = _augment_from_dict(d["augment"])
    try:
        return TrainConfig(**kw)
    except ValueError as e:
        raise ConfigError(f"'train': {e}") from e


def _folds_from_dict(d: dict) -> FoldConfig:
    _check_keys(d, _FOLD_KEYS, "folds")
    kw = {key: _as_int(d[key], f"folds.{key}") for key in _FOLD_KEYS if key in d}
    return FoldConfig(**kw)


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("top-level config must be an object")
    _check_keys(d, _TOP_KEYS, "config")
    kw = {}
    for key, parse in (("source", _source_from_dict), ("grid", _grid_from_dict),
                       ("train", _train_from_dict), ("folds", _folds_from_dict)):
        if key in d:
            if not isinstance(d[key], dict):
                raise ConfigError(f"'{key}' must be an object")
            kw[key] = parse(d[key])
    if "output_dir" in d:
        kw["output_dir"] = _as_str(d["output_dir"], "output_dir")
    return ExperimentConfig(**kw)


def config_to_dict(c: ExperimentConfig) -> dict:
    return {
        "source": {
            "kind": c.source.kind, "preset": c.source.preset,
            "num_volumes": c.source.num_volumes, "seed": c.source.seed,
            "directory": c.source.directory, "normalization": c.source.normalization,
        },
        "grid": {
            "modes": list(c.grid.modes), "backbones": list(c.grid.backbones),
            "d_values": list(c.grid.d_values), "base_filters": c.grid.base_filters,
            "patch_depth": c.grid.patch_depth,
        },
        "train": {
            "initial_lr": c.train.initial_lr, "lr_drop_factor": c.train.lr_drop_factor,
            "patience_epochs": c.train.patience_epochs,
            "early_stop_epochs": c.train.early_stop_epochs,
            "max_epochs": c.train.max_epochs, "min_improvement": c.train.min_improvement,
            "l2_coefficient": c.train.l2_coefficient, "batch_size": c.train.batch_size,
            "seed": c.train.seed, "loss": c.train.loss,
            "augment": {
                "probability": c.train.augment.probability,
                "enable_flip": c.train.augment.enable_flip,
                "rotation_degrees": list(c.train.augment.rotation_degrees),
                "shear_range": list(c.train.augment.shear_range),
                "zoom_range": list(c.train.augment.zoom_range),
                "elastic_sigma": c.train.augment.elastic_sigma,
                "elastic_alpha": c.train.augment.elastic_alpha,
            },
        },
        "folds": {"count": c.folds.count, "seed": c.folds.seed},
        "output_dir": c.output_dir,
    }


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return config_from_dict(raw)


def save_config(c: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(c), fh, indent=2, sort_keys=True)
        fh.write("\n")


def expand_grid(grid: GridConfig, in_channels: int, num_classes: int) -> list[ModelSpec]:
    """Expand the grid to concrete model specs, one per experiment cell.

    Pseudo-3D modes get one cell per d value; the end-to-end modes
    contribute a single cell each (d=1 and d=patch_depth). The default
    grid over one backbone yields 14 cells.
    """
    cells = []
    for backbone in grid.backbones:
        for mode in grid.modes:
            if mode == "end2end_2d":
                ds = [1]
            elif mode == "end2end_3d":
                ds = [grid.patch_depth]
            else:
                ds = list(grid.d_values)
            for d in ds:
                cells.append(ModelSpec(mode=mode, backbone=backbone, d=d,
                                       in_channels=in_channels, num_classes=num_classes,
                                       base_filters=grid.base_filters))
    return cells
