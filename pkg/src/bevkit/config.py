"""Run configuration: one TOML file, flag overrides win.

The TOML sections mirror the sub-configs (``[grid]``, ``[smoothing]``,
``[loss]``, ``[aug]``, plus ``[aug.samples_per_class]``); top-level keys
name the dataset root, split file, output root, and worker count. Every
key is optional; omitted values fall back to the library defaults.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cmaug import AugConfig
from .distill import LossConfig
from .occupancy import GridConfig, SmoothingConfig


@dataclass(frozen=True)
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    smoothing: SmoothingConfig = field(default_factory=SmoothingConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    dataset_root: Path = Path(".")
    split: Path | None = None
    output_root: Path = Path("out")
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")


def _pair(value) -> tuple:
    seq = tuple(value)
    if len(seq) != 2:
        raise ValueError(f"expected a 2-element list, got {value!r}")
    return seq


def _triple(value) -> tuple:
    seq = tuple(value)
    if len(seq) != 3:
        raise ValueError(f"expected a 3-element list, got {value!r}")
    return seq


def _build(cls, table: dict, converters: dict):
    kwargs = {}
    for key, raw in table.items():
        if key not in converters:
            raise ValueError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = converters[key](raw)
    return cls(**kwargs)


def load_config(path=None) -> RunConfig:
    """Load a TOML run configuration; ``None`` yields pure defaults."""
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    grid = _build(
        GridConfig,
        data.get("grid", {}),
        {
            "x_range": _pair,
            "y_range": _pair,
            "z_range": _pair,
            "fine_voxel": _triple,
            "bev_downsample": int,
        },
    )
    smoothing = _build(
        SmoothingConfig,
        data.get("smoothing", {}),
        {"kernel_size": int, "sigma": float},
    )
    loss = _build(
        LossConfig,
        data.get("loss", {}),
        {
            "qfl_beta": float,
            "smooth_l1_beta": float,
            "head_weights": _triple,
            "top_weights": _pair,
            "reduction": str,
        },
    )
    aug_table = dict(data.get("aug", {}))
    samples = {
        str(k): int(v) for k, v in aug_table.pop("samples_per_class", {}).items()
    }
    aug = _build(
        AugConfig,
        aug_table,
        {
            "oais_threshold": float,
            "bev_iou_threshold": float,
            "min_patch_px": lambda v: tuple(int(x) for x in _pair(v)),
            "min_points": int,
            "pseudo_score_min": float,
            "remove_swallowed_points": bool,
            "seed": int,
        },
    )
    aug = replace(aug, samples_per_class=samples)
    return RunConfig(
        grid=grid,
        smoothing=smoothing,
        loss=loss,
        aug=aug,
        dataset_root=Path(data.get("dataset_root", ".")),
        split=Path(data["split"]) if "split" in data else None,
        output_root=Path(data.get("output_root", "out")),
        workers=int(data.get("workers", 1)),
    )
