"""BEV occupancy masks from LiDAR point clouds, plus Gaussian smoothing.

A mask cell is active iff at least one point falls anywhere in the cell's
vertical column of the configured 3D range. Cells are the BEV-downsampled
footprint of a fine voxel grid; points are binned by fine-voxel index and
integer-divided by the downsample factor, which is exactly equivalent to
building the fine grid and collapsing it (the fine-grid path survives as
the test oracle) without ever materializing tens of millions of voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d


class GridConfigError(ValueError):
    """Grid ranges, voxel sizes, and downsample factor are inconsistent."""


@dataclass(frozen=True)
class GridConfig:
    """Voxelization ranges and resolutions.

    ``x_range`` is meters forward, ``y_range`` meters lateral, ``z_range``
    meters vertical (all LiDAR frame); ``fine_voxel`` the fine voxel edge
    lengths; ``bev_downsample`` how many fine cells collapse into one BEV
    cell per horizontal axis.
    """

    x_range: tuple[float, float] = (2.0, 46.8)
    y_range: tuple[float, float] = (-30.08, 30.08)
    z_range: tuple[float, float] = (-3.0, 1.0)
    fine_voxel: tuple[float, float, float] = (0.04, 0.04, 0.1)
    bev_downsample: int = 8

    def __post_init__(self):
        for name, (lo, hi) in (
            ("x", self.x_range), ("y", self.y_range), ("z", self.z_range)
        ):
            if not hi > lo:
                raise GridConfigError(f"{name}_range max must exceed min, got ({lo}, {hi})")
        if min(self.fine_voxel) <= 0:
            raise GridConfigError(f"voxel dims must be positive, got {self.fine_voxel}")
        if self.bev_downsample < 1:
            raise GridConfigError(
                f"bev_downsample must be >= 1, got {self.bev_downsample}"
            )

    @property
    def bev_cell(self) -> tuple[float, float]:
        return (
            self.fine_voxel[0] * self.bev_downsample,
            self.fine_voxel[1] * self.bev_downsample,
        )


@dataclass(frozen=True)
class BevDims:
    """Derived grid shape: BEV cells, depth bins, and fine-grid counts."""

    w_bev: int
    h_bev: int
    d: int
    w_fine: int
    h_fine: int


def _exact_div(span: float, step: float, axis: str) -> int:
    ratio = span / step
    n = round(ratio)
    if n <= 0 or abs(ratio - n) > 1e-6:
        raise GridConfigError(
            f"{axis} span {span} is not an integral multiple of its cell size {step}"
        )
    return n


def derive_bev_dims(config: GridConfig) -> BevDims:
    """Derive (W_BEV, H_BEV, D) and the fine counts from a grid config.

    Errors name the offending axis if a range is not an integral number of
    voxels, or the horizontal counts do not divide by the downsample factor.
    """
    w_fine = _exact_div(config.x_range[1] - config.x_range[0], config.fine_voxel[0], "x")
    h_fine = _exact_div(config.y_range[1] - config.y_range[0], config.fine_voxel[1], "y")
    d = _exact_div(config.z_range[1] - config.z_range[0], config.fine_voxel[2], "z")
    ds = config.bev_downsample
    if w_fine % ds != 0:
        raise GridConfigError(f"x: {w_fine} fine cells not divisible by downsample {ds}")
    if h_fine % ds != 0:
        raise GridConfigError(f"y: {h_fine} fine cells not divisible by downsample {ds}")
    return BevDims(w_bev=w_fine // ds, h_bev=h_fine // ds, d=d, w_fine=w_fine, h_fine=h_fine)


def build_occupancy_mask(cloud: np.ndarray, config: GridConfig) -> np.ndarray:
    """Binary (W_BEV, H_BEV) float32 mask of point-occupied BEV columns.

    Bins are half-open: a coordinate exactly on a range maximum falls
    outside. Points outside the configured ranges are ignored. The result
    is independent of point order and duplicates.
    """
    dims = derive_bev_dims(config)
    mask = np.zeros((dims.w_bev, dims.h_bev), dtype=np.float32)
    cloud = np.asarray(cloud)
    if cloud.size == 0:
        return mask
    xyz = cloud[:, :3].astype(np.float64)
    vx, vy, vz = config.fine_voxel
    # Fine-voxel index first, then integer division: bit-identical to
    # binning on the fine grid and collapsing.
    xi = np.floor((xyz[:, 0] - config.x_range[0]) / vx).astype(np.int64)
    yi = np.floor((xyz[:, 1] - config.y_range[0]) / vy).astype(np.int64)
    zi = np.floor((xyz[:, 2] - config.z_range[0]) / vz).astype(np.int64)
    ok = (
        (xi >= 0) & (xi < dims.w_fine)
        & (yi >= 0) & (yi < dims.h_fine)
        & (zi >= 0) & (zi < dims.d)
    )
    ds = config.bev_downsample
    mask[xi[ok] // ds, yi[ok] // ds] = 1.0
    return mask


@dataclass(frozen=True)
class SmoothingConfig:
    """Gaussian kernel shape: odd ``kernel_size``; ``sigma`` in grid units.

    By default sigma follows the kernel size as (kernel_size - 1) / 4.
    """

    kernel_size: int = 5
    sigma: float | None = None

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")
        if self.sigma is not None and not (self.sigma > 0 and np.isfinite(self.sigma)):
            raise ValueError(f"sigma must be finite and positive, got {self.sigma}")

    @property
    def effective_sigma(self) -> float:
        if self.sigma is not None:
            return self.sigma
        return max((self.kernel_size - 1) / 4.0, 1e-12)


def gaussian_kernel(cfg: SmoothingConfig) -> np.ndarray:
    """Centered k x k Gaussian weights, normalized to sum exactly 1."""
    k = cfg.kernel_size
    sigma = cfg.effective_sigma
    offsets = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    di, dj = np.meshgrid(offsets, offsets, indexing="ij")
    weights = np.exp(-(di**2 + dj**2) / (2.0 * sigma**2))
    return weights / weights.sum()


def smooth_mask(mask: np.ndarray, cfg: SmoothingConfig) -> np.ndarray:
    """Convolve a binary mask with the normalized kernel, zero-padded.

    Output dims equal input dims and values stay in [0, 1]. Zero padding is
    the faithful boundary condition: outside the configured range there are
    no points by definition.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    smoothed = convolve2d(mask, gaussian_kernel(cfg), mode="same", boundary="fill")
    return np.clip(smoothed, 0.0, 1.0)
