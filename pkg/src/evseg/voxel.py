"""Discretized event volume with a temporal hat kernel."""
from dataclasses import dataclass

import numpy as np

from .events import EventSlice, SensorGeometry
from .tensorio import load_tensor, save_tensor

DEFAULT_BINS = 5


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    bins: int
    geometry: SensorGeometry
    values: np.ndarray  # (B, H, W) float64

    def __post_init__(self):
        if self.values.shape != (self.bins, self.geometry.height, self.geometry.width):
            raise ValueError(f"voxel values shape {self.values.shape} does not match "
                             f"({self.bins}, {self.geometry.height}, {self.geometry.width})")


def build_voxel_grid(s: EventSlice, bins: int = DEFAULT_BINS) -> VoxelGrid:
    """Accumulate signed events into ``bins`` temporal bins.

    Timestamps are mapped linearly onto [0, bins - 1]; each event splits its
    polarity between the two neighbouring bins with weights max(0, 1 - |dt|).
    Integer pixel coordinates make the spatial kernels a delta.
    """
    bins = int(bins)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(s) == 0:
        raise ValueError("cannot voxelize an empty event slice")
    H, W = s.geometry.shape
    span = int(s.t[-1]) - int(s.t[0])
    if span == 0 or bins == 1:
        ts = np.zeros(len(s))
    else:
        ts = (bins - 1) * (s.t - s.t[0]).astype(np.float64) / span
    lo = np.floor(ts).astype(np.int64)
    frac = ts - lo
    pol = s.p.astype(np.float64)
    pix = s.y * W + s.x

    grid = np.zeros(bins * H * W)
    ok = lo < bins
    grid += np.bincount(lo[ok] * H * W + pix[ok], weights=pol[ok] * (1.0 - frac[ok]),
                        minlength=bins * H * W)
    hi = lo + 1
    ok = hi < bins
    grid += np.bincount(hi[ok] * H * W + pix[ok], weights=pol[ok] * frac[ok],
                        minlength=bins * H * W)
    return VoxelGrid(bins, s.geometry, grid.reshape(bins, H, W))


def voxel_mass(grid: VoxelGrid) -> float:
    return float(np.sum(grid.values))


def save_voxel_grid(grid: VoxelGrid, path):
    save_tensor(grid.values, path)


def load_voxel_grid(path) -> VoxelGrid:
    v = load_tensor(path)
    if v.ndim != 3:
        raise ValueError(f"{path}: expected a (B, H, W) tensor, got shape {v.shape}")
    return VoxelGrid(v.shape[0], SensorGeometry(v.shape[2], v.shape[1]), v.astype(np.float64))
