"""Grid containers shared by the voxelization, dataset and network stages.

Grid convention: n points per axis spanning a cube of the given side length,
point (i, j, k) at (i*h, j*h, k*h) with spacing h = side/(n-1), so point 0
sits at the cube corner. Arrays are indexed data[ix, iy, iz, channel].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# input channel order of a Sample
CH_SDF = 0  # signed distance, scaled
CH_ZERO = 1  # zero-displacement marker, scaled
CH_UVIS = slice(2, 5)  # visible displacement x/y/z, meters


@dataclass
class Grid3:
    """Regular n^3 sampling of a cube, c scalars per point."""

    n: int
    side_length: float
    data: np.ndarray  # (n, n, n, c)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        expected = (self.n, self.n, self.n)
        if self.n < 2 or self.side_length <= 0 or self.data.shape[:3] != expected:
            raise ValueError(
                f"bad grid: n={self.n} side={self.side_length} data={self.data.shape}"
            )
        if self.data.ndim == 3:
            self.data = self.data[..., None]

    @property
    def spacing(self) -> float:
        return self.side_length / (self.n - 1)

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def points(self) -> np.ndarray:
        """Grid point coordinates, (n, n, n, 3)."""
        ax = np.linspace(0.0, self.side_length, self.n)
        gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def grid_axes(n: int, side_length: float) -> np.ndarray:
    return np.linspace(0.0, side_length, n)


def grid_points(n: int, side_length: float) -> np.ndarray:
    """Flat (n^3, 3) coordinates, x index varying slowest (ix, iy, iz order)."""
    ax = grid_axes(n, side_length)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


@dataclass
class SampleMeta:
    seed: int
    visible_fraction: float
    max_target_magnitude: float


@dataclass
class Sample:
    """One training/evaluation item.

    input channels: [s*scale, z*scale, u_vis x/y/z]; target: u_tar x/y/z.
    """

    input: Grid3  # 5 channels, float32
    target: Grid3  # 3 channels, float32
    meta: SampleMeta

    def __post_init__(self):
        if (
            self.input.n != self.target.n
            or self.input.side_length != self.target.side_length
        ):
            raise ValueError("input and target grids must share geometry")

    @property
    def n(self) -> int:
        return self.input.n

    @property
    def side_length(self) -> float:
        return self.input.side_length

    def organ_mask(self) -> np.ndarray:
        """True inside the organ (s <= 0); the scale factor keeps the sign."""
        return self.input.data[..., CH_SDF] <= 0.0
