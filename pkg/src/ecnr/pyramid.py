"""Multiscale targets, block partitioning, and effective-block filtering.

Scale ``s`` (the coarsest) encodes downsampled content; every finer scale
``i < s`` encodes the residual against the upsampled reconstruction of scale
``i + 1``.  Each scale's target is tiled by identical 3D spatial blocks, one
block per timestep cell, enumerated in (t, z, y, x) raster order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import Volume4D, downsample


@dataclass(frozen=True)
class PyramidConfig:
    scales: int
    block_dims: tuple[int, int, int]  # (xb, yb, zb)
    residual_threshold: float = 1e-4

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError(f"scales must be >= 1, got {self.scales}")
        if min(self.block_dims) < 1:
            raise ValueError(f"block dims must be positive, got {self.block_dims}")
        if self.residual_threshold < 0:
            raise ValueError("residual threshold must be non-negative")

    def validate_dims(self, dims: tuple[int, int, int, int]) -> None:
        """Every scale's grid must divide evenly into blocks (no padding)."""
        x, y, z, t = dims
        xb, yb, zb = self.block_dims
        for i in range(1, self.scales + 1):
            f = 2 ** (i - 1)
            for name, extent, unit in (
                ("x", x, f * xb),
                ("y", y, f * yb),
                ("z", z, f * zb),
                ("t", t, f),
            ):
                if extent % unit != 0:
                    raise ValueError(
                        f"axis {name} extent {extent} is not divisible by "
                        f"{unit} (scale {i})"
                    )


@dataclass(frozen=True)
class BlockSpec:
    scale: int
    origin: tuple[int, int, int, int]  # (x, y, z, t) voxel offsets in the scale grid
    linear_id: int


@dataclass
class BlockGrid:
    scale: int
    counts: tuple[int, int, int, int]  # (nx, ny, nz, nt)
    block_dims: tuple[int, int, int]
    effective: np.ndarray = field(default=None)  # bool per linear id

    def __post_init__(self):
        if self.effective is None:
            self.effective = np.ones(self.n_blocks, dtype=bool)

    @property
    def n_blocks(self) -> int:
        nx, ny, nz, nt = self.counts
        return nx * ny * nz * nt

    @property
    def n_effective(self) -> int:
        return int(self.effective.sum())

    @property
    def effective_ids(self) -> np.ndarray:
        return np.flatnonzero(self.effective)

    def spec(self, linear_id: int) -> BlockSpec:
        nx, ny, nz, nt = self.counts
        xb, yb, zb = self.block_dims
        xi = linear_id % nx
        yi = (linear_id // nx) % ny
        zi = (linear_id // (nx * ny)) % nz
        ti = linear_id // (nx * ny * nz)
        return BlockSpec(self.scale, (xi * xb, yi * yb, zi * zb, ti), linear_id)

    @property
    def specs(self) -> list[BlockSpec]:
        return [self.spec(i) for i in range(self.n_blocks)]


def scale_dims(dims: tuple[int, int, int, int], scale: int) -> tuple[int, int, int, int]:
    f = 2 ** (scale - 1)
    return tuple(d // f for d in dims)


def build_targets(vol: Volume4D, cfg: PyramidConfig) -> list[Volume4D]:
    """Ground-truth volume at each scale; index k holds scale k+1 (finest first).

    Only the coarsest entry is encoded directly.  Finer scales encode
    residuals computed during encoding against the *reconstructed* coarser
    volume, so they are not materialized here.
    """
    cfg.validate_dims(vol.dims)
    levels = [vol]
    for _ in range(cfg.scales - 1):
        levels.append(downsample(levels[-1]))
    return levels


def partition(scale: int, cfg: PyramidConfig, dims: tuple[int, int, int, int]) -> BlockGrid:
    """Tile the scale's grid with blocks; all blocks start effective."""
    cfg.validate_dims(dims)
    sx, sy, sz, st = scale_dims(dims, scale)
    xb, yb, zb = cfg.block_dims
    counts = (sx // xb, sy // yb, sz // zb, st)
    return BlockGrid(scale=scale, counts=counts, block_dims=cfg.block_dims)


def block_norms(target: Volume4D, grid: BlockGrid) -> np.ndarray:
    """L2 norm of each block's voxels, in linear-id order."""
    nx, ny, nz, nt = grid.counts
    xb, yb, zb = grid.block_dims
    a = target.data.reshape(nt, nz, zb, ny, yb, nx, xb)
    sq = (a * a).sum(axis=(2, 4, 6))  # (nt, nz, ny, nx)
    return np.sqrt(sq).reshape(-1)


def filter_effective(
    grid: BlockGrid, target: Volume4D, tau: float, *, coarsest: bool = False
) -> BlockGrid:
    """Keep blocks whose residual L2 norm reaches tau; coarsest keeps all."""
    if coarsest:
        eff = np.ones(grid.n_blocks, dtype=bool)
    else:
        eff = block_norms(target, grid) >= tau
    return BlockGrid(grid.scale, grid.counts, grid.block_dims, eff)


def _block_slices(grid: BlockGrid, spec: BlockSpec):
    xb, yb, zb = grid.block_dims
    x0, y0, z0, ti = spec.origin
    return ti, slice(z0, z0 + zb), slice(y0, y0 + yb), slice(x0, x0 + xb)


def extract_block(target: Volume4D, grid: BlockGrid, spec: BlockSpec) -> np.ndarray:
    """Copy one block's voxels as a (zb, yb, xb) array."""
    t, zs, ys, xs = _block_slices(grid, spec)
    tn, zn, yn, xn = target.data.shape
    if not (0 <= t < tn and zs.stop <= zn and ys.stop <= yn and xs.stop <= xn):
        raise ValueError(f"block {spec.linear_id} origin {spec.origin} out of range")
    return target.data[t, zs, ys, xs].copy()


def scatter_block(vol: Volume4D, grid: BlockGrid, spec: BlockSpec, voxels: np.ndarray) -> None:
    """Write one block's voxels back; inverse of :func:`extract_block`."""
    xb, yb, zb = grid.block_dims
    t, zs, ys, xs = _block_slices(grid, spec)
    vol.data[t, zs, ys, xs] = voxels.reshape(zb, yb, xb)


def gather_effective_blocks(target: Volume4D, grid: BlockGrid) -> np.ndarray:
    """All effective blocks as a (n_effective, zb*yb*xb) matrix, raster order."""
    nx, ny, nz, nt = grid.counts
    xb, yb, zb = grid.block_dims
    a = target.data.reshape(nt, nz, zb, ny, yb, nx, xb)
    # -> (nt, nz, ny, nx, zb, yb, xb), flattened block-major
    blocks = a.transpose(0, 1, 3, 5, 2, 4, 6).reshape(grid.n_blocks, zb * yb * xb)
    return blocks[grid.effective]


def scatter_effective_blocks(
    grid: BlockGrid,
    dims: tuple[int, int, int, int],
    values: np.ndarray,
) -> Volume4D:
    """Place per-block voxel rows into a zero volume; discarded blocks stay 0."""
    nx, ny, nz, nt = grid.counts
    xb, yb, zb = grid.block_dims
    x, y, z, t = dims
    full = np.zeros((grid.n_blocks, zb * yb * xb))
    full[grid.effective] = values
    a = full.reshape(nt, nz, ny, nx, zb, yb, xb).transpose(0, 1, 4, 2, 5, 3, 6)
    return Volume4D(a.reshape(t, z, y, x))
