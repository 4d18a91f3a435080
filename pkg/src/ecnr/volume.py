"""Dense 4D scalar fields: raw I/O, normalization, resampling, residual math.

Storage and interchange use little-endian float32 with x varying fastest
(flat index ``((t*z + zi)*y + yi)*x + xi``).  In memory the voxel array is
held as float64, shaped ``(t, z, y, x)`` in C order, which matches that flat
layout.  Keeping the pipeline in float64 makes the subtract/upsample/add
chain exactly invertible on float32-sourced data; float32 arithmetic is not.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

_AXIS_NAMES = ("x", "y", "z", "t")
# array axis for each logical axis name; data is (t, z, y, x)
_AXIS_INDEX = {"x": 3, "y": 2, "z": 1, "t": 0}


@dataclass(frozen=True)
class ValueRange:
    """Original value range of a normalized volume.

    ``degenerate`` marks a constant input volume: its stored range is
    ``(lo, lo + 1)`` so ``lo < hi`` holds, and denormalization must emit
    ``lo`` everywhere instead of applying the affine map.
    """

    lo: float
    hi: float
    degenerate: bool = False

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"value range requires lo < hi, got ({self.lo}, {self.hi})")


class Volume4D:
    """A dense scalar field over an (x, y, z, t) grid."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        if data.ndim != 4:
            raise ValueError(f"expected a 4D array (t, z, y, x), got shape {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float64)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(x, y, z, t)"""
        t, z, y, x = self.data.shape
        return (x, y, z, t)

    @property
    def nvox(self) -> int:
        return self.data.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Volume4D) and np.array_equal(self.data, other.data)

    def __repr__(self) -> str:
        return f"Volume4D(dims={self.dims})"

    @classmethod
    def zeros(cls, dims: tuple[int, int, int, int]) -> "Volume4D":
        x, y, z, t = dims
        return cls(np.zeros((t, z, y, x)))


def load_raw(path, dims: tuple[int, int, int, int]) -> Volume4D:
    """Read a headerless little-endian float32 volume of the given dims."""
    x, y, z, t = dims
    if min(dims) < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    expected = x * y * z * t * 4
    actual = os.path.getsize(path)
    if actual != expected:
        raise ValueError(
            f"{path}: file is {actual} bytes but dims {x}x{y}x{z}x{t} require {expected}"
        )
    raw = np.fromfile(path, dtype="<f4")
    finite = np.isfinite(raw)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise ValueError(f"{path}: non-finite value {raw[bad]} at flat index {bad}")
    return Volume4D(raw.reshape(t, z, y, x).astype(np.float64))


def save_raw(vol: Volume4D, path) -> None:
    """Write the volume as headerless little-endian float32."""
    vol.data.astype("<f4").tofile(path)


def normalize(vol: Volume4D) -> tuple[Volume4D, ValueRange]:
    """Map values affinely onto [-1, 1]; returns the volume and its range.

    A constant volume maps to all zeros with range ``(lo, lo + 1)`` flagged
    degenerate.
    """
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi == lo:
        return Volume4D(np.zeros_like(vol.data)), ValueRange(lo, lo + 1.0, degenerate=True)
    out = 2.0 * (vol.data - lo) / (hi - lo) - 1.0
    return Volume4D(out), ValueRange(lo, hi)


def denormalize(vol: Volume4D, vrange: ValueRange) -> Volume4D:
    """Invert :func:`normalize` using the stored range."""
    if vrange.degenerate:
        return Volume4D(np.full_like(vol.data, vrange.lo))
    out = vrange.lo + (vol.data + 1.0) * 0.5 * (vrange.hi - vrange.lo)
    return Volume4D(out)


def downsample(vol: Volume4D) -> Volume4D:
    """Halve every dimension by keeping even-index samples."""
    for name in _AXIS_NAMES:
        if vol.data.shape[_AXIS_INDEX[name]] % 2 != 0:
            raise ValueError(
                f"cannot downsample: axis {name} has odd extent "
                f"{vol.data.shape[_AXIS_INDEX[name]]}"
            )
    return Volume4D(vol.data[::2, ::2, ::2, ::2])


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    shape = list(a.shape)
    shape[axis] = 2 * n
    out = np.empty(shape, dtype=a.dtype)

    def sl(start, stop=None, step=None):
        s = [slice(None)] * a.ndim
        s[axis] = slice(start, stop, step)
        return tuple(s)

    out[sl(0, None, 2)] = a
    # odd samples are midpoints; the final one clamps to the edge
    out[sl(1, -1, 2)] = 0.5 * (a[sl(0, n - 1)] + a[sl(1, n)])
    out[sl(2 * n - 1, 2 * n)] = a[sl(n - 1, n)]
    return out


def upsample(vol: Volume4D) -> Volume4D:
    """Double every dimension.

    Even output samples copy the input (so downsample(upsample(v)) == v);
    odd samples are midpoints of their neighbors with edge clamping.
    Spatial axes are interpolated first (x, y, z), then time.
    """
    a = vol.data
    for name in ("x", "y", "z", "t"):
        a = _upsample_axis(a, _AXIS_INDEX[name])
    return Volume4D(a)


def _check_same_dims(a: Volume4D, b: Volume4D, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: dims mismatch {a.dims} vs {b.dims}")


def residual(a: Volume4D, b: Volume4D) -> Volume4D:
    """Element-wise a - b."""
    _check_same_dims(a, b, "residual")
    return Volume4D(a.data - b.data)


def combine(a: Volume4D, b: Volume4D) -> Volume4D:
    """Element-wise a + b."""
    _check_same_dims(a, b, "combine")
    return Volume4D(a.data + b.data)
