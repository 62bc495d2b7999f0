"""Axis-aligned 3D volumes in physical space, resampling and intensity windowing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TARGET_SPACING = (2.0, 2.0, 3.0)


@dataclass(frozen=True)
class IntensityWindow:
    vmin: float
    vmax: float

    def __post_init__(self):
        if not self.vmin < self.vmax:
            raise ValueError(f"window needs vmin < vmax, got ({self.vmin}, {self.vmax})")


CT_WINDOW = IntensityWindow(-100.0, 250.0)
SUV_WINDOW = IntensityWindow(0.0, 15.0)


@dataclass
class Volume:
    """Scalar grid indexed ``data[x, y, z]``.

    ``origin`` is the physical position (mm) of the centre of voxel (0, 0, 0);
    voxel ``i`` along an axis sits at ``origin + i * spacing``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacings must be three positive numbers, got {self.spacing}")
        if len(self.origin) != 3:
            raise ValueError(f"origin must have three components, got {self.origin}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def same_grid(self, other: "Volume", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol, rtol=0)
            and np.allclose(self.origin, other.origin, atol=tol, rtol=0)
        )

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.origin)


def physical_to_index(v: Volume, point_mm) -> np.ndarray:
    p = np.asarray(point_mm, dtype=np.float64)
    return (p - np.asarray(v.origin)) / np.asarray(v.spacing)


def index_to_physical(v: Volume, index) -> np.ndarray:
    i = np.asarray(index, dtype=np.float64)
    return np.asarray(v.origin) + i * np.asarray(v.spacing)


def _round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def resampled_grid(v: Volume, target_spacing) -> tuple[tuple[int, int, int], tuple[float, ...]]:
    """Dims and origin of ``v`` resampled to ``target_spacing``, covering the same extent."""
    dims = []
    origin = []
    for n, s, o, t in zip(v.dims, v.spacing, v.origin, target_spacing):
        m = max(1, _round_half_away(n * s / t))
        dims.append(m)
        # keep the outer edge of the first voxel fixed
        origin.append(o - 0.5 * s + 0.5 * t)
    return tuple(dims), tuple(origin)


def _axis_weights(n_in: int, positions: np.ndarray):
    pos = np.clip(positions, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def _interp_axis(a: np.ndarray, axis: int, positions: np.ndarray) -> np.ndarray:
    lo, hi, frac = _axis_weights(a.shape[axis], positions)
    shape = [1] * a.ndim
    shape[axis] = -1
    f = frac.reshape(shape)
    a_lo = np.take(a, lo, axis=axis)
    a_hi = np.take(a, hi, axis=axis)
    return a_lo + (a_hi - a_lo) * f


def _nearest_axis(a: np.ndarray, axis: int, positions: np.ndarray) -> np.ndarray:
    idx = np.clip(np.floor(positions + 0.5), 0, a.shape[axis] - 1).astype(np.intp)
    return np.take(a, idx, axis=axis)


def resample_to_grid(v: Volume, dims, spacing, origin, mode: str = "trilinear") -> Volume:
    """Sample ``v`` at the voxel centres of the grid ``(dims, spacing, origin)``.

    Samples that fall outside the source take the nearest edge value.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown resampling mode {mode!r}")
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    origin = tuple(float(o) for o in origin)
    if dims == v.dims and spacing == v.spacing and origin == v.origin:
        return Volume(v.data.copy(), spacing, origin)
    out = v.data if mode == "nearest" else v.data.astype(np.float64)
    for axis in range(3):
        phys = origin[axis] + np.arange(dims[axis]) * spacing[axis]
        pos = (phys - v.origin[axis]) / v.spacing[axis]
        if mode == "trilinear":
            out = _interp_axis(out, axis, pos)
        else:
            out = _nearest_axis(out, axis, pos)
    if mode == "trilinear" and np.issubdtype(v.data.dtype, np.floating):
        out = out.astype(v.data.dtype, copy=False)
    return Volume(np.ascontiguousarray(out), spacing, origin)


def resample(v: Volume, target_spacing=TARGET_SPACING, mode: str = "trilinear") -> Volume:
    target_spacing = tuple(float(t) for t in target_spacing)
    if min(target_spacing) <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if target_spacing == v.spacing:
        return Volume(v.data.copy(), v.spacing, v.origin)
    dims, origin = resampled_grid(v, target_spacing)
    return resample_to_grid(v, dims, target_spacing, origin, mode)


def window_normalize(v: Volume, w: IntensityWindow) -> Volume:
    """Map ``[vmin, vmax]`` linearly onto ``[0, 1]`` and clamp."""
    x = v.data.astype(np.float64)
    out = np.clip((x - w.vmin) / (w.vmax - w.vmin), 0.0, 1.0)
    dtype = v.data.dtype if np.issubdtype(v.data.dtype, np.floating) else np.float32
    return v.with_data(out.astype(dtype))
