"""3D scalar grids: box-filter resampling, Gaussian PSF blur, PVOL file I/O.

Data arrays are indexed ``data[ix, iy, iz]``. The world frame places the
center of voxel (0, 0, 0) at ``origin_mm``; grids built with
:func:`centered_origin` are centered on the world origin, which is also the
rotation center used by :mod:`motionpet.motion`.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorruptFileError, InvalidArgumentError

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))  # 1 / 2.3548
PSF_TRUNCATE_SIGMAS = 4.0

_MAGIC = b"PVOL"
_VERSION = 1
_HEADER = struct.Struct("<4sI3I3f3f")


@dataclass
class Volume3D:
    data: np.ndarray
    voxel_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise InvalidArgumentError(f"volume data must be 3D, got shape {self.data.shape}")
        self.voxel_mm = tuple(float(v) for v in self.voxel_mm)
        self.origin_mm = tuple(float(v) for v in self.origin_mm)
        if len(self.voxel_mm) != 3 or len(self.origin_mm) != 3:
            raise InvalidArgumentError("voxel_mm and origin_mm must be triples")
        if min(self.voxel_mm) <= 0:
            raise InvalidArgumentError(f"voxel sizes must be positive, got {self.voxel_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        return self.voxel_mm[0] * self.voxel_mm[1] * self.voxel_mm[2]

    @property
    def extent_mm(self) -> np.ndarray:
        return np.asarray(self.dims) * np.asarray(self.voxel_mm)

    @property
    def lower_corner_mm(self) -> np.ndarray:
        return np.asarray(self.origin_mm) - 0.5 * np.asarray(self.voxel_mm)

    def integral(self) -> float:
        return float(np.sum(self.data, dtype=np.float64) * self.voxel_volume)

    def voxel_centers(self, axis: int) -> np.ndarray:
        return self.origin_mm[axis] + self.voxel_mm[axis] * np.arange(self.dims[axis])

    def world_grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return np.meshgrid(self.voxel_centers(0), self.voxel_centers(1),
                           self.voxel_centers(2), indexing="ij")

    def like(self, data: np.ndarray) -> "Volume3D":
        return Volume3D(data, self.voxel_mm, self.origin_mm)

    def copy(self) -> "Volume3D":
        return self.like(self.data.copy())

    def check_finite(self, nonnegative: bool = False) -> None:
        if not np.all(np.isfinite(self.data)):
            raise InvalidArgumentError("volume contains non-finite values")
        if nonnegative and np.any(self.data < 0):
            raise InvalidArgumentError("volume contains negative values")


def centered_origin(dims, voxel_mm) -> tuple[float, float, float]:
    """Origin that centers a grid of ``dims`` voxels on the world origin."""
    return tuple(-0.5 * (int(n) - 1) * float(v) for n, v in zip(dims, voxel_mm))


def empty_volume(dims, voxel_mm, dtype=np.float64) -> Volume3D:
    dims = tuple(int(n) for n in dims)
    return Volume3D(np.zeros(dims, dtype=dtype), voxel_mm, centered_origin(dims, voxel_mm))


# ---------------------------------------------------------------------------
# resampling


def _overlap_matrix(n_src: int, n_dst: int) -> np.ndarray:
    """Fraction of each destination cell covered by each source cell.

    Both grids span [0, 1]; row sums are 1 so the result averages, and
    ``W.sum(axis=0) * n_src / n_dst`` is 1, so integrals are preserved.
    """
    src_edges = np.linspace(0.0, 1.0, n_src + 1)
    dst_edges = np.linspace(0.0, 1.0, n_dst + 1)
    lo = np.maximum(dst_edges[:-1, None], src_edges[None, :-1])
    hi = np.minimum(dst_edges[1:, None], src_edges[None, 1:])
    return np.clip(hi - lo, 0.0, None) * n_dst


def resample(vol: Volume3D, target_dims) -> Volume3D:
    """Volume-weighted (box filter) resampling onto ``target_dims`` over the same extent."""
    target_dims = tuple(int(n) for n in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise InvalidArgumentError(f"target dims must be three positive integers, got {target_dims}")
    if target_dims == vol.dims:
        return vol.copy()

    data = np.asarray(vol.data, dtype=np.float64)
    for axis in range(3):
        w = _overlap_matrix(vol.dims[axis], target_dims[axis])
        data = np.moveaxis(np.tensordot(w, data, axes=([1], [axis])), 0, axis)

    extent = vol.extent_mm
    voxel = tuple(extent / np.asarray(target_dims))
    lower = vol.lower_corner_mm
    origin = tuple(lower + 0.5 * np.asarray(voxel))
    return Volume3D(data, voxel, origin)


# ---------------------------------------------------------------------------
# PSF


def gaussian_kernel_1d(fwhm_mm: float, voxel_mm: float) -> np.ndarray:
    """Sampled Gaussian, truncated at 4 sigma and renormalized to unit sum."""
    sigma = fwhm_mm * FWHM_TO_SIGMA / voxel_mm
    if sigma <= 0:
        return np.ones(1)
    radius = int(math.ceil(PSF_TRUNCATE_SIGMAS * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def convolve_gaussian(vol: Volume3D, fwhm_mm: float) -> Volume3D:
    """Separable isotropic Gaussian blur (FWHM in mm), half-sample symmetric borders.

    Symmetric borders keep the total integral unchanged.
    """
    if fwhm_mm < 0:
        raise InvalidArgumentError(f"fwhm must be >= 0, got {fwhm_mm}")
    if fwhm_mm == 0:
        return vol.copy()
    return vol.like(gaussian_blur_array(vol.data, fwhm_mm, vol.voxel_mm))


def gaussian_blur_array(data: np.ndarray, fwhm_mm: float, voxel_mm) -> np.ndarray:
    out = np.asarray(data, dtype=np.float64)
    for axis in range(3):
        k = gaussian_kernel_1d(fwhm_mm, voxel_mm[axis])
        if k.size > 1:
            out = ndimage.convolve1d(out, k, axis=axis, mode="reflect")
    if out is data:
        out = out.copy()
    return out


# ---------------------------------------------------------------------------
# PVOL format


def write_volume(vol: Volume3D, path) -> None:
    """Write ``vol`` as PVOL (little-endian, float32 payload, x fastest)."""
    header = _HEADER.pack(_MAGIC, _VERSION, *vol.dims, *vol.voxel_mm, *vol.origin_mm)
    payload = np.asarray(vol.data, dtype="<f4").ravel(order="F").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    tmp.replace(path)


def read_volume(path) -> Volume3D:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, version, nx, ny, nz, vx, vy, vz, ox, oy, oz = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    n = nx * ny * nz
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n:
        raise CorruptFileError(
            f"{path}: header dims {nx}x{ny}x{nz} need {n} scalars, payload holds {len(payload) / 4:g}")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F").astype(np.float32)
    try:
        return Volume3D(data, (vx, vy, vz), (ox, oy, oz))
    except InvalidArgumentError as exc:
        raise CorruptFileError(f"{path}: {exc}") from exc
