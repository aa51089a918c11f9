"""Event-driven list-mode OSEM with optional rigid motion compensation.

Motion-compensated (MC) reconstruction maps every event's line of response
into the reference head frame (the pose at t = 0) before projection, and
uses a sensitivity image averaged over the motion trace. The resolution
model is an image-space Gaussian applied before forward projection and
after back projection.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import siddon
from .errors import InvalidArgumentError
from .motion import MotionTrace, identity_trace
from .simulate import (EventStream, ScannerGeometry, apply_interval_poses, intersect_lines,
                       isotropic_directions, trace_arrays)
from .volume import Volume3D, centered_origin, gaussian_blur_array, write_volume

SENSITIVITY_BATCH = 250_000


@dataclass(frozen=True)
class ReconConfig:
    iterations: int = 2
    subsets: int = 30
    psf_fwhm_mm: float = 2.5
    dims: tuple[int, int, int] = (64, 64, 64)
    voxel_mm: tuple[float, float, float] = (3.0, 3.0, 3.0)
    sensitivity_lors: int = 200_000
    epsilon: float = 1e-9

    def __post_init__(self):
        if self.iterations < 1 or self.subsets < 1:
            raise InvalidArgumentError("iterations and subsets must be >= 1")
        if self.psf_fwhm_mm < 0:
            raise InvalidArgumentError("psf_fwhm_mm must be >= 0")
        if self.sensitivity_lors < 1:
            raise InvalidArgumentError("sensitivity_lors must be >= 1")
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "voxel_mm", tuple(float(v) for v in self.voxel_mm))

    def grid(self) -> Volume3D:
        return Volume3D(np.zeros(self.dims), self.voxel_mm, centered_origin(self.dims, self.voxel_mm))


@dataclass
class Sensitivity:
    volume: Volume3D
    mode: str  # "MC" or "NMC"


def _grid_args(grid: Volume3D):
    return grid.lower_corner_mm, np.asarray(grid.voxel_mm), np.asarray(grid.dims)


def siddon_path(a_mm, b_mm, grid: Volume3D) -> list[tuple[tuple[int, int, int], float]]:
    """Voxels crossed by segment a->b with their intersection lengths (mm)."""
    a = np.asarray(a_mm, dtype=np.float64)
    b = np.asarray(b_mm, dtype=np.float64)
    if np.array_equal(a, b):
        raise InvalidArgumentError("segment endpoints coincide")
    idx, lens = siddon.ray_path(a, b, *_grid_args(grid))
    ijk = np.unravel_index(idx, grid.dims)
    return [((int(i), int(j), int(k)), float(l)) for i, j, k, l in zip(*ijk, lens)]


def _blur(flat: np.ndarray, config: ReconConfig) -> np.ndarray:
    if config.psf_fwhm_mm == 0:
        return flat
    img = gaussian_blur_array(flat.reshape(config.dims), config.psf_fwhm_mm, config.voxel_mm)
    return img.ravel()


def _box_chords(x, d, lower, upper):
    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = (lower - x) / d
        s1 = (upper - x) / d
    enter = np.nanmax(np.minimum(s0, s1), axis=1)
    leave = np.nanmin(np.maximum(s0, s1), axis=1)
    return np.clip(leave - enter, 0.0, None)


def sensitivity_image(geom: ScannerGeometry, attenuation: Volume3D | None, trace: MotionTrace | None,
                      config: ReconConfig, seed) -> Sensitivity:
    """Monte Carlo detection-probability image on the reconstruction grid.

    Lines are drawn from the isotropic line measure restricted to the
    image box (uniform point in the box, isotropic direction, weight
    1 / chord length). Each line gets a stratified time; in MC mode it is
    moved into the scanner frame with the pose of that time to test
    detection, so the estimate is the time-weighted average over the
    trace. Attenuation and back projection happen in the head frame.
    The result estimates P(detect | emission in voxel), blurred by the PSF.
    """
    mode = "NMC" if trace is None else "MC"
    grid = config.grid()
    lower, voxel, dims = _grid_args(grid)
    upper = lower + grid.extent_mm
    mu_flat = None
    if attenuation is not None:
        if attenuation.dims != grid.dims:
            raise InvalidArgumentError("attenuation grid must match the reconstruction grid")
        if np.any(attenuation.data > 0):
            mu_flat = np.asarray(attenuation.data, dtype=np.float64).ravel()
    duration = trace.duration_s if trace is not None else 1.0
    R, T, ident = trace_arrays(trace if trace is not None else identity_trace(duration))
    times = trace._times if trace is not None else np.zeros(1)

    rng = np.random.default_rng(seed)
    n_total = config.sensitivity_lors
    acc = np.zeros(int(np.prod(dims)))
    for start in range(0, n_total, SENSITIVITY_BATCH):
        n = min(SENSITIVITY_BATCH, n_total - start)
        x = lower + rng.random((n, 3)) * (upper - lower)
        d = isotropic_directions(rng, n)
        u_t = rng.random(n)
        t = (start + np.arange(n) + u_t) / n_total * duration
        idx = np.searchsorted(times, t, side="right") - 1
        xs, ds = apply_interval_poses(x, idx, R, T, ident, d)
        _, _, ok, s_lo, s_hi = intersect_lines(xs, ds, geom)
        rows = np.flatnonzero(ok)
        ha = x[rows] + s_lo[rows, None] * d[rows]
        hb = x[rows] + s_hi[rows, None] * d[rows]
        w = 1.0 / _box_chords(x[rows], d[rows], lower, upper)
        if mu_flat is not None:
            w *= np.exp(-siddon.line_integrals(ha, hb, mu_flat, lower, voxel, dims))
        acc += siddon.backproject(ha, hb, w, lower, voxel, dims)
    box_volume = float(np.prod(upper - lower))
    acc *= box_volume / (grid.voxel_volume * n_total)
    sens = np.clip(_blur(acc, config), 0.0, None)
    return Sensitivity(grid.like(sens.reshape(dims)), mode)


def _event_rows(events: EventStream, trace: MotionTrace | None):
    """LOR endpoints in the reconstruction frame (head frame for MC)."""
    a, b = events.a_mm, events.b_mm
    if trace is None or trace.is_static_identity:
        return a, b
    idx = trace.interval_index(events.t_s)
    R, T, ident = trace_arrays(trace)
    # inverse pose: x_h = R^T (x_s - t)
    Rinv = np.transpose(R, (0, 2, 1))
    Tinv = -np.einsum("kij,kj->ki", Rinv, T)
    return (apply_interval_poses(a, idx, Rinv, Tinv, ident),
            apply_interval_poses(b, idx, Rinv, Tinv, ident))


def osem_listmode(events: EventStream, geom: ScannerGeometry, attenuation: Volume3D | None,
                  trace: MotionTrace | None, config: ReconConfig, seed,
                  sensitivity: Sensitivity | None = None, callback=None) -> Volume3D:
    """List-mode OSEM; ``trace`` given means motion-compensated (MC) mode.

    Subsets interleave events by index. ``callback(iteration, volume)`` is
    invoked after each full iteration.
    """
    if len(events) == 0:
        raise InvalidArgumentError("event stream is empty")
    mode = "NMC" if trace is None else "MC"
    if sensitivity is None:
        sensitivity = sensitivity_image(geom, attenuation, trace, config, seed)
    elif sensitivity.mode != mode:
        raise InvalidArgumentError(f"{sensitivity.mode} sensitivity supplied for {mode} reconstruction")
    grid = config.grid()
    if sensitivity.volume.dims != grid.dims:
        raise InvalidArgumentError("sensitivity grid does not match the reconstruction grid")

    eps = config.epsilon
    S = np.asarray(sensitivity.volume.data, dtype=np.float64).ravel()
    support = S >= eps
    S_sub = np.where(support, S / config.subsets, 1.0)
    lam = np.zeros(S.shape)
    n_support = int(support.sum())
    if n_support == 0:
        return grid.like(lam.reshape(grid.dims))
    lam[support] = len(events) / n_support

    a, b = _event_rows(events, trace)
    lower, voxel, dims = _grid_args(grid)
    blocks = [siddon.system_matrix(a[s::config.subsets], b[s::config.subsets], lower, voxel, dims)
              for s in range(min(config.subsets, len(events)))]

    for it in range(config.iterations):
        for P in blocks:
            q = P @ _blur(lam, config)
            ratio = np.zeros_like(q)
            good = q >= eps
            ratio[good] = 1.0 / q[good]
            back = _blur(P.T @ ratio, config)
            lam = np.where(support, lam / S_sub * back, 0.0)
            np.clip(lam, 0.0, None, out=lam)
        if callback is not None:
            callback(it + 1, grid.like(lam.reshape(grid.dims).copy()))
    return grid.like(lam.reshape(grid.dims))


def masked_nrmse(recon: Volume3D, truth: Volume3D, mask: np.ndarray) -> float:
    """RMSE within ``mask`` after least-squares scaling of ``recon``, over the mean truth."""
    r = np.asarray(recon.data, dtype=np.float64)[mask]
    t = np.asarray(truth.data, dtype=np.float64)[mask]
    denom = float(r @ r)
    scale = float(r @ t) / denom if denom > 0 else 0.0
    return float(np.sqrt(np.mean((scale * r - t) ** 2)) / np.mean(t))


def write_recon(vol: Volume3D, path, *, config: ReconConfig, mode: str, events_used: int,
                wall_time_s: float, extra: dict | None = None) -> None:
    path = Path(path)
    write_volume(vol, path)
    info = {"config": asdict(config), "mode": mode, "events_used": int(events_used),
            "wall_time_s": float(wall_time_s)}
    if extra:
        info.update(extra)
    sidecar = path.with_suffix(".json")
    tmp = sidecar.with_name(sidecar.name + ".tmp")
    tmp.write_text(json.dumps(info, indent=2, sort_keys=True))
    tmp.replace(sidecar)
