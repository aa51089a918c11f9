"""Rigid 6-DOF poses, piecewise-constant motion traces and the motion-magnitude summary.

A pose maps head-frame points to scanner-frame points, ``x_s = R x_h + t``
with ``R = Rz @ Ry @ Rx``. Rotations are about the world origin, which is
the center of every grid built by :func:`motionpet.volume.centered_origin`.
"""
from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, InvalidArgumentError

TRACE_KINDS = ("none", "step", "drift", "mixed")
HEAD_RADIUS_MM = 70.0
_CSV_HEADER = ["t_s", "tx_mm", "ty_mm", "tz_mm", "rx_deg", "ry_deg", "rz_deg"]


def rotation_matrix(r_rad) -> np.ndarray:
    rx, ry, rz = (float(a) for a in r_rad)
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    Ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    Rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class RigidPose:
    t_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r_rad: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        t = tuple(float(v) for v in self.t_mm)
        r = tuple(float(v) for v in self.r_rad)
        if not all(math.isfinite(v) for v in t + r):
            raise InvalidArgumentError("pose components must be finite")
        object.__setattr__(self, "t_mm", t)
        object.__setattr__(self, "r_rad", r)

    @property
    def is_identity(self) -> bool:
        return not any(self.t_mm) and not any(self.r_rad)

    def transform(self) -> "RigidTransform":
        return RigidTransform(rotation_matrix(self.r_rad), np.asarray(self.t_mm))


IDENTITY = RigidPose()


@dataclass(frozen=True)
class RigidTransform:
    """Matrix form ``x -> R x + t``; closed under inverse and composition."""

    R: np.ndarray
    t: np.ndarray

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R.T + self.t

    def inverse(self) -> "RigidTransform":
        Rt = self.R.T
        return RigidTransform(Rt, -(Rt @ self.t))

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """``self ∘ first``: apply ``first``, then ``self``."""
        return RigidTransform(self.R @ first.R, self.R @ first.t + self.t)


def _as_transform(p) -> RigidTransform:
    return p if isinstance(p, RigidTransform) else p.transform()


def pose_apply(p, points) -> np.ndarray:
    """Map head-frame point(s) to the scanner frame."""
    if isinstance(p, RigidPose) and p.is_identity:
        return np.array(points, dtype=np.float64)
    return _as_transform(p).apply(points)


def pose_inverse(p) -> RigidTransform:
    return _as_transform(p).inverse()


def pose_compose(p2, p1) -> RigidTransform:
    """Transform equivalent to applying ``p1`` and then ``p2``."""
    return _as_transform(p2).compose(_as_transform(p1))


@dataclass
class MotionTrace:
    breakpoints: list[float]
    poses: list[RigidPose]
    duration_s: float
    _times: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.breakpoints = [float(b) for b in self.breakpoints]
        self.duration_s = float(self.duration_s)
        if len(self.breakpoints) != len(self.poses) or not self.poses:
            raise InvalidArgumentError("need one pose per breakpoint and at least one interval")
        if self.breakpoints[0] != 0.0:
            raise InvalidArgumentError("first breakpoint must be 0")
        if any(b1 <= b0 for b0, b1 in zip(self.breakpoints, self.breakpoints[1:])):
            raise InvalidArgumentError("breakpoints must be strictly increasing")
        if self.breakpoints[-1] >= self.duration_s:
            raise InvalidArgumentError("last breakpoint must precede the scan end")
        self._times = np.asarray(self.breakpoints)

    @property
    def n_intervals(self) -> int:
        return len(self.poses)

    @property
    def ends(self) -> list[float]:
        return self.breakpoints[1:] + [self.duration_s]

    @property
    def weights(self) -> np.ndarray:
        """Interval durations as fractions of the scan."""
        return (np.asarray(self.ends) - self._times) / self.duration_s

    @property
    def is_static_identity(self) -> bool:
        return all(p.is_identity for p in self.poses)

    def interval_index(self, t) -> np.ndarray:
        """Vectorized interval lookup for an array of times (no range check)."""
        return np.searchsorted(self._times, t, side="right") - 1


def identity_trace(duration_s: float) -> MotionTrace:
    return MotionTrace([0.0], [IDENTITY], duration_s)


def pose_at(trace: MotionTrace, t: float) -> RigidPose:
    if not 0.0 <= t < trace.duration_s:
        raise InvalidArgumentError(f"t={t} outside [0, {trace.duration_s})")
    return trace.poses[bisect.bisect_right(trace.breakpoints, t) - 1]


def default_head_points(center_mm=(0.0, 0.0, 0.0), radius_mm: float = HEAD_RADIUS_MM) -> np.ndarray:
    """Sphere-surface cube-diagonal points plus the center."""
    corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    pts = corners / math.sqrt(3.0) * radius_mm
    return np.vstack([pts, np.zeros((1, 3))]) + np.asarray(center_mm, dtype=float)


def motion_magnitude(trace: MotionTrace, head_points_mm=None, reference=None) -> float:
    """Time-weighted mean displacement of head points relative to the reference pose.

    The reference defaults to the pose at t = 0.
    """
    pts = default_head_points() if head_points_mm is None else np.atleast_2d(
        np.asarray(head_points_mm, dtype=float))
    if pts.size == 0:
        raise InvalidArgumentError("head point set is empty")
    ref = pose_apply(trace.poses[0] if reference is None else reference, pts)
    total = 0.0
    for w, pose in zip(trace.weights, trace.poses):
        disp = np.linalg.norm(pose_apply(pose, pts) - ref, axis=1)
        total += w * disp.mean()
    return float(total)


# ---------------------------------------------------------------------------
# generators


def _unit_vector(rng) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _rotation_for(displacement_mm: float, rng) -> np.ndarray:
    # Rotation whose surface displacement at HEAD_RADIUS_MM is about half
    # the translation; returned as Euler angles.
    angle = 0.5 * displacement_mm / HEAD_RADIUS_MM
    return _unit_vector(rng) * angle


def gen_trace(kind: str, amplitude_mm: float, n_segments: int, duration_s: float, seed,
              translation_only: bool = False) -> MotionTrace:
    """Generate a piecewise-constant trace; the first interval is the identity pose.

    ``step`` draws random breakpoints and independent poses whose
    translations have norm exactly ``amplitude_mm``; ``drift`` ramps the
    translation linearly to ``amplitude_mm`` over equal intervals; ``mixed``
    superimposes a half-amplitude drift and half-amplitude steps.
    """
    if kind not in TRACE_KINDS:
        raise InvalidArgumentError(f"unknown trace kind {kind!r}; expected one of {TRACE_KINDS}")
    if amplitude_mm < 0:
        raise InvalidArgumentError("amplitude must be >= 0")
    if n_segments < 1:
        raise InvalidArgumentError("n_segments must be >= 1")
    if kind == "none" or n_segments == 1:
        return identity_trace(duration_s)

    rng = np.random.default_rng(seed)
    n = n_segments
    if kind == "step":
        inner = np.sort(rng.uniform(0.0, 1.0, n - 1))
        # keep intervals from collapsing
        inner = 0.05 + 0.9 * inner
        breakpoints = [0.0] + list(inner * duration_s)
        poses = [IDENTITY]
        for _ in range(n - 1):
            t = _unit_vector(rng) * amplitude_mm
            r = np.zeros(3) if translation_only else _rotation_for(amplitude_mm, rng)
            poses.append(RigidPose(tuple(t), tuple(r)))
        if len(set(breakpoints)) != len(breakpoints):
            breakpoints = list(np.arange(n) * duration_s / n)
        return MotionTrace(breakpoints, poses, duration_s)

    breakpoints = list(np.arange(n) * duration_s / n)
    drift_amp = amplitude_mm if kind == "drift" else 0.5 * amplitude_mm
    direction = _unit_vector(rng)
    drift_rot = np.zeros(3) if translation_only else _rotation_for(drift_amp, rng)
    poses = [IDENTITY]
    for i in range(1, n):
        frac = i / (n - 1)
        t = direction * drift_amp * frac
        r = drift_rot * frac
        if kind == "mixed":
            step_amp = 0.5 * amplitude_mm
            t = t + _unit_vector(rng) * step_amp
            if not translation_only:
                r = r + _rotation_for(step_amp, rng)
        poses.append(RigidPose(tuple(t), tuple(r)))
    return MotionTrace(breakpoints, poses, duration_s)


# ---------------------------------------------------------------------------
# CSV I/O


def write_trace(trace: MotionTrace, path) -> None:
    """CSV, one row per breakpoint, degrees on disk; the scan duration is a trailing comment."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_CSV_HEADER)
        for b, p in zip(trace.breakpoints, trace.poses):
            w.writerow([repr(b), *(repr(v) for v in p.t_mm), *(repr(math.degrees(a)) for a in p.r_rad)])
        fh.write(f"# duration_s={trace.duration_s!r}\n")
    tmp.replace(path)


def read_trace(path, duration_s: float | None = None) -> MotionTrace:
    breakpoints, poses = [], []
    found_duration = None
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    rows = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key.strip() == "duration_s":
                found_duration = float(val)
            continue
        if line.strip():
            rows.append(line)
    reader = csv.reader(rows)
    header = next(reader, None)
    if header != _CSV_HEADER:
        raise CorruptFileError(f"{path}: unexpected trace header {header}")
    for row in reader:
        if len(row) != 7:
            raise CorruptFileError(f"{path}: malformed row {row}")
        vals = [float(v) for v in row]
        breakpoints.append(vals[0])
        poses.append(RigidPose(tuple(vals[1:4]), tuple(math.radians(a) for a in vals[4:7])))
    duration = duration_s if duration_s is not None else found_duration
    if duration is None:
        raise CorruptFileError(f"{path}: scan duration not recorded; pass duration_s")
    return MotionTrace(breakpoints, poses, duration)


def calibrate_amplitude_scale(kind: str, relative_amplitudes, seeds, n_segments: int,
                              duration_s: float, target_mean_mm: float, tol_mm: float = 1e-3,
                              head_points_mm=None) -> float:
    """Bisect a common amplitude scale so the cohort's mean motion magnitude hits the target."""
    rel = list(relative_amplitudes)
    if not rel or target_mean_mm <= 0:
        return 0.0

    def mean_magnitude(scale):
        return float(np.mean([
            motion_magnitude(gen_trace(kind, a * scale, n_segments, duration_s, s), head_points_mm)
            for a, s in zip(rel, seeds)]))

    lo, hi = 0.0, max(target_mean_mm, 1.0)
    while mean_magnitude(hi) < target_mean_mm:
        hi *= 2.0
        if hi > 1e6:
            raise InvalidArgumentError("motion magnitude does not reach the calibration target")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        m = mean_magnitude(mid)
        if abs(m - target_mean_mm) <= tol_mm:
            return mid
        if m < target_mean_mm:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
