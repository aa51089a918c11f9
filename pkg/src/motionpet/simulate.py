"""List-mode coincidence simulation inside an idealized cylindrical scanner.

Emissions are drawn from the activity volume (head frame), moved into the
scanner frame with the pose active at their emission time, and detected on
a continuous cylinder. Attenuation thins events by exp(-line integral of mu)
along the full line of response; there are no randoms or scatter.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import siddon
from .errors import CorruptFileError, InvalidArgumentError
from .motion import MotionTrace, identity_trace
from .seeding import spawn
from .volume import Volume3D

CHUNK_EVENTS = 50_000

_MAGIC = b"PLM1"
_VERSION = 1
_HEADER = struct.Struct("<4sIdQQ")


@dataclass(frozen=True)
class ScannerGeometry:
    radius_mm: float = 160.0
    axial_halflength_mm: float = 120.0

    def __post_init__(self):
        if self.radius_mm <= 0 or self.axial_halflength_mm <= 0:
            raise InvalidArgumentError("scanner radius and axial half-length must be positive")

    def check_encloses(self, vol: Volume3D) -> None:
        lo = vol.lower_corner_mm
        hi = lo + vol.extent_mm
        corner = math.hypot(max(abs(lo[0]), abs(hi[0])), max(abs(lo[1]), abs(hi[1])))
        if corner >= self.radius_mm:
            raise InvalidArgumentError(
                f"grid reaches {corner:.1f} mm from the axis; scanner radius is {self.radius_mm} mm")


@dataclass
class EventStream:
    t_s: np.ndarray
    a_mm: np.ndarray
    b_mm: np.ndarray
    duration_s: float
    true_emission_count: int = 0

    def __len__(self):
        return int(self.t_s.shape[0])

    @classmethod
    def empty(cls, duration_s: float) -> "EventStream":
        return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 3)), duration_s, 0)


def intersect_lines(P: np.ndarray, D: np.ndarray, geom: ScannerGeometry):
    """Vectorized line/cylinder intersection.

    Returns ``(A, B, ok, s_lo, s_hi)``: endpoints ordered along ``D``, their
    line parameters, and ``ok`` False for rows that miss the cylinder, run
    parallel to its axis, or leave through an end cap.
    """
    P = np.asarray(P, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    a = D[:, 0] ** 2 + D[:, 1] ** 2
    b = 2.0 * (P[:, 0] * D[:, 0] + P[:, 1] * D[:, 1])
    c = P[:, 0] ** 2 + P[:, 1] ** 2 - geom.radius_mm ** 2
    disc = b * b - 4.0 * a * c
    ok = (a > 0) & (disc >= 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    # numerically stable roots
    q = -0.5 * (b + np.copysign(sq, b))
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = np.where(ok, q / np.where(ok, a, 1.0), 0.0)
        s2 = np.where(ok & (q != 0), c / np.where(q != 0, q, 1.0), 0.0)
    s_lo = np.minimum(s1, s2)
    s_hi = np.maximum(s1, s2)
    A = P + s_lo[:, None] * D
    B = P + s_hi[:, None] * D
    h = geom.axial_halflength_mm
    ok &= (np.abs(A[:, 2]) <= h) & (np.abs(B[:, 2]) <= h)
    return A, B, ok, s_lo, s_hi


def cylinder_intersect(point_mm, direction, geom: ScannerGeometry):
    """Both intersections of the line through ``point_mm`` with the detector cylinder, or None."""
    d = np.asarray(direction, dtype=np.float64)
    if not np.linalg.norm(d) > 0:
        raise InvalidArgumentError("direction must be nonzero")
    A, B, ok, _, _ = intersect_lines(np.asarray(point_mm, dtype=np.float64)[None], d[None], geom)
    if not ok[0]:
        return None
    return A[0], B[0]


def isotropic_directions(rng, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def trace_arrays(trace: MotionTrace):
    """Stacked rotation matrices, translations and identity flags per interval."""
    tf = [p.transform() for p in trace.poses]
    R = np.stack([x.R for x in tf])
    T = np.stack([x.t for x in tf])
    ident = np.array([p.is_identity for p in trace.poses])
    return R, T, ident


def apply_interval_poses(points, idx, R, T, ident, directions=None):
    """Apply per-row interval poses to points (and optionally rotate directions)."""
    out = np.array(points, dtype=np.float64)
    dout = None if directions is None else np.array(directions, dtype=np.float64)
    for k in np.unique(idx):
        if ident[k]:
            continue
        rows = idx == k
        out[rows] = points[rows] @ R[k].T + T[k]
        if dout is not None:
            dout[rows] = directions[rows] @ R[k].T
    return out if dout is None else (out, dout)


def _grid(vol: Volume3D):
    return vol.lower_corner_mm, np.asarray(vol.voxel_mm), np.asarray(vol.dims)


def emission_points(cdf, activity: Volume3D, u_vox, jitter) -> np.ndarray:
    """Head-frame emission origins: voxel by inverse CDF, then uniform within it.

    ``u_vox`` are uniforms in [0, 1); ``jitter`` offsets in [-0.5, 0.5)^3 voxels.
    """
    flat = np.minimum(np.searchsorted(cdf, u_vox * cdf[-1], side="right"), cdf.shape[0] - 1)
    ijk = np.stack(np.unravel_index(flat, activity.dims), axis=1)
    return np.asarray(activity.origin_mm) + (ijk + jitter) * np.asarray(activity.voxel_mm)


def _simulate_chunk(cdf, activity, mu_flat, R, T, ident, trace, geom, quota, rng):
    dims = np.asarray(activity.dims)
    voxel = np.asarray(activity.voxel_mm)
    lower, _, _ = _grid(activity)
    parts_t, parts_a, parts_b = [], [], []
    have = 0
    emitted = 0
    while have < quota:
        need = quota - have
        batch = int(need * 1.5) + 256
        u_vox = rng.random(batch)
        jitter = rng.random((batch, 3)) - 0.5
        t = rng.random(batch) * trace.duration_s
        d_head = isotropic_directions(rng, batch)
        u_acc = rng.random(batch)

        x_head = emission_points(cdf, activity, u_vox, jitter)

        idx = trace.interval_index(t)
        x_scan, d_scan = apply_interval_poses(x_head, idx, R, T, ident, d_head)
        A, B, ok, s_lo, s_hi = intersect_lines(x_scan, d_scan, geom)

        if mu_flat is not None and ok.any():
            # the rigid map keeps the line parameter, so head-frame endpoints share s
            rows = np.flatnonzero(ok)
            ha = x_head[rows] + s_lo[rows, None] * d_head[rows]
            hb = x_head[rows] + s_hi[rows, None] * d_head[rows]
            att = siddon.line_integrals(ha, hb, mu_flat, lower, voxel, dims)
            keep = np.zeros(batch, dtype=bool)
            keep[rows] = u_acc[rows] < np.exp(-att)
        else:
            keep = ok

        sel = np.flatnonzero(keep)
        if sel.size >= need:
            sel = sel[:need]
            emitted += int(sel[-1]) + 1
        else:
            emitted += batch
        parts_t.append(t[sel])
        parts_a.append(A[sel])
        parts_b.append(B[sel])
        have += sel.size
    return np.concatenate(parts_t), np.concatenate(parts_a), np.concatenate(parts_b), emitted


def simulate_listmode(activity: Volume3D, attenuation: Volume3D | None, trace: MotionTrace | None,
                      geom: ScannerGeometry, target_events: int, seed,
                      duration_s: float = 1200.0, chunk_events: int = CHUNK_EVENTS) -> EventStream:
    """Simulate ``target_events`` detected coincidences.

    Events are generated in fixed-size chunks, each from its own spawned
    seed, then merged in time order; the result depends only on the inputs.
    """
    if target_events < 0:
        raise InvalidArgumentError("target_events must be >= 0")
    if trace is None:
        trace = identity_trace(duration_s)
    if target_events == 0:
        return EventStream.empty(trace.duration_s)
    act = np.asarray(activity.data, dtype=np.float64)
    if np.any(act < 0) or not np.all(np.isfinite(act)):
        raise InvalidArgumentError("activity must be finite and nonnegative")
    total = act.sum()
    if not total > 0:
        raise InvalidArgumentError("activity has zero integral")
    geom.check_encloses(activity)

    mu_flat = None
    if attenuation is not None:
        if attenuation.dims != activity.dims or attenuation.voxel_mm != activity.voxel_mm \
                or attenuation.origin_mm != activity.origin_mm:
            raise InvalidArgumentError("attenuation and activity grids differ")
        mu = np.asarray(attenuation.data, dtype=np.float64)
        if np.any(mu < 0):
            raise InvalidArgumentError("attenuation must be nonnegative")
        if np.any(mu > 0):
            mu_flat = mu.ravel()

    cdf = np.cumsum(act.ravel())
    R, T, ident = trace_arrays(trace)
    n_chunks = -(-target_events // chunk_events)
    children = spawn(seed, n_chunks)
    ts, As, Bs = [], [], []
    emitted = 0
    for c, child in enumerate(children):
        quota = min(chunk_events, target_events - c * chunk_events)
        t, a, b, e = _simulate_chunk(cdf, activity, mu_flat, R, T, ident, trace, geom,
                                     quota, np.random.default_rng(child))
        ts.append(t)
        As.append(a)
        Bs.append(b)
        emitted += e
    t = np.concatenate(ts)
    order = np.argsort(t, kind="stable")
    return EventStream(t[order], np.concatenate(As)[order], np.concatenate(Bs)[order],
                       trace.duration_s, emitted)


def write_listmode(events: EventStream, path) -> None:
    header = _HEADER.pack(_MAGIC, _VERSION, float(events.duration_s),
                          int(events.true_emission_count), len(events))
    rec = np.empty((len(events), 7), dtype="<f4")
    rec[:, 0] = events.t_s
    rec[:, 1:4] = events.a_mm
    rec[:, 4:7] = events.b_mm
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())
    tmp.replace(path)


def read_listmode(path) -> EventStream:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptFileError(f"{path}: truncated header")
    magic, version, duration, n_true, n = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    payload = raw[_HEADER.size:]
    if len(payload) != 28 * n:
        raise CorruptFileError(f"{path}: expected {n} events, payload holds {len(payload) / 28:g}")
    rec = np.frombuffer(payload, dtype="<f4").reshape(n, 7).astype(np.float64)
    return EventStream(rec[:, 0].copy(), rec[:, 1:4].copy(), rec[:, 4:7].copy(), duration, n_true)
