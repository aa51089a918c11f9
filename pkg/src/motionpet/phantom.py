"""Synthetic brain phantoms (CN / AD) and cohort layout.

The brain is a two-compartment ellipsoid: a gray-matter cortical shell
around white matter, plus deep gray nuclei. AD subjects lose a fraction of
uptake inside one or more ellipsoidal regions. A smooth multiplicative
field adds per-subject variability that does not depend on the label.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import motion
from .errors import InvalidArgumentError
from .seeding import child_seeds, substream
from .volume import Volume3D, centered_origin

LABELS = ("CN", "AD")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]

    def mask(self, X, Y, Z) -> np.ndarray:
        cx, cy, cz = self.center_mm
        rx, ry, rz = self.radii_mm
        return ((X - cx) / rx) ** 2 + ((Y - cy) / ry) ** 2 + ((Z - cz) / rz) ** 2 <= 1.0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center_mm)
        r = np.asarray(self.radii_mm)
        return c - r, c + r


MEDIAL_TEMPORAL = (
    Ellipsoid((-26.0, -6.0, -16.0), (13.0, 20.0, 11.0)),
    Ellipsoid((26.0, -6.0, -16.0), (13.0, 20.0, 11.0)),
)
TEMPOROPARIETAL = (
    Ellipsoid((-38.0, -24.0, 4.0), (18.0, 30.0, 24.0)),
    Ellipsoid((38.0, -24.0, 4.0), (18.0, 30.0, 24.0)),
    Ellipsoid((0.0, -40.0, 16.0), (20.0, 18.0, 20.0)),
)
FRONTAL = (
    Ellipsoid((-28.0, 38.0, 10.0), (18.0, 20.0, 22.0)),
    Ellipsoid((28.0, 38.0, 10.0), (18.0, 20.0, 22.0)),
)
DEEP_GRAY = (
    Ellipsoid((-14.0, 4.0, 0.0), (8.0, 12.0, 8.0)),
    Ellipsoid((14.0, 4.0, 0.0), (8.0, 12.0, 8.0)),
)


@dataclass(frozen=True)
class PhantomParams:
    brain_radii_mm: tuple[float, float, float] = (60.0, 72.0, 52.0)
    cortex_thickness_mm: float = 8.0
    gray_white_ratio: float = 4.0
    ad_region_spec: tuple[Ellipsoid, ...] = TEMPOROPARIETAL
    ad_reduction: float = 0.2
    subject_jitter: float = 0.05
    mu_tissue_per_mm: float = 0.0096
    head_margin_mm: float = 8.0
    jitter_smoothing_mm: float = 20.0

    def __post_init__(self):
        if min(self.brain_radii_mm) <= 0:
            raise InvalidArgumentError("brain radii must be positive")
        if not 0.0 <= self.ad_reduction < 1.0:
            raise InvalidArgumentError("ad_reduction must lie in [0, 1)")
        if self.subject_jitter < 0:
            raise InvalidArgumentError("subject_jitter must be >= 0")
        if self.gray_white_ratio <= 1.0:
            raise InvalidArgumentError("gray_white_ratio must exceed 1")

    @property
    def head(self) -> Ellipsoid:
        return Ellipsoid((0.0, 0.0, 0.0), tuple(r + self.head_margin_mm for r in self.brain_radii_mm))


# focal: 20% loss over bilateral temporoparietal cortex and precuneus;
# diffuse: a milder 12% loss that also covers medial temporal and frontal lobes
PRESETS = {
    "focal": PhantomParams(),
    "diffuse": PhantomParams(ad_region_spec=TEMPOROPARIETAL + MEDIAL_TEMPORAL + FRONTAL, ad_reduction=0.12),
}


def preset(name: str, **overrides) -> PhantomParams:
    try:
        base = PRESETS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown phantom preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def _check_inside(ell: Ellipsoid, lower, upper, what: str) -> None:
    lo, hi = ell.bounds()
    if np.any(lo < lower) or np.any(hi > upper):
        raise InvalidArgumentError(f"{what} {ell} extends outside the grid")


def smooth_field(dims, voxel_mm, smoothing_mm: float, rng) -> np.ndarray:
    """Zero-mean, unit-variance smooth random field."""
    noise = rng.standard_normal(dims)
    sigma = [smoothing_mm / 2.3548 / v for v in voxel_mm]
    f = ndimage.gaussian_filter(noise, sigma, mode="wrap")
    f -= f.mean()
    sd = f.std()
    return f / sd if sd > 0 else f


def make_phantom(params: PhantomParams, label: str, seed, dims=(64, 64, 64),
                 voxel_mm=(3.0, 3.0, 3.0)) -> tuple[Volume3D, Volume3D]:
    """Return ``(activity, attenuation)`` on a grid centered at the world origin."""
    if label not in LABELS:
        raise InvalidArgumentError(f"label must be one of {LABELS}, got {label!r}")
    dims = tuple(int(n) for n in dims)
    origin = centered_origin(dims, voxel_mm)
    proto = Volume3D(np.zeros(dims), voxel_mm, origin)
    lower = proto.lower_corner_mm
    upper = lower + proto.extent_mm
    _check_inside(params.head, lower, upper, "head")
    for ell in params.ad_region_spec:
        _check_inside(ell, lower, upper, "AD region")

    X, Y, Z = proto.world_grid()
    brain = Ellipsoid((0.0, 0.0, 0.0), params.brain_radii_mm).mask(X, Y, Z)
    inner = tuple(max(r - params.cortex_thickness_mm, 1e-6) for r in params.brain_radii_mm)
    white = Ellipsoid((0.0, 0.0, 0.0), inner).mask(X, Y, Z)
    for nucleus in DEEP_GRAY:
        white &= ~nucleus.mask(X, Y, Z)
    act = np.where(brain, params.gray_white_ratio, 0.0)
    act[white] = 1.0

    if params.subject_jitter > 0:
        rng = np.random.default_rng(substream(seed, "phantom-field"))
        field_ = 1.0 + params.subject_jitter * smooth_field(dims, voxel_mm, params.jitter_smoothing_mm, rng)
        act *= np.clip(field_, 0.0, None)

    if label == "AD" and params.ad_reduction > 0:
        region = np.zeros(dims, dtype=bool)
        for ell in params.ad_region_spec:
            region |= ell.mask(X, Y, Z)
        act[region] *= 1.0 - params.ad_reduction

    mu = np.where(params.head.mask(X, Y, Z), params.mu_tissue_per_mm, 0.0)
    return Volume3D(act, voxel_mm, origin), Volume3D(mu, voxel_mm, origin)


def ad_region_mask(params: PhantomParams, vol: Volume3D) -> np.ndarray:
    X, Y, Z = vol.world_grid()
    region = np.zeros(vol.dims, dtype=bool)
    for ell in params.ad_region_spec:
        region |= ell.mask(X, Y, Z)
    return region


def brain_mask(params: PhantomParams, vol: Volume3D) -> np.ndarray:
    X, Y, Z = vol.world_grid()
    return Ellipsoid((0.0, 0.0, 0.0), params.brain_radii_mm).mask(X, Y, Z)


# ---------------------------------------------------------------------------
# cohorts


@dataclass
class SubjectRecord:
    id: str
    label: str
    split: str
    seed: int
    motion_amplitude_mm: float
    paths: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in LABELS:
            raise InvalidArgumentError(f"label must be one of {LABELS}")


@dataclass(frozen=True)
class CohortConfig:
    train_cn: int = 20
    train_ad: int = 20
    val_cn: int = 4
    val_ad: int = 4
    test_cn: int = 10
    test_ad: int = 10
    motion_kind: str = "mixed"
    motion_mean_mm: float = 7.0
    motion_cv: float = 0.66
    n_segments: int = 12
    duration_s: float = 1200.0

    def counts(self) -> list[tuple[str, str, int]]:
        return [("train", "CN", self.train_cn), ("train", "AD", self.train_ad),
                ("val", "CN", self.val_cn), ("val", "AD", self.val_ad),
                ("test", "CN", self.test_cn), ("test", "AD", self.test_ad)]


UCBJ_TABLE1 = CohortConfig(train_cn=47, train_ad=52, val_cn=2, val_ad=7, test_cn=10, test_ad=10)
FDG_TABLE1 = CohortConfig(train_cn=94, train_ad=42, val_cn=10, val_ad=7, test_cn=10, test_ad=10)


def subject_trace(record: SubjectRecord, cohort: CohortConfig) -> motion.MotionTrace:
    return motion.gen_trace(cohort.motion_kind, record.motion_amplitude_mm, cohort.n_segments,
                            cohort.duration_s, substream(record.seed, "trace"))


def make_cohort(cohort: CohortConfig, master_seed: int) -> list[SubjectRecord]:
    """Deterministic subject list; motion amplitudes calibrated on the test split.

    Per-subject relative amplitudes follow a gamma distribution with the
    configured coefficient of variation; one common scale is then chosen so
    the mean motion magnitude of the test subjects equals ``motion_mean_mm``.
    """
    layout = []
    for split, label, n in cohort.counts():
        if n < 0:
            raise InvalidArgumentError(f"negative count for {split}/{label}")
        layout += [(split, label, i) for i in range(n)]
    seeds = child_seeds(master_seed, len(layout))
    records = []
    for (split, label, i), seed in zip(layout, seeds):
        rng = np.random.default_rng(substream(seed, "amplitude"))
        if cohort.motion_cv > 0:
            k = 1.0 / cohort.motion_cv ** 2
            rel = float(rng.gamma(k, 1.0 / k))
        else:
            rel = 1.0
        records.append(SubjectRecord(f"{split}-{label.lower()}-{i:03d}", label, split, seed, rel))

    if cohort.motion_mean_mm <= 0 or cohort.motion_kind == "none":
        for r in records:
            r.motion_amplitude_mm = 0.0
        return records

    calib = [r for r in records if r.split == "test"] or records
    scale = motion.calibrate_amplitude_scale(
        cohort.motion_kind, [r.motion_amplitude_mm for r in calib],
        [substream(r.seed, "trace") for r in calib], cohort.n_segments, cohort.duration_s,
        cohort.motion_mean_mm)
    for r in records:
        r.motion_amplitude_mm *= scale
    return records
