"""Seeded random residual 3D CNN encoder and max-pool feature reduction.

Layout follows ResNet10: stride-2 stem convolution and 2x2x2 max pool,
then four single-block residual stages (64/128/256/512 channels), every
stage after the first entering with stride 2. Weights are never trained;
they are drawn once from a seeded fan-in-scaled uniform distribution.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError
from .volume import Volume3D, convolve_gaussian, resample

STAGE_CHANNELS = (64, 128, 256, 512)
# standardized intensities are snapped to this grid so affine rescaling of
# the raw input cannot change the encoder input through rounding
QUANTUM = 1.0 / 1024.0
SUPPORT_FRACTION = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    seed: int = 2024
    stage_channels: tuple[int, ...] = STAGE_CHANNELS
    input_dim: int = 64
    norm_epsilon: float = 1e-5

    def __post_init__(self):
        if tuple(self.stage_channels) != STAGE_CHANNELS:
            raise InvalidArgumentError(f"stage channels are fixed to {STAGE_CHANNELS}")
        if self.input_dim < 32 or self.input_dim % 32:
            raise InvalidArgumentError("input_dim must be a positive multiple of 32")


@dataclass
class FeatureVector:
    depth: int
    values: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size not in STAGE_CHANNELS:
            raise InvalidArgumentError(f"feature length must be one of {STAGE_CHANNELS}")
        if not 1 <= self.depth <= 4:
            raise InvalidArgumentError("depth must be 1..4")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("feature values must be finite")


# ---------------------------------------------------------------------------
# layers


def conv3d(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3x3 convolution with zero padding 1. x: (C, D, H, W), w: (O, C, 3, 3, 3)."""
    C = x.shape[0]
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))[:, ::stride, ::stride, ::stride]
    d, h, ww = win.shape[1:4]
    cols = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5, 6)).reshape(d * h * ww, C * 27)
    out = cols @ w.reshape(O, C * 27).T
    return np.ascontiguousarray(out.T).reshape(O, d, h, ww)


def channel_norm(x: np.ndarray, eps: float) -> np.ndarray:
    """Per-channel mean/variance normalization over spatial positions."""
    # centered in float64: a large channel mean would otherwise cost float32 digits
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    flat -= flat.mean(axis=1, keepdims=True)
    flat /= np.sqrt((flat * flat).mean(axis=1, keepdims=True) + eps)
    return flat.astype(x.dtype).reshape(x.shape)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0, out=x)


def maxpool2(x: np.ndarray) -> np.ndarray:
    C, D, H, W = x.shape
    return x[:, :D // 2 * 2, :H // 2 * 2, :W // 2 * 2].reshape(
        C, D // 2, 2, H // 2, 2, W // 2, 2).max(axis=(2, 4, 6))


def _skip(x: np.ndarray, channels: int, stride: int) -> np.ndarray:
    # parameter-free shortcut: subsample, then zero-pad new channels
    s = x[:, ::stride, ::stride, ::stride]
    if channels == s.shape[0]:
        return s
    pad = np.zeros((channels - s.shape[0],) + s.shape[1:], dtype=s.dtype)
    return np.concatenate([s, pad], axis=0)


@lru_cache(maxsize=4)
def encoder_weights(seed: int) -> tuple[np.ndarray, ...]:
    """Stem weight followed by two convolution weights per stage."""
    rng = np.random.default_rng(seed)

    def draw(out_c, in_c):
        bound = np.sqrt(6.0 / (in_c * 27))
        return rng.uniform(-bound, bound, (out_c, in_c, 3, 3, 3)).astype(np.float32)

    weights = [draw(STAGE_CHANNELS[0], 1)]
    in_c = STAGE_CHANNELS[0]
    for c in STAGE_CHANNELS:
        weights += [draw(c, in_c), draw(c, c)]
        in_c = c
    for w in weights:
        w.setflags(write=False)
    return tuple(weights)


def standardize(data: np.ndarray) -> np.ndarray:
    """Z-score over brain support (values above 10% of the intensity range), quantized."""
    v = np.asarray(data, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if not hi > lo:
        return np.zeros(v.shape, dtype=np.float32)
    support = v > lo + SUPPORT_FRACTION * (hi - lo)
    vals = v[support]
    mean = vals.mean()
    sd = vals.std()
    if not sd > 0:
        return np.zeros(v.shape, dtype=np.float32)
    z = (v - mean) / sd
    return (np.round(z / QUANTUM) * QUANTUM).astype(np.float32)


def encode_standardized(x: np.ndarray, config: EncoderConfig) -> list[np.ndarray]:
    eps = config.norm_epsilon
    w = encoder_weights(config.seed)
    h = relu(channel_norm(conv3d(x[None], w[0], stride=2), eps))
    h = maxpool2(h)
    maps = []
    for stage, c in enumerate(STAGE_CHANNELS):
        stride = 1 if stage == 0 else 2
        y = relu(channel_norm(conv3d(h, w[1 + 2 * stage], stride=stride), eps))
        y = channel_norm(conv3d(y, w[2 + 2 * stage]), eps)
        h = relu(y + _skip(h, c, stride))
        maps.append(h)
    return maps


def encode(vol: Volume3D | np.ndarray, config: EncoderConfig = EncoderConfig()) -> list[np.ndarray]:
    """Feature maps (C, s, s, s) after each of the four stages."""
    data = vol.data if isinstance(vol, Volume3D) else np.asarray(vol)
    expected = (config.input_dim,) * 3
    if data.shape != expected:
        raise InvalidArgumentError(f"encoder expects a {expected} input, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise InvalidArgumentError("input contains non-finite values")
    return encode_standardized(standardize(data), config)


def prepare_input(vol: Volume3D, input_dim: int, prefilter_fwhm_mm: float = 0.0) -> Volume3D:
    """Optional Gaussian post-filter, then box resampling to the encoder cube."""
    if prefilter_fwhm_mm > 0:
        vol = convolve_gaussian(vol, prefilter_fwhm_mm)
    return resample(vol, (input_dim,) * 3)


def reduce_maxpool(feature_map: np.ndarray, depth: int = 1, subject_id: str = "") -> FeatureVector:
    fm = np.asarray(feature_map)
    return FeatureVector(depth, fm.reshape(fm.shape[0], -1).max(axis=1).astype(np.float64), subject_id)


def extract_features(vol, config: EncoderConfig = EncoderConfig(), subject_id: str = "") -> list[FeatureVector]:
    return [reduce_maxpool(m, d + 1, subject_id) for d, m in enumerate(encode(vol, config))]


# ---------------------------------------------------------------------------
# CSV


def write_features(rows, path) -> None:
    """``rows``: iterable of (FeatureVector, label). One CSV per depth is expected."""
    rows = list(rows)
    n = max((fv.values.size for fv, _ in rows), default=0)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(",".join(["subject_id", "label", "depth"] + [f"f{i}" for i in range(n)]) + "\n")
        for fv, label in rows:
            vals = ",".join(repr(float(v)) for v in fv.values)
            fh.write(f"{fv.subject_id},{label},{fv.depth},{vals}\n")
    tmp.replace(path)


def read_features(path) -> list[tuple[FeatureVector, str]]:
    out = []
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:3] != ["subject_id", "label", "depth"]:
            raise InvalidArgumentError(f"{path}: not a feature CSV")
        for line in fh:
            if not line.strip():
                continue
            parts = line.strip().split(",")
            out.append((FeatureVector(int(parts[2]), np.array([float(v) for v in parts[3:]]), parts[0]),
                        parts[1]))
    return out
