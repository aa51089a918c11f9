import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from conftest import make_volume
from motionpet.errors import InvalidArgumentError
from motionpet.features import (QUANTUM, EncoderConfig, FeatureVector, channel_norm, conv3d, encode,
                                encoder_weights, extract_features, maxpool2, prepare_input, read_features,
                                reduce_maxpool, standardize, write_features)

CFG64 = EncoderConfig()


def smooth_input(seed, dim=64):
    rng = np.random.default_rng(seed)
    return ndimage.gaussian_filter(rng.random((dim,) * 3), 2.0) * 40 + 5


def test_stage_shapes_128():
    maps = encode(smooth_input(0, 128), EncoderConfig(input_dim=128))
    assert [m.shape for m in maps] == [(64, 32, 32, 32), (128, 16, 16, 16), (256, 8, 8, 8), (512, 4, 4, 4)]
    fvs = extract_features(smooth_input(0, 128), EncoderConfig(input_dim=128))
    assert [fv.values.size for fv in fvs] == [64, 128, 256, 512]
    assert fvs[1].depth == 2 and fvs[1].values.size == 128


def test_stage_shapes_default():
    maps = encode(smooth_input(0), CFG64)
    assert [m.shape[1] for m in maps] == [16, 8, 4, 2]


def test_all_zero_input_finite_and_deterministic():
    a = encode(np.zeros((64,) * 3), CFG64)
    b = encode(np.zeros((64,) * 3), CFG64)
    for x, y in zip(a, b):
        assert np.all(np.isfinite(x))
        assert np.array_equal(x, y)
    assert np.all(standardize(np.zeros((4, 4, 4))) == 0)


def test_determinism_and_seed_sensitivity():
    x = smooth_input(1)
    a = encode(x, CFG64)
    b = encode(x.copy(), CFG64)
    c = encode(x, EncoderConfig(seed=CFG64.seed + 1))
    for d in range(4):
        assert np.array_equal(a[d], b[d])
        assert not np.array_equal(a[d], c[d])


@settings(max_examples=6, deadline=None)
@given(a=st.floats(0.01, 100.0), b=st.floats(-50.0, 50.0))
def test_affine_intensity_invariance(a, b):
    x = smooth_input(2)
    ref = encode(x, CFG64)
    out = encode(a * x + b, CFG64)
    for r, o in zip(ref, out):
        assert np.array_equal(r, o)


def test_standardize_support_statistics():
    x = smooth_input(3)
    z = standardize(x)
    assert np.all(np.abs(z / QUANTUM - np.round(z / QUANTUM)) < 1e-3)
    support = x > x.min() + 0.1 * (x.max() - x.min())
    assert abs(float(z[support].mean())) < 1e-3
    assert float(z[support].std()) == pytest.approx(1.0, abs=1e-3)


def test_wrong_input_rejected():
    with pytest.raises(InvalidArgumentError):
        encode(np.zeros((32,) * 3), CFG64)
    bad = np.zeros((64,) * 3)
    bad[0, 0, 0] = np.nan
    with pytest.raises(InvalidArgumentError):
        encode(bad, CFG64)
    for kw in (dict(input_dim=48), dict(input_dim=0), dict(stage_channels=(32, 64, 128, 256))):
        with pytest.raises(InvalidArgumentError):
            EncoderConfig(**kw)


def test_weights_fan_in_scaled(rng):
    w = encoder_weights(CFG64.seed)
    assert len(w) == 9
    assert w[0].shape == (64, 1, 3, 3, 3) and w[-1].shape == (512, 512, 3, 3, 3)
    for wi in w:
        bound = np.sqrt(6.0 / (wi.shape[1] * 27))
        assert np.abs(wi).max() <= bound * (1 + 1e-6)
        assert abs(float(wi.mean())) < 0.05 * bound
    with pytest.raises(ValueError):
        w[0][0, 0, 0, 0, 0] = 1.0


def test_conv3d_matches_direct_correlation(rng):
    x = rng.standard_normal((2, 5, 6, 7))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    for stride in (1, 2):
        out = conv3d(x, w, stride)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        ref = np.zeros((3,) + tuple(len(range(0, n, stride)) for n in x.shape[1:]))
        for o in range(3):
            for i, a in enumerate(range(0, 5, stride)):
                for j, b in enumerate(range(0, 6, stride)):
                    for k, c in enumerate(range(0, 7, stride)):
                        ref[o, i, j, k] = np.sum(xp[:, a:a + 3, b:b + 3, c:c + 3] * w[o])
        assert np.allclose(out, ref, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), loc=st.floats(-100, 100), scale=st.floats(1.0, 50.0))
def test_channel_norm_statistics(seed, loc, scale):
    x = (np.random.default_rng(seed).gamma(2.0, scale, (8, 6, 6, 6)) + loc).astype(np.float32)
    y = channel_norm(x, 1e-5).reshape(8, -1).astype(np.float64)
    assert np.all(np.abs(y.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(y.var(axis=1) - 1.0) < 1e-4)


def test_maxpool_vs_brute_force(rng):
    fm = rng.standard_normal((4, 2, 2, 2))
    brute = [max(fm[c, i, j, k] for i in range(2) for j in range(2) for k in range(2)) for c in range(4)]
    # feature vectors carry a stage width, so the 4 channels are tiled to 64
    fv = reduce_maxpool(np.tile(fm, (16, 1, 1, 1)), 1, "s")
    assert list(fv.values) == brute * 16


def test_reduce_constant_map():
    fv = reduce_maxpool(np.full((128, 4, 4, 4), 2.5), 2, "x")
    assert fv.values.size == 128 and np.all(fv.values == 2.5) and fv.depth == 2


def test_maxpool2(rng):
    x = rng.standard_normal((3, 4, 6, 2))
    y = maxpool2(x)
    assert y.shape == (3, 2, 3, 1)
    assert y[1, 1, 2, 0] == x[1, 2:4, 4:6, 0:2].max()


def test_translation_covariance():
    # compact blob well inside the field of view; a 4-voxel input shift is one
    # stage-1 step (stride-2 stem followed by a 2x max pool)
    x = np.zeros((64,) * 3)
    x[20:36, 22:38, 24:40] = ndimage.gaussian_filter(np.random.default_rng(5).random((16, 16, 16)), 1.0) + 1
    shifted = np.roll(x, 4, axis=0)
    a = encode(x, CFG64)[0]
    b = encode(shifted, CFG64)[0]
    # padding effects reach three positions in from each border
    assert np.allclose(b[:, 4:13], a[:, 3:12], atol=1e-5)
    assert not np.allclose(a, b, atol=1e-4)


def test_feature_vector_validation():
    with pytest.raises(InvalidArgumentError):
        FeatureVector(1, np.zeros(10))
    with pytest.raises(InvalidArgumentError):
        FeatureVector(5, np.zeros(64))
    with pytest.raises(InvalidArgumentError):
        FeatureVector(1, np.full(64, np.inf))


def test_csv_round_trip(tmp_path, rng):
    rows = [(FeatureVector(3, rng.standard_normal(256), f"s{i}"), "AD" if i % 2 else "CN") for i in range(5)]
    write_features(rows, tmp_path / "f.csv")
    header = (tmp_path / "f.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["subject_id", "label", "depth", "f0"] and header[-1] == "f255"
    back = read_features(tmp_path / "f.csv")
    for (fa, la), (fb, lb) in zip(rows, back):
        assert la == lb and fa.subject_id == fb.subject_id and fa.depth == fb.depth
        assert np.array_equal(fa.values, fb.values)
    (tmp_path / "g.csv").write_text("a,b,c\n")
    with pytest.raises(InvalidArgumentError):
        read_features(tmp_path / "g.csv")


def test_prepare_input():
    vol = make_volume(np.random.default_rng(0).random((128, 128, 128)), (1.5, 1.5, 1.5))
    out = prepare_input(vol, 64)
    assert out.dims == (64, 64, 64) and out.voxel_mm == (3.0, 3.0, 3.0)
    smoothed = prepare_input(vol, 64, 20.0)
    assert smoothed.data.std() < out.data.std()
    assert np.sum(smoothed.data) == pytest.approx(np.sum(out.data), rel=1e-3)
