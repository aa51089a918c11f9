import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionpet.errors import CorruptFileError, InvalidArgumentError
from motionpet.volume import (Volume3D, centered_origin, convolve_gaussian, gaussian_kernel_1d,
                              read_volume, resample, write_volume)

from conftest import make_volume


def measured_fwhm(profile, pitch):
    """Width at half maximum by linear interpolation on both flanks."""
    p = np.asarray(profile, dtype=float)
    i = int(np.argmax(p))
    half = p[i] / 2.0
    left = i
    while p[left] > half:
        left -= 1
    right = i
    while p[right] > half:
        right += 1
    xl = left + (half - p[left]) / (p[left + 1] - p[left])
    xr = right - 1 + (p[right - 1] - half) / (p[right - 1] - p[right])
    return (xr - xl) * pitch


def test_rejects_bad_construction():
    with pytest.raises(InvalidArgumentError):
        Volume3D(np.zeros((2, 2)), (1, 1, 1), (0, 0, 0))
    with pytest.raises(InvalidArgumentError):
        Volume3D(np.zeros((2, 2, 2)), (1, 0, 1), (0, 0, 0))


def test_resample_identity_is_bit_identical(rng):
    v = make_volume(rng.random((5, 6, 7)))
    out = resample(v, v.dims)
    assert out.dims == v.dims
    assert np.array_equal(out.data, v.data)
    assert out.voxel_mm == v.voxel_mm and out.origin_mm == v.origin_mm


def test_resample_preserves_integral_by_explicit_sum(rng):
    data = rng.random((8, 8, 8))
    v = make_volume(data, (2.0, 2.0, 2.0))
    out = resample(v, (4, 4, 4))
    before = sum(float(x) for x in data.ravel()) * 8.0
    after = sum(float(x) for x in out.data.ravel()) * float(np.prod(out.voxel_mm))
    assert after == pytest.approx(before, rel=1e-6)
    # a 2x2x2 block average, checked directly
    assert out.data[1, 2, 3] == pytest.approx(data[2:4, 4:6, 6:8].mean(), rel=1e-12)


def test_resample_clinical_grid_pitch():
    v = Volume3D(np.zeros((256, 256, 207), dtype=np.float32), (1.22, 1.22, 1.23), (0.0, 0.0, 0.0))
    out = resample(v, (128, 128, 128))
    assert out.dims == (128, 128, 128)
    expected = v.extent_mm / 128
    assert np.allclose(out.voxel_mm, expected, atol=1e-12)
    assert np.allclose(out.voxel_mm, (2.44, 2.44, 1.98), atol=0.01)
    # extent and lower corner are unchanged
    assert np.allclose(out.lower_corner_mm, v.lower_corner_mm)


@settings(max_examples=25, deadline=None)
@given(st.tuples(*[st.integers(2, 9)] * 3), st.tuples(*[st.integers(1, 9)] * 3), st.integers(0, 2**32 - 1))
def test_double_resample_preserves_integral(src, dst, seed):
    data = np.random.default_rng(seed).random(src)
    v = make_volume(data, (1.5, 2.0, 2.5))
    back = resample(resample(v, dst), src)
    assert back.integral() == pytest.approx(v.integral(), rel=2e-6)


def test_resample_rejects_bad_dims(rng):
    with pytest.raises(InvalidArgumentError):
        resample(make_volume(rng.random((2, 2, 2))), (0, 2, 2))


def test_convolve_zero_fwhm_is_bit_identical(rng):
    v = make_volume(rng.random((6, 6, 6)))
    out = convolve_gaussian(v, 0.0)
    assert np.array_equal(out.data, v.data)
    assert out.data is not v.data


def test_impulse_fwhm_matches_psf():
    n = 41
    data = np.zeros((n, n, n))
    data[n // 2, n // 2, n // 2] = 1.0
    out = convolve_gaussian(make_volume(data), 2.5).data
    c = n // 2
    for profile in (out[:, c, c], out[c, :, c], out[c, c, :]):
        assert abs(measured_fwhm(profile, 1.0) - 2.5) <= 1.0
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_convolve_matches_dense_convolution(rng):
    n = 16
    data = rng.random((n, n, n))
    fwhm, pitch = 4.0, 1.5
    v = make_volume(data, (pitch,) * 3)
    out = convolve_gaussian(v, fwhm).data
    k = gaussian_kernel_1d(fwhm, pitch)
    r = k.size // 2
    k3 = k[:, None, None] * k[None, :, None] * k[None, None, :]

    # half-sample symmetric extension, then direct spatial sum
    def reflect(i):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - i - 1
        return i

    idx = [reflect(i) for i in range(-r, n + r)]
    padded = data[np.ix_(idx, idx, idx)]
    for (x, y, z) in [(0, 0, 0), (3, 7, 15), (8, 8, 8), (15, 1, 9), (n - 1, n - 1, n - 1)]:
        direct = float(np.sum(padded[x:x + 2 * r + 1, y:y + 2 * r + 1, z:z + 2 * r + 1] * k3))
        assert out[x, y, z] == pytest.approx(direct, abs=1e-10)


def test_kernel_truncation_and_normalization():
    k = gaussian_kernel_1d(2.5, 1.0)
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    sigma = 2.5 / 2.3548
    assert k.size == 2 * int(np.ceil(4 * sigma)) + 1


def test_convolve_linear_and_nonnegative(rng):
    v = make_volume(rng.random((10, 9, 8)), (2.0, 2.0, 3.0))
    c = 3.7
    a = convolve_gaussian(v.like(c * v.data), 5.0).data
    b = c * convolve_gaussian(v, 5.0).data
    assert np.max(np.abs(a - b) / np.abs(b)) < 1e-12
    assert np.all(convolve_gaussian(v, 7.0).data >= 0)


def test_convolve_rejects_negative_fwhm(rng):
    with pytest.raises(InvalidArgumentError):
        convolve_gaussian(make_volume(rng.random((3, 3, 3))), -1.0)


def test_pvol_round_trip(tmp_path, rng):
    v = Volume3D(rng.random((4, 4, 4)).astype(np.float32), (1.5, 2.0, 2.5), (-3.0, 1.0, 7.5))
    write_volume(v, tmp_path / "v.pvol")
    back = read_volume(tmp_path / "v.pvol")
    assert np.array_equal(back.data, v.data)
    assert back.voxel_mm == v.voxel_mm and back.origin_mm == v.origin_mm


def test_pvol_x_fastest_layout(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    write_volume(make_volume(data), tmp_path / "v.pvol")
    raw = (tmp_path / "v.pvol").read_bytes()
    payload = np.frombuffer(raw[-24 * 4:], dtype="<f4")
    assert payload[1] == data[1, 0, 0]
    assert payload[2] == data[0, 1, 0]


def test_pvol_bad_magic(tmp_path, rng):
    write_volume(make_volume(rng.random((2, 2, 2))), tmp_path / "v.pvol")
    raw = bytearray((tmp_path / "v.pvol").read_bytes())
    raw[:4] = b"XVOL"
    (tmp_path / "bad.pvol").write_bytes(bytes(raw))
    with pytest.raises(CorruptFileError):
        read_volume(tmp_path / "bad.pvol")


def test_pvol_truncated_payload(tmp_path, rng):
    write_volume(make_volume(rng.random((2, 2, 2))), tmp_path / "v.pvol")
    raw = (tmp_path / "v.pvol").read_bytes()
    (tmp_path / "short.pvol").write_bytes(raw[:-4])  # 7 of 8 scalars
    with pytest.raises(CorruptFileError):
        read_volume(tmp_path / "short.pvol")


def test_centered_origin_symmetric():
    o = centered_origin((4, 5, 6), (2.0, 2.0, 2.0))
    v = Volume3D(np.zeros((4, 5, 6)), (2.0, 2.0, 2.0), o)
    assert np.allclose(v.lower_corner_mm + v.extent_mm / 2, 0.0)
