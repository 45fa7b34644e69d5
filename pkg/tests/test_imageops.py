import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitsr import imageops as io
from vitsr.errors import ContractError, DimensionError


def catmull_rom(x):
    # written out independently of the library kernel
    x = abs(x)
    if x <= 1:
        return 1.5 * x ** 3 - 2.5 * x ** 2 + 1
    if x < 2:
        return -0.5 * x ** 3 + 2.5 * x ** 2 - 4 * x + 2
    return 0.0


def brute_force_resize(img, out_h, out_w):
    h, w = img.shape[:2]
    out = np.zeros((out_h, out_w) + img.shape[2:])
    for i in range(out_h):
        sy = (i + 0.5) * h / out_h - 0.5
        for j in range(out_w):
            sx = (j + 0.5) * w / out_w - 0.5
            acc = 0.0
            for yy in range(int(math.floor(sy)) - 1, int(math.floor(sy)) + 3):
                for xx in range(int(math.floor(sx)) - 1, int(math.floor(sx)) + 3):
                    wgt = catmull_rom(sy - yy) * catmull_rom(sx - xx)
                    acc = acc + wgt * img[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]
            out[i, j] = acc
    return np.clip(out, 0, 1)


class TestBicubic:
    def test_phase_half_weights(self):
        expected = [catmull_rom(1.5), catmull_rom(0.5), catmull_rom(0.5), catmull_rom(1.5)]
        np.testing.assert_allclose(expected, [-0.0625, 0.5625, 0.5625, -0.0625], atol=1e-12)
        np.testing.assert_allclose(io.cubic_weights(0.5), expected, atol=1e-9)

    def test_quarter_downscale_uses_phase_half(self):
        row = io.resample_matrix(16, 4)[1]
        np.testing.assert_allclose(row[4:8], [-0.0625, 0.5625, 0.5625, -0.0625], atol=1e-12)

    def test_phase_zero_is_identity_tap(self):
        np.testing.assert_array_equal(io.cubic_weights(0.0), [0, 1, 0, 0])

    @pytest.mark.parametrize("phase", np.linspace(0, 0.999, 37))
    def test_partition_of_unity(self, phase):
        assert abs(io.cubic_weights(phase).sum() - 1) <= 1e-6

    @settings(max_examples=25, deadline=None)
    @given(c=st.floats(0, 1), h=st.integers(1, 20), w=st.integers(1, 20),
           oh=st.integers(1, 40), ow=st.integers(1, 40))
    def test_constant_fixed_point(self, c, h, w, oh, ow):
        out = io.bicubic_resize(np.full((h, w, 3), c, dtype=np.float32), oh, ow)
        np.testing.assert_allclose(out, np.float32(c), atol=1e-6)

    def test_same_size_is_exact(self, rng):
        img = rng.uniform(0, 1, (9, 7, 3)).astype(np.float32)
        np.testing.assert_array_equal(io.bicubic_resize(img, 9, 7), img)

    @pytest.mark.parametrize("shape,out", [((8, 8), (2, 2)), ((5, 6), (13, 9)), ((12, 4), (3, 16))])
    def test_matches_brute_force(self, rng, shape, out):
        img = rng.uniform(0, 1, shape + (3,))
        np.testing.assert_allclose(io.bicubic_resize(img, *out), brute_force_resize(img, *out),
                                   atol=1e-6)

    def test_output_clamped(self):
        img = np.zeros((8, 8, 3))
        img[:, 4:] = 1.0  # sharp edge overshoots under Catmull-Rom
        out = io.bicubic_resize(img, 32, 32)
        assert out.min() >= 0 and out.max() <= 1
        assert io.resample(img, 32, 32).max() > 1

    def test_zero_size(self):
        with pytest.raises(DimensionError):
            io.bicubic_resize(np.zeros((4, 4, 3)), 0, 4)


class TestGray:
    @pytest.mark.parametrize("rgb,expected", [((1, 1, 1), 1.0), ((1, 0, 0), 0.299),
                                              ((0, 0, 0), 0.0)])
    def test_rec601(self, rgb, expected):
        img = np.array(rgb, dtype=np.float32).reshape(1, 1, 3)
        assert io.rgb_to_gray(img)[0, 0] == pytest.approx(expected, abs=1e-6)


class TestPSNR:
    def test_identical_is_inf(self, rng):
        x = rng.uniform(0, 1, (8, 8, 3))
        assert io.psnr(x, x) == math.inf

    @pytest.mark.parametrize("d,expected", [(0.1, 20.0), (0.5, 6.020599913279624)])
    def test_uniform_difference(self, d, expected):
        x = np.full((4, 5, 3), 0.2)
        assert io.psnr(x, x + d) == pytest.approx(expected, abs=1e-6)

    def test_symmetric_and_monotone(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        noise = rng.uniform(-1, 1, x.shape)
        values = [io.psnr(x, x + a * noise) for a in (0.01, 0.05, 0.1, 0.3)]
        assert all(a > b for a, b in zip(values, values[1:]))
        y = x + 0.1 * noise
        assert io.psnr(x, y) == io.psnr(y, x)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            io.psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


class TestSSIM:
    def test_self_similarity(self, rng):
        x = rng.uniform(0, 1, (20, 24, 3))
        assert io.ssim(x, x) == pytest.approx(1.0, abs=1e-6)

    def test_constant_images_closed_form(self):
        c1 = 0.01 ** 2
        value = io.ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3)))
        assert value == pytest.approx(c1 / (1 + c1), abs=1e-7)

    def test_symmetric_exactly(self, rng):
        x, y = rng.uniform(0, 1, (2, 16, 16, 3))
        assert io.ssim(x, y) == io.ssim(y, x)

    def test_range(self, rng):
        x = rng.uniform(0, 1, (16, 16, 3))
        assert -1 <= io.ssim(x, 1 - x) <= 1

    def test_matches_scikit_image(self, rng):
        metrics = pytest.importorskip("skimage.metrics")
        x = rng.uniform(0, 1, (30, 27, 3))
        y = np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1)
        ref = metrics.structural_similarity(x, y, channel_axis=2, gaussian_weights=True,
                                            sigma=1.5, use_sample_covariance=False,
                                            data_range=1.0)
        assert io.ssim(x, y) == pytest.approx(ref, abs=1e-9)

    def test_too_small(self):
        with pytest.raises(ContractError):
            io.ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


def test_degradation_baseline_sits_between(rng):
    from vitsr.data import synthetic_image
    img = synthetic_image(64, rng).astype(np.float32)
    restored = io.bicubic_resize(io.bicubic_resize(img, 16, 16), 64, 64)
    random_pair = io.psnr(rng.uniform(0, 1, img.shape), rng.uniform(0, 1, img.shape))
    assert random_pair < io.psnr(restored, img) < math.inf


def test_png_roundtrip(tmp_path, rng):
    img = np.round(rng.uniform(0, 1, (7, 9, 3)) * 255) / 255
    io.write_png(tmp_path / "a.png", img)
    back = io.read_png(tmp_path / "a.png")
    assert back.shape == (7, 9, 3) and back.dtype == np.float32
    np.testing.assert_allclose(back, img, atol=1e-6)
