import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapar.imaging import (DegradationSpec, Image, PatchMatrix, bicubic_resize, bicubic_resize_array,
                           blocking_plane, default_blur, degrade, extract_patches, keys_cubic, load_image,
                           quant_table, quantize8, resized_shape, save_image, simulate_blocking)


def keys_scalar(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_scalar(img, s):
    """Pointwise resampling: every output sample is a 4x4 weighted sum."""
    h, w = img.shape
    ho, wo = int(math.floor(h * s + 0.5)), int(math.floor(w * s + 0.5))
    out = np.zeros((ho, wo))
    for oy in range(ho):
        sy = (oy + 0.5) / s - 0.5
        for ox in range(wo):
            sx = (ox + 0.5) / s - 0.5
            acc = 0.0
            for iy in range(math.floor(sy) - 1, math.floor(sy) + 3):
                for ix in range(math.floor(sx) - 1, math.floor(sx) + 3):
                    wgt = keys_scalar(sy - iy) * keys_scalar(sx - ix)
                    acc += wgt * img[min(max(iy, 0), h - 1), min(max(ix, 0), w - 1)]
            out[oy, ox] = acc
    return out


def gray(px):
    return Image(np.asarray(px, dtype=float)[None], "Gray")


def test_image_rejects_nonfinite():
    with pytest.raises(ValueError):
        Image(np.array([[[np.nan]]]), "Gray")


def test_keys_kernel_values():
    assert keys_cubic(0.0) == 1.0
    assert keys_cubic(1.0) == pytest.approx(0.0, abs=1e-15)
    assert keys_cubic(2.0) == 0.0
    assert keys_cubic(0.5) == pytest.approx(0.5625)
    assert keys_cubic(1.5) == pytest.approx(-0.0625)
    t = np.linspace(-3, 3, 101)
    np.testing.assert_allclose(keys_cubic(t), [keys_scalar(v) for v in t], atol=1e-15)


def test_keys_partition_of_unity():
    for f in np.linspace(0, 1, 11):
        assert sum(keys_scalar(f - i) for i in range(-1, 3)) == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("s", [2, 3, 4, 0.5, "3/2"])
def test_constant_image_stays_constant(s):
    out = bicubic_resize(gray(np.full((12, 12), 0.37)), s)
    np.testing.assert_allclose(out.pixels, 0.37, atol=1e-14)


def test_scale_one_is_identity():
    px = np.random.default_rng(0).random((3, 7, 5))
    np.testing.assert_allclose(bicubic_resize_array(px, 1), px, atol=1e-12)


def test_ramp_x2_matches_pointwise_formula():
    yy, xx = np.mgrid[0:8, 0:10]
    ramp = 0.02 * yy + 0.05 * xx + 0.1
    out = bicubic_resize_array(ramp, 2, clamp=False)
    np.testing.assert_allclose(out, bicubic_scalar(ramp, 2), atol=1e-13)


def test_random_image_x3_matches_pointwise_formula():
    img = np.random.default_rng(3).random((5, 6))
    np.testing.assert_allclose(bicubic_resize_array(img, 3, clamp=False), bicubic_scalar(img, 3), atol=1e-13)


def test_bicubic_clamps():
    img = np.zeros((6, 6))
    img[2:4, 2:4] = 1.0
    raw = bicubic_resize_array(img, 2, clamp=False)
    assert raw.min() < 0 and raw.max() > 1
    out = bicubic_resize_array(img, 2)
    assert out.min() >= 0 and out.max() <= 1


def test_resize_output_shape_and_rejects_empty():
    assert resized_shape(10, 7, 2) == (20, 14)
    assert resized_shape(10, 7, "1/2") == (5, 4)
    with pytest.raises(ValueError):
        bicubic_resize_array(np.zeros((2, 2)), 0.1)


def test_degrade_plain_decimation():
    hr = Image(np.random.default_rng(0).random((3, 8, 6)), "RGB")
    lr = degrade(hr, DegradationSpec("sr", 2, blur=None))
    np.testing.assert_array_equal(lr.pixels, hr.pixels[:, ::2, ::2])


def test_degrade_blur_then_decimate_matches_direct_convolution():
    yy, xx = np.mgrid[0:12, 0:12]
    ramp = (0.03 * yy + 0.04 * xx) / 1.0
    hr = gray(ramp)
    spec = default_blur(2)
    assert spec.sigma1 == pytest.approx(0.8)
    lr = degrade(hr, DegradationSpec("sr", 2, blur=spec))

    # direct convolution with a sum-normalised Gaussian on a reflect-101 border
    r = 3  # ceil(3 * 0.8)
    taps = np.array([[math.exp(-(x * x + y * y) / (2 * 0.64)) for x in range(-r, r + 1)]
                     for y in range(-r, r + 1)])
    taps /= taps.sum()
    padded = np.pad(ramp, r, mode="reflect")
    blurred = np.zeros_like(ramp)
    for y in range(12):
        for x in range(12):
            blurred[y, x] = np.sum(padded[y:y + 2 * r + 1, x:x + 2 * r + 1] * taps)
    np.testing.assert_allclose(lr.pixels[0], blurred[::2, ::2], atol=1e-13)


def test_degrade_indivisible_rejected_with_hint():
    with pytest.raises(ValueError, match="crop to 8x6"):
        degrade(gray(np.zeros((9, 7))), DegradationSpec("sr", 2))


def test_degrade_noise():
    hr = gray(np.full((64, 64), 0.5))
    assert np.array_equal(degrade(hr, DegradationSpec("denoise", noise_sigma=0.0)).pixels, hr.pixels)
    a = degrade(hr, DegradationSpec("denoise", noise_sigma=0.1), seed=3)
    b = degrade(hr, DegradationSpec("denoise", noise_sigma=0.1), seed=3)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert np.std(a.pixels - 0.5) == pytest.approx(0.1, rel=0.05)


def test_noise_sigma_distribution_chi_square():
    # sample variance of n normals: (n-1) s^2 / sigma^2 ~ chi2(n-1); check 99.9% band
    from scipy.stats import chi2

    n = 4096
    hr = gray(np.full((64, 64), 0.5))
    sigma = 10 / 255
    for seed in range(5):
        noise = degrade(hr, DegradationSpec("denoise", noise_sigma=sigma), seed).pixels.ravel() - 0.5
        stat = (n - 1) * noise.var(ddof=1) / sigma ** 2
        assert chi2.ppf(0.0005, n - 1) < stat < chi2.ppf(0.9995, n - 1)


def test_task_fields():
    assert DegradationSpec("denoise", scale=4).scale == 1
    with pytest.raises(ValueError):
        DegradationSpec("deblock")
    with pytest.raises(ValueError):
        DegradationSpec("upscale")


def test_quant_table():
    np.testing.assert_array_equal(quant_table(50)[0, :3], [16, 11, 10])
    assert np.all(quant_table(100) == 1)
    with pytest.raises(ValueError):
        quant_table(0)


def test_blocking_single_block_matches_direct_dct():
    rng = np.random.default_rng(1)
    block = np.floor(rng.random((8, 8)) * 256) / 255
    q = quant_table(20)

    def c(u):
        return math.sqrt(1 / 8) if u == 0 else math.sqrt(2 / 8)

    basis = np.array([[c(u) * math.cos((2 * x + 1) * u * math.pi / 16) for x in range(8)] for u in range(8)])
    f = block * 255 - 128
    coef = np.zeros((8, 8))
    for u in range(8):
        for v in range(8):
            coef[u, v] = sum(basis[u, x] * basis[v, y] * f[x, y] for x in range(8) for y in range(8))
    coef = np.round(coef / q) * q
    rec = np.zeros((8, 8))
    for x in range(8):
        for y in range(8):
            rec[x, y] = sum(basis[u, x] * basis[v, y] * coef[u, v] for u in range(8) for v in range(8))
    want = np.clip(np.floor(rec + 128 + 0.5), 0, 255) / 255
    np.testing.assert_array_equal(blocking_plane(block, 20), want)


def test_blocking_quality_100_near_identity():
    px = np.floor(np.random.default_rng(2).random((24, 16)) * 256) / 255
    out = blocking_plane(px, 100)
    assert np.abs(out - px).max() <= 1 / 255 + 1e-12


def test_blocking_constant_and_shape():
    img = Image(np.full((3, 13, 10), 100 / 255), "RGB")
    out = simulate_blocking(img, 25)
    assert out.pixels.shape == img.pixels.shape
    np.testing.assert_allclose(out.pixels, 100 / 255, atol=1e-12)


def test_blocking_lower_quality_is_worse():
    px = np.random.default_rng(4).random((32, 32))
    err = [np.mean((blocking_plane(px, q) - px) ** 2) for q in (90, 50, 10)]
    assert err[0] < err[1] < err[2]


def test_extract_patches_examples():
    assert np.all(extract_patches(gray(np.full((4, 5), 0.3)), 3).data == 0.3)
    img = np.arange(9.0).reshape(3, 3)
    p = extract_patches(gray(img), 3)
    np.testing.assert_array_equal(p.data[4], img.ravel())
    assert isinstance(p, PatchMatrix) and p.rows == 9 and p.padding == "reflect101"


def test_extract_patches_corner_mirroring():
    ramp = np.arange(16.0).reshape(4, 4)
    p = extract_patches(gray(ramp), 3).data
    # (0, 0): rows/cols -1 -> 1 under reflect-101
    np.testing.assert_array_equal(p[0], [5, 4, 5, 1, 0, 1, 5, 4, 5])
    # (3, 3): rows/cols 4 -> 2
    np.testing.assert_array_equal(p[15], [10, 11, 10, 14, 15, 14, 10, 11, 10])


def test_extract_patches_rejects_multichannel():
    with pytest.raises(ValueError):
        extract_patches(Image(np.zeros((3, 4, 4)), "RGB"))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-0.5, 1.5), min_size=1, max_size=40))
def test_quantize8_rule(vals):
    v = np.array(vals)
    q = quantize8(v)
    np.testing.assert_array_equal(q, np.floor(np.clip(v, 0, 1) * 255 + 0.5))


@pytest.mark.parametrize("suffix", [".png", ".ppm"])
def test_save_load_roundtrip(tmp_path, suffix):
    px = np.floor(np.random.default_rng(5).random((3, 6, 7)) * 256) / 255
    p = tmp_path / f"x{suffix}"
    save_image(Image(px, "RGB"), p)
    back = load_image(p)
    np.testing.assert_array_equal(back.pixels, px)


def test_gray_roundtrip_and_jpeg_input(tmp_path):
    from PIL import Image as PILImage

    px = np.floor(np.random.default_rng(6).random((1, 16, 16)) * 256) / 255
    save_image(Image(px, "Gray"), tmp_path / "g.png")
    back = load_image(tmp_path / "g.png")
    assert back.colorspace == "Gray"
    np.testing.assert_array_equal(back.pixels, px)
    rgb = (np.random.default_rng(7).random((16, 16, 3)) * 255).astype(np.uint8)
    PILImage.fromarray(rgb).save(tmp_path / "c.jpg", quality=30)
    assert load_image(tmp_path / "c.jpg").pixels.shape == (3, 16, 16)
