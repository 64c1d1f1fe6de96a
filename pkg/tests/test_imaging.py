import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ltd.errors import CodecError, DimensionError, LTDIOError, ParameterError
from ltd.imaging import (DegradeSpec, apply_degradations, degrade_blur, degrade_downsample, degrade_jpeg,
                         gaussian_kernel, load_image, preprocess, resize_bilinear, save_image)
from ltd.synthetic import synth_image
from oracles import gaussian_weights, psnr


def smooth_image(h=64, w=64):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    return np.stack([0.2 + 0.6 * xx, 0.3 + 0.4 * yy, 0.5 + 0.2 * xx * yy], -1).astype(np.float32)


def textured_image(seed=0, h=64, w=64):
    rng = np.random.default_rng(seed)
    return np.clip(smooth_image(h, w) + rng.normal(0, 0.08, (h, w, 3)), 0, 1).astype(np.float32)


# Weights from evaluating exp(-x^2 / 2 sigma^2) at x = -1, 0, 1 and normalising (sigma = 0.8).
BLUR_K3_S08 = (0.2389942656229905, 0.5220114687540189)


def test_blur_weights_oracle():
    k = gaussian_kernel(3, 0.8)
    np.testing.assert_allclose(k, gaussian_weights(3, 0.8), rtol=0, atol=1e-15)
    np.testing.assert_allclose([k[0], k[1]], BLUR_K3_S08, atol=1e-12)
    assert abs(k.sum() - 1.0) < 1e-6


def test_blur_impulse_gives_normalised_stencil():
    img = np.zeros((5, 5, 3), np.float32)
    img[2, 2] = 1.0
    out = degrade_blur(img, 3, 0.8)
    w = np.array(gaussian_weights(3, 0.8))
    np.testing.assert_allclose(out[1:4, 1:4, 0], np.outer(w, w), atol=1e-7)
    assert abs(out[..., 0].sum() - 1.0) < 1e-6


@pytest.mark.parametrize("value", [0.0, 0.3, 0.5019608, 1.0])
def test_constant_images_survive_every_resampler(value):
    img = np.full((17, 23, 3), value, np.float32)
    assert np.array_equal(degrade_blur(img, 3, 0.8), img)
    assert np.array_equal(degrade_blur(img, 5, 2.0), img)
    assert np.array_equal(degrade_downsample(img, 0.37), np.full((6, 8, 3), value, np.float32))
    assert np.array_equal(preprocess(img, False, resize=32, crop=28), np.full((28, 28, 3), value, np.float32))
    assert np.array_equal(preprocess(img, True, np.random.default_rng(0), 32, 28), np.full((28, 28, 3), value,
                                                                                            np.float32))


def test_identities():
    img = textured_image()
    assert np.array_equal(degrade_downsample(img, 1.0), img)
    assert np.array_equal(degrade_blur(img, 1, 0.8), img)
    assert np.array_equal(apply_degradations(img, []), img)
    assert np.array_equal(resize_bilinear(img, 64, 64), img)


def test_downsample_size():
    assert degrade_downsample(np.zeros((224, 224, 3)), 0.5).shape == (112, 112, 3)
    assert degrade_downsample(np.zeros((7, 9, 3)), 0.5).shape == (3, 4, 3)
    with pytest.raises(DimensionError):
        degrade_downsample(np.zeros((3, 3, 3)), 0.2)
    with pytest.raises(ParameterError):
        degrade_downsample(np.zeros((3, 3, 3)), 1.5)


def test_bilinear_half_pixel_downscale_by_two_averages_pairs():
    img = np.arange(8, dtype=np.float32).reshape(1, 8, 1).repeat(3, -1) / 10
    out = resize_bilinear(np.repeat(img, 2, 0), 2, 4)
    np.testing.assert_allclose(out[0, :, 0], [0.05, 0.25, 0.45, 0.65], atol=1e-7)


def test_jpeg_q100_is_near_lossless():
    for img in (smooth_image(), textured_image(1), synth_image(0, 0, 0, 32), synth_image(0, 1, 0, 32)):
        assert psnr(img, degrade_jpeg(img, 100)) >= 40.0


def test_jpeg_recompression_changes_less():
    img = textured_image(2)
    once = degrade_jpeg(img, 60)
    twice = degrade_jpeg(once, 60)
    assert psnr(once, twice) > psnr(img, once)


@pytest.mark.parametrize("q", [0, 101, 50.5])
def test_jpeg_quality_range(q):
    with pytest.raises(ParameterError):
        degrade_jpeg(smooth_image(), q)


def test_even_blur_kernel_rejected():
    with pytest.raises(ParameterError):
        degrade_blur(smooth_image(), 4, 0.8)
    with pytest.raises(ParameterError):
        DegradeSpec("blur", kernel=3, sigma=0.0)


def test_center_crop_offset():
    img = np.random.default_rng(0).uniform(size=(256, 256, 3)).astype(np.float32)
    out = preprocess(img, False, resize=256, crop=224)
    assert np.array_equal(out, img[16:240, 16:240])


def test_train_preprocess_is_seeded():
    img = textured_image(3)
    a = preprocess(img, True, np.random.default_rng(7), 72, 64)
    b = preprocess(img, True, np.random.default_rng(7), 72, 64)
    assert np.array_equal(a, b)
    outs = {preprocess(img, True, np.random.default_rng(s), 72, 64).tobytes() for s in range(20)}
    assert len(outs) > 5


def test_train_preprocess_needs_rng():
    with pytest.raises(ParameterError):
        preprocess(smooth_image(), True)


def test_degenerate_input():
    with pytest.raises(DimensionError):
        preprocess(np.zeros((0, 4, 3)))
    with pytest.raises(DimensionError):
        preprocess(np.zeros((4, 4)))


def test_chained_degradations_apply_in_order():
    img = textured_image(4)
    specs = [DegradeSpec("downsample", factor=0.5), DegradeSpec("blur", kernel=3, sigma=0.8)]
    want = degrade_blur(degrade_downsample(img, 0.5), 3, 0.8)
    assert np.array_equal(apply_degradations(img, specs), want)


def test_png_round_trip_and_decode_errors(tmp_path):
    img = textured_image(5, 10, 12)
    save_image(img, tmp_path / "x.png")
    back = load_image(tmp_path / "x.png")
    assert back.shape == (10, 12, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(CodecError):
        load_image(tmp_path / "bad.png")
    with pytest.raises(LTDIOError):
        load_image(tmp_path / "missing.png")


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(2, 12), st.integers(2, 12), st.just(3)),
              elements=st.floats(-0.5, 1.5, width=32)),
       st.floats(0.1, 1.0), st.sampled_from([1, 3, 5]))
def test_outputs_stay_in_unit_range(img, factor, kernel):
    for out in (degrade_blur(img, kernel, 1.0), resize_bilinear(img, 5, 7),
                degrade_jpeg(np.clip(img, 0, 1), 75)):
        assert out.dtype == np.float32 and out.min() >= 0.0 and out.max() <= 1.0
    h, w = int(np.floor(img.shape[0] * factor)), int(np.floor(img.shape[1] * factor))
    if h >= 1 and w >= 1:
        out = degrade_downsample(img, factor)
        assert out.min() >= 0 and out.max() <= 1
