import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fibrosisnet.errors import IoFailure
from fibrosisnet.explain import (
    OcclusionConfig,
    encode_pgm,
    occlusion_attribution,
    overlay_pixels,
    patch_effects,
    patch_origins,
    render_overlay,
)


def blob_model(box, gain=-10.0, bias=0.0):
    r0, r1, c0, c1 = box
    return lambda img: bias + gain * float(img[r0:r1, c0:c1].mean())


def blob_image(size=64, box=(20, 28, 30, 38), seed=0):
    rng = np.random.default_rng(seed)
    img = 0.2 + 0.05 * rng.random((size, size))
    r0, r1, c0, c1 = box
    img[r0:r1, c0:c1] = 1.0
    return img.astype(np.float32)


def test_config_validation():
    with pytest.raises(ValueError):
        OcclusionConfig(patch=4, stride=8)
    with pytest.raises(ValueError):
        OcclusionConfig(patch=4, stride=0)


@pytest.mark.parametrize(
    "size,patch,stride,expected",
    [(64, 16, 8, [0, 8, 16, 24, 32, 40, 48]), (10, 4, 4, [0, 4, 6]), (5, 8, 2, [0]), (8, 8, 8, [0])],
)
def test_patch_origins(size, patch, stride, expected):
    assert patch_origins(size, patch, stride) == expected


def test_constant_model_gives_zero_map():
    img = blob_image()
    attr = occlusion_attribution(lambda x: 3.0, img)
    assert attr.shape == img.shape and not attr.any()


def test_zero_weight_linear_model_gives_zero_map():
    w = np.zeros((32, 32))
    attr = occlusion_attribution(lambda x: float((w * x).sum()) - 5.0, blob_image(32, (4, 8, 4, 8)))
    assert not attr.any()


def test_single_pixel_driver():
    img = np.full((32, 32), 0.3, dtype=np.float32)
    fn = lambda x: 7.0 * float(x[13, 21])  # noqa: E731
    cfg = OcclusionConfig(patch=8, stride=4)
    effects = patch_effects(fn, img, cfg)
    # brute force: exactly the patches containing the pixel respond
    for (i, j), e in effects.items():
        covers = i <= 13 < i + 8 and j <= 21 < j + 8
        assert e == pytest.approx(7.0 * 0.3 if covers else 0.0, abs=1e-6)
    attr = occlusion_attribution(fn, img, cfg=cfg)
    assert attr[13, 21] == attr.max() > 0


def test_planted_lesion_mass_and_argmax():
    box = (20, 28, 30, 38)
    img = blob_image(box=box)
    fn = blob_model(box)
    cfg = OcclusionConfig()
    attr = occlusion_attribution(fn, img, cfg=cfg)
    r0, r1, c0, c1 = box
    p = cfg.patch
    dilated = attr[max(r0 - p, 0) : r1 + p, max(c0 - p, 0) : c1 + p]
    assert dilated.sum() >= 0.5 * attr.sum()
    effects = patch_effects(fn, img, cfg)
    best = max(effects.values())
    winners = [k for k, e in effects.items() if e == best]
    for i, j in winners:
        assert i <= r0 and r1 <= i + p and j <= c0 and c1 <= j + p


def test_occluding_with_identical_content_is_zero():
    img = np.full((24, 24), 0.5, dtype=np.float32)
    attr = occlusion_attribution(blob_model((4, 12, 4, 12)), img, cfg=OcclusionConfig(8, 4, baseline_value=0.5))
    assert not attr.any()


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100))
def test_invariant_to_bias_shift(bias):
    box = (8, 14, 8, 14)
    img = blob_image(32, box)
    cfg = OcclusionConfig(8, 4)
    a = occlusion_attribution(blob_model(box), img, cfg=cfg)
    b = occlusion_attribution(blob_model(box, bias=bias), img, cfg=cfg)
    np.testing.assert_allclose(a, b, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 40), st.integers(4, 40), st.integers(1, 12), st.data())
def test_map_matches_slice_dims(h, w, patch, data):
    stride = data.draw(st.integers(1, patch))
    img = np.random.default_rng(h * w).random((h, w))
    attr = occlusion_attribution(lambda x: float(x[: h // 2].sum()), img, cfg=OcclusionConfig(patch, stride))
    assert attr.shape == (h, w) and np.all(attr >= 0) and np.isfinite(attr).all()


def test_parallel_equals_sequential():
    box = (20, 28, 30, 38)
    img = blob_image(box=box, seed=3)
    fn = blob_model(box)
    np.testing.assert_array_equal(occlusion_attribution(fn, img, threads=1), occlusion_attribution(fn, img, threads=4))


def test_clinical_callable_form():
    img = blob_image(32, (4, 8, 4, 8))
    fn = lambda x, c: c * float(x[4:8, 4:8].mean())  # noqa: E731
    a = occlusion_attribution(fn, img, clinical=2.0, cfg=OcclusionConfig(8, 4))
    b = occlusion_attribution(lambda x: 2.0 * float(x[4:8, 4:8].mean()), img, cfg=OcclusionConfig(8, 4))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- overlay


def test_zero_map_overlay_is_plain_rendering():
    img = np.linspace(0, 1, 64).reshape(8, 8)
    np.testing.assert_array_equal(overlay_pixels(img, np.zeros((8, 8))), np.round(img * 255).astype(np.uint8))


def test_overlay_brightest_at_attribution_peak():
    img = np.full((16, 16), 0.2)
    attr = np.zeros((16, 16))
    attr[4:6, 9:11] = 3.0
    px = overlay_pixels(img, attr)
    assert px[4, 9] == 255 and px.max() == 255
    assert np.all(px[attr == 0] == round(0.2 * 255))


def test_overlay_shape_checked():
    with pytest.raises(ValueError):
        overlay_pixels(np.zeros((4, 4)), np.zeros((4, 5)))


def test_pgm_bytes(tmp_path):
    img = np.random.default_rng(0).random((6, 9))
    attr = np.random.default_rng(1).random((6, 9))
    a = render_overlay(img, attr, tmp_path / "a.pgm").read_bytes()
    b = render_overlay(img, attr, tmp_path / "b.pgm").read_bytes()
    assert a == b
    assert a.startswith(b"P5\n9 6\n255\n") and len(a) == len(b"P5\n9 6\n255\n") + 54
    assert encode_pgm(overlay_pixels(img, attr)) == a


def test_png_output(tmp_path):
    pil = pytest.importorskip("PIL.Image")
    img = np.random.default_rng(0).random((6, 9))
    path = render_overlay(img, np.zeros((6, 9)), tmp_path / "o.png")
    with pil.open(path) as im:
        np.testing.assert_array_equal(np.asarray(im), overlay_pixels(img, np.zeros((6, 9))))


def test_write_failure(tmp_path):
    with pytest.raises(IoFailure):
        render_overlay(np.zeros((4, 4)), np.zeros((4, 4)), tmp_path / "missing" / "x.pgm")
