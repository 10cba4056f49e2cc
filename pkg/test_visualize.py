"""
Tests for attention overlays and image files.
"""

import logging

import numpy as np
import png
import pytest

from models import AttentionMask, Colormap, ConfigError, GeometryError, ImageIOError, NormMode, OverlayConfig, ShapeError
from visualize import (
    ImageRGB,
    frame_name,
    hstack,
    overlay,
    parse_ppm,
    ppm_bytes,
    read_ppm,
    render_attention,
    upsample_nearest,
    write_images,
    write_png,
    write_ppm,
)


def random_image(rng, width, height):
    return ImageRGB(width, height, rng.integers(0, 256, (height, width, 3), dtype=np.uint8))


# ============================================================================
# Upsampling
# ============================================================================


def test_upsample_two_by_two():
    up = upsample_nearest(np.array([[0.1, 0.2], [0.3, 0.4]]), 4, 4)
    np.testing.assert_array_equal(
        up,
        [[0.1, 0.1, 0.2, 0.2], [0.1, 0.1, 0.2, 0.2], [0.3, 0.3, 0.4, 0.4], [0.3, 0.3, 0.4, 0.4]],
    )


def test_upsample_identity_and_mass(rng):
    weights = rng.random((5, 5))
    weights /= weights.sum()
    np.testing.assert_array_equal(upsample_nearest(AttentionMask(weights), 5, 5), weights)
    assert upsample_nearest(weights, 40, 40).sum() == pytest.approx(64.0)


def test_upsample_uneven_blocks_follow_naive_map():
    up = upsample_nearest(np.array([[1.0, 2.0, 3.0]]), 1, 7)
    # blocks [0, 2), [2, 5), [5, 7) with round-half-up edges
    np.testing.assert_array_equal(up, [[1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0]])


def test_upsample_errors():
    with pytest.raises(GeometryError):
        upsample_nearest(np.ones((4, 4)), 3, 8)
    with pytest.raises(ShapeError):
        upsample_nearest(np.ones((2, 2, 2)), 4, 4)


# ============================================================================
# Overlay
# ============================================================================


def test_overlay_full_attention_keeps_frame(rng):
    frame = rng.random((6, 6))
    img = overlay(frame, np.full((6, 6), 1 / 36))
    expected = np.floor(frame * 255 + 0.5).astype(np.uint8)
    for channel in range(3):
        np.testing.assert_array_equal(img.pixels[..., channel], expected)


def test_overlay_ignored_pixels_are_darkened():
    frame = np.full((2, 2), 1.0)
    mask = np.array([[1.0, 0.0], [0.0, 0.0]])
    img = overlay(frame, mask, OverlayConfig(darken_factor=0.25))
    assert img.pixels[0, 0, 0] == 255
    assert img.pixels[1, 1, 0] == 64


def test_overlay_is_monotone_in_mask(rng):
    frame = rng.random((4, 4))
    mask = rng.random((4, 4))
    bigger = mask.copy()
    bigger[1, 2] += 0.3
    bigger[1, 2] = min(bigger[1, 2], mask.max())
    a = overlay(frame, mask).pixels.astype(int)
    b = overlay(frame, bigger).pixels.astype(int)
    assert b[1, 2, 0] >= a[1, 2, 0]


@pytest.mark.parametrize("mode", NormMode.ALL)
def test_overlay_scale_invariant(rng, mode):
    frame = rng.random((8, 8))
    mask = rng.random((8, 8))
    cfg = OverlayConfig(normalization=mode)
    assert overlay(frame, mask, cfg) == overlay(frame, mask * 4.0, cfg)


def test_overlay_all_zero_mask_warns(caplog):
    frame = np.full((2, 2), 0.5)
    with caplog.at_level(logging.WARNING, logger="visualize"):
        img = overlay(frame, np.zeros((2, 2)), OverlayConfig(darken_factor=0.5))
    assert "all zero" in caplog.text
    assert set(img.pixels.ravel().tolist()) == {64}


def test_overlay_heat_tint():
    frame = np.ones((1, 2))
    img = overlay(frame, np.array([[1.0, 0.0]]), OverlayConfig(darken_factor=0.0, colormap=Colormap.HEAT))
    assert img.pixels[0, 0].tolist() == [255, 255, 255]
    assert img.pixels[0, 1].tolist() == [0, 0, 0]
    half = overlay(np.ones((1, 2)), np.array([[1.0, 0.0]]), OverlayConfig(darken_factor=0.5, colormap=Colormap.HEAT))
    assert half.pixels[0, 1].tolist() == [128, 64, 0]


def test_overlay_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        overlay(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        overlay(np.zeros((2, 2)), np.zeros((2, 2)), OverlayConfig(darken_factor=1.5))


def test_render_attention_upsamples_mask():
    frame = np.ones((4, 4))
    mask = AttentionMask(np.array([[0.5, 0.25], [0.25, 0.0]]))
    img = render_attention(frame, mask, OverlayConfig(darken_factor=0.0))
    assert img.pixels[0, 0, 0] == 255 and img.pixels[0, 3, 0] == 128 and img.pixels[3, 3, 0] == 0


# ============================================================================
# Image files
# ============================================================================


def test_ppm_bytes_single_white_pixel():
    img = ImageRGB(1, 1, np.array([255, 255, 255]))
    assert ppm_bytes(img) == b"P6\n1 1\n255\n\xff\xff\xff"


def test_ppm_round_trip(tmp_path, rng):
    for i in range(100):
        width, height = int(rng.integers(1, 20)), int(rng.integers(1, 20))
        img = random_image(rng, width, height)
        path = write_ppm(img, tmp_path / f"{i}.ppm")
        header = f"P6\n{width} {height}\n255\n".encode("ascii")
        assert path.stat().st_size == len(header) + 3 * width * height
        assert read_ppm(path) == img


def test_parse_ppm_accepts_comments():
    img = parse_ppm(b"P6\n# made by hand\n2 1\n255\n\x00\x01\x02\x03\x04\x05")
    assert (img.width, img.height) == (2, 1)
    assert img.pixels[0, 1].tolist() == [3, 4, 5]


@pytest.mark.parametrize(
    "raw",
    [b"P3\n1 1\n255\n\x00\x00\x00", b"P6\n1 1\n65535\n\x00\x00\x00", b"P6\n2 2\n255\n\x00\x00\x00", b"P6\n1"],
)
def test_parse_ppm_errors(raw):
    with pytest.raises(ImageIOError):
        parse_ppm(raw)


def test_read_missing_ppm(tmp_path):
    with pytest.raises(ImageIOError):
        read_ppm(tmp_path / "missing.ppm")


def test_write_png_round_trip(tmp_path, rng):
    img = random_image(rng, 7, 3)
    path = write_png(img, tmp_path / "frame.png")
    width, height, rows, _ = png.Reader(filename=str(path)).asRGB8()
    assert (width, height) == (7, 3)
    decoded = np.array([list(row) for row in rows], dtype=np.uint8).reshape(3, 7, 3)
    np.testing.assert_array_equal(decoded, img.pixels)


def test_write_images_keeps_order(tmp_path, rng):
    jobs = [(random_image(rng, 3, 3), tmp_path / frame_name(0, step)) for step in range(6)]
    paths = write_images(jobs, fmt="ppm", workers=3)
    assert [p.name for p in paths] == [f"ep000_step00{i}.ppm" for i in range(6)]
    for (img, _), path in zip(jobs, paths):
        assert read_ppm(path) == img


def test_hstack_with_gap(rng):
    a, b = random_image(rng, 3, 4), random_image(rng, 5, 4)
    out = hstack([a, b], gap=2)
    assert (out.width, out.height) == (10, 4)
    np.testing.assert_array_equal(out.pixels[:, :3], a.pixels)
    assert not out.pixels[:, 3:5].any()
    np.testing.assert_array_equal(out.pixels[:, 5:], b.pixels)
    with pytest.raises(ShapeError):
        hstack([a, random_image(rng, 3, 5)])
