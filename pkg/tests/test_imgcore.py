"""Tests for the image core: PNG round-trips, luma, blur, and crops."""

import io
import math
import struct
import zlib

import numpy as np
import pytest
from PIL import Image

from vismark.imgcore import (
    BBox,
    Color,
    DecodeError,
    ImageBuffer,
    PointF,
    UnsupportedFormatError,
    crop,
    decode_png,
    encode_png,
    gaussian_blur,
    gaussian_kernel,
    round_half_up,
    to_grayscale,
)


def _png_bytes(arr, mode):
    im = Image.fromarray(arr, mode=mode)
    out = io.BytesIO()
    im.save(out, format="PNG")
    return out.getvalue()


def _random_image(rng, h, w):
    return ImageBuffer(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


# ---------------------------------------------------------------- buffers


def test_buffer_shape_and_accessors():
    arr = np.zeros((3, 5, 3), dtype=np.uint8)
    img = ImageBuffer(arr)
    assert img.width == 5
    assert img.height == 3
    assert len(img.pixels) == 45


def test_buffer_rejects_bad_shapes():
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((0, 4, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        ImageBuffer(np.zeros((4, 4, 4), dtype=np.uint8))


def test_buffer_is_immutable():
    img = ImageBuffer(np.zeros((2, 2, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        img.array[0, 0, 0] = 1


def test_buffer_is_defensive_copy():
    arr = np.zeros((2, 2, 3), dtype=np.uint8)
    img = ImageBuffer(arr)
    arr[0, 0, 0] = 99
    assert img.array[0, 0, 0] == 0


def test_from_flat_round_trips():
    rng = np.random.default_rng(0)
    img = _random_image(rng, 4, 6)
    again = ImageBuffer.from_flat(img.width, img.height, img.pixels)
    assert again == img


def test_from_flat_wrong_length():
    with pytest.raises(ValueError):
        ImageBuffer.from_flat(2, 2, b"\x00" * 11)


def test_color_validation():
    assert Color(255, 0, 0).as_tuple() == (255, 0, 0)
    with pytest.raises(ValueError):
        Color(256, 0, 0)
    with pytest.raises(ValueError):
        Color(-1, 0, 0)


def test_bbox_validation():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 5)
    with pytest.raises(ValueError):
        BBox(0, 0, 5, -1)
    assert BBox(2, 4, 10, 20).center == PointF(7.0, 14.0)


# ---------------------------------------------------------------- PNG I/O


def test_decode_single_red_pixel():
    data = _png_bytes(np.array([[[255, 0, 0]]], dtype=np.uint8), "RGB")
    img = decode_png(data)
    assert (img.width, img.height) == (1, 1)
    assert img.array[0, 0].tolist() == [255, 0, 0]


def test_decode_grayscale_replicates_channels():
    data = _png_bytes(np.full((2, 2), 128, dtype=np.uint8), "L")
    img = decode_png(data)
    assert np.all(img.array == 128)


def test_decode_rgba_drops_alpha():
    arr = np.zeros((2, 2, 4), dtype=np.uint8)
    arr[..., 0] = 200
    arr[..., 1] = 100
    arr[..., 2] = 50
    arr[..., 3] = 0  # fully transparent; pixel values must survive untouched
    img = decode_png(_png_bytes(arr, "RGBA"))
    assert np.all(img.array[..., 0] == 200)
    assert np.all(img.array[..., 1] == 100)
    assert np.all(img.array[..., 2] == 50)


def test_encode_decode_round_trip_property():
    rng = np.random.default_rng(1234)
    for _ in range(20):
        img = _random_image(rng, 8, 8)
        assert decode_png(encode_png(img)) == img


def test_encode_is_deterministic():
    rng = np.random.default_rng(5)
    img = _random_image(rng, 16, 16)
    assert encode_png(img) == encode_png(img)


def test_decode_rejects_garbage():
    with pytest.raises(DecodeError):
        decode_png(b"definitely not a png")
    with pytest.raises(DecodeError):
        decode_png(b"")


def test_decode_rejects_truncation():
    data = _png_bytes(np.zeros((8, 8, 3), dtype=np.uint8), "RGB")
    with pytest.raises(DecodeError):
        decode_png(data[:40])


def _sixteen_bit_gray_png():
    # Hand-rolled 1x1 16-bit grayscale PNG; Pillow would open it silently.
    def chunk(tag, payload):
        data = tag + payload
        return struct.pack(">I", len(payload)) + data + struct.pack(">I", zlib.crc32(data))

    ihdr = struct.pack(">IIBBBBB", 1, 1, 16, 0, 0, 0, 0)
    raw = zlib.compress(b"\x00\xff\xff")  # filter byte + one 16-bit sample
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", raw)
        + chunk(b"IEND", b"")
    )


def test_decode_rejects_16_bit_depth():
    with pytest.raises(UnsupportedFormatError):
        decode_png(_sixteen_bit_gray_png())


# ---------------------------------------------------------------- grayscale


def test_grayscale_primary_values():
    # 0.299*255 = 76.245 -> 76; 0.587*255 = 149.685 -> 150; 0.114*255 = 29.07 -> 29
    arr = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], dtype=np.uint8)
    gray = to_grayscale(ImageBuffer(arr))
    assert gray.array[0, 0].tolist() == [76, 76, 76]
    assert gray.array[0, 1].tolist() == [150, 150, 150]
    assert gray.array[0, 2].tolist() == [29, 29, 29]


def test_grayscale_fixed_point_on_gray_pixels():
    arr = np.full((3, 3, 3), 128, dtype=np.uint8)
    assert to_grayscale(ImageBuffer(arr)).array[1, 1, 0] == 128


def test_grayscale_is_idempotent():
    rng = np.random.default_rng(17)
    img = _random_image(rng, 9, 7)
    once = to_grayscale(img)
    assert to_grayscale(once) == once


def test_grayscale_matches_scalar_oracle():
    rng = np.random.default_rng(23)
    img = _random_image(rng, 6, 6)
    gray = to_grayscale(img)
    for y in range(img.height):
        for x in range(img.width):
            r, g, b = (int(v) for v in img.array[y, x])
            expected = math.floor(0.299 * r + 0.587 * g + 0.114 * b + 0.5)
            assert gray.array[y, x, 0] == expected


# ---------------------------------------------------------------- blur


def test_blur_rejects_nonpositive_sigma():
    img = ImageBuffer(np.zeros((4, 4, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        gaussian_blur(img, 0.0)
    with pytest.raises(ValueError):
        gaussian_blur(img, -1.0)


def test_kernel_is_normalized_and_sized():
    k = gaussian_kernel(1.0)
    assert len(k) == 7  # radius ceil(3*1) = 3
    assert abs(k.sum() - 1.0) < 1e-12
    assert len(gaussian_kernel(0.5)) == 5  # radius ceil(1.5) = 2


def test_blur_leaves_uniform_images_unchanged():
    for sigma in (0.5, 1.0, 3.7):
        img = ImageBuffer(np.full((10, 12, 3), 173, dtype=np.uint8))
        assert gaussian_blur(img, sigma) == img


def test_blur_impulse_matches_hand_kernel():
    # sigma=1 kernel: w_i = exp(-i^2/2) / sum, i in [-3, 3]. Response to a
    # 255 impulse at (dx, dy) is 255*w_dx*w_dy, giving 41 / 25 / 15 / 5 / 0.
    arr = np.zeros((9, 9, 3), dtype=np.uint8)
    arr[4, 4] = 255
    out = gaussian_blur(ImageBuffer(arr), 1.0)
    assert out.array[4, 4, 0] == 41
    assert out.array[4, 5, 0] == 25
    assert out.array[4, 3, 0] == 25
    assert out.array[5, 5, 0] == 15
    assert out.array[4, 6, 0] == 5
    assert out.array[7, 7, 0] == 0
    # symmetric response in all four directions
    assert out.array[3, 4, 0] == out.array[5, 4, 0] == out.array[4, 3, 0]


def test_blur_matches_dense_2d_oracle():
    # Direct O(n^2 k^2) 2-D convolution with clamped indices, float64 all the
    # way, rounded half-up at the end. Seed 7 keeps every value a comfortable
    # distance from a rounding boundary, so exact equality is stable.
    rng = np.random.default_rng(7)
    arr = rng.integers(0, 256, size=(12, 14, 3), dtype=np.uint8)
    sigma = 1.2
    out = gaussian_blur(ImageBuffer(arr), sigma)

    radius = math.ceil(3 * sigma)
    offs = range(-radius, radius + 1)
    w = [math.exp(-(o * o) / (2 * sigma * sigma)) for o in offs]
    total = sum(w)
    w = [x / total for x in w]
    h, wd = arr.shape[:2]
    for y in range(h):
        for x in range(wd):
            for c in range(3):
                acc = 0.0
                for iy, wy in zip(offs, w):
                    yy = min(max(y + iy, 0), h - 1)
                    for ix, wx in zip(offs, w):
                        xx = min(max(x + ix, 0), wd - 1)
                        acc += wy * wx * arr[yy, xx, c]
                assert out.array[y, x, c] == math.floor(acc + 0.5)


def test_blur_preserves_mass_away_from_edges():
    # An interior impulse far from every edge loses no mass to clamping; the
    # rounded per-pixel values can only drift by the rounding itself.
    arr = np.zeros((21, 21, 3), dtype=np.uint8)
    arr[10, 10] = 200
    out = gaussian_blur(ImageBuffer(arr), 1.5)
    mass = int(out.array[..., 0].astype(np.int64).sum())
    assert abs(mass - 200) <= 50  # 81 taps rounding by <= .5 each


def test_blur_is_deterministic():
    rng = np.random.default_rng(99)
    img = _random_image(rng, 15, 11)
    assert gaussian_blur(img, 2.0) == gaussian_blur(img, 2.0)


# ---------------------------------------------------------------- crop


def test_crop_full_image_is_copy():
    rng = np.random.default_rng(3)
    img = _random_image(rng, 6, 8)
    assert crop(img, BBox(0, 0, 8, 6)) == img


def test_crop_interior_window():
    arr = np.arange(4 * 4 * 3, dtype=np.uint8).reshape(4, 4, 3)
    img = ImageBuffer(arr)
    out = crop(img, BBox(1, 1, 2, 2))
    assert np.array_equal(out.array, arr[1:3, 1:3])


def test_crop_clamps_to_edges():
    rng = np.random.default_rng(4)
    img = _random_image(rng, 10, 10)
    out = crop(img, BBox(6, 2, 100, 3))
    assert (out.width, out.height) == (4, 3)
    assert np.array_equal(out.array, img.array[2:5, 6:10])
    out2 = crop(img, BBox(-5, -5, 8, 8))
    assert (out2.width, out2.height) == (3, 3)


def test_crop_fractional_rounding():
    rng = np.random.default_rng(8)
    img = _random_image(rng, 20, 20)
    # origin floors (3.7 -> 3), extent rounds half-up (4.5 -> 5)
    out = crop(img, BBox(3.7, 2.2, 4.5, 6.4))
    assert np.array_equal(out.array, img.array[2:8, 3:8])


def test_crop_empty_intersection_raises():
    img = ImageBuffer(np.zeros((5, 5, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        crop(img, BBox(10, 10, 3, 3))
    with pytest.raises(ValueError):
        crop(img, BBox(-10, 0, 4, 4))


def test_crop_composes_for_integer_windows():
    rng = np.random.default_rng(11)
    img = _random_image(rng, 16, 16)
    a = crop(crop(img, BBox(2, 3, 10, 9)), BBox(1, 2, 5, 4))
    b = crop(img, BBox(3, 5, 5, 4))
    assert a == b


def test_round_half_up_convention():
    assert round_half_up(2.5) == 3
    assert round_half_up(2.4999) == 2
    assert round_half_up(-0.5) == 0
    assert round_half_up(0.5) == 1
