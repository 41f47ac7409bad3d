#!/usr/bin/env python3
"""
Test image representation, raster I/O and geometric transforms
"""
import os
import sys

import numpy as np
import png
import pytest
from pydantic import ValidationError

sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from image_core import (
    ContractViolation,
    ExposureTag,
    Image,
    ImageFormatError,
    NonFiniteError,
    Role,
    View,
    flip,
    load_image,
    resize,
    rgb_to_gray,
    save_image,
)


def _write_gray_png(path, rows, bitdepth):
    writer = png.Writer(
        width=len(rows[0]), height=len(rows), greyscale=True, bitdepth=bitdepth
    )
    with open(path, "wb") as f:
        writer.write(f, rows)


def test_load_8bit_scaling(tmp_path):
    path = tmp_path / "gray8.png"
    _write_gray_png(path, [[0, 255]], 8)
    img = load_image(path)
    assert img.dims == (2, 1)
    assert img.channels == 1
    assert img.data[0, 0, 0] == 0.0
    assert img.data[0, 1, 0] == 1.0


def test_load_16bit_scaling(tmp_path):
    path = tmp_path / "gray16.png"
    _write_gray_png(path, [[32768]], 16)
    img = load_image(path)
    assert abs(img.data[0, 0, 0] - 32768 / 65535) < 1e-7


def test_png_round_trip_within_quantization(tmp_path):
    rng = np.random.default_rng(1)
    img = Image.from_array(rng.random((9, 13, 3)))
    for bitdepth, bound in ((8, 1 / 510), (16, 1 / 131070)):
        path = tmp_path / f"rt{bitdepth}.png"
        save_image(img, path, bitdepth)
        back = load_image(path)
        assert back.data.shape == img.data.shape
        assert np.max(np.abs(back.data - img.data)) <= bound + 1e-7


def test_constant_half_round_trip(tmp_path):
    path = tmp_path / "half.png"
    save_image(Image.constant(4, 3, 0.5), path)
    assert np.max(np.abs(load_image(path).data - 0.5)) <= 1 / 510


def test_loaded_values_sit_on_quantization_levels(tmp_path):
    save_image(Image.constant(3, 2, 0.5), tmp_path / "half.ppm", 8)
    img = load_image(tmp_path / "half.ppm")
    assert img.data.dtype == np.float64
    assert np.all(img.data == 128 / 255)
    assert np.max(np.abs(img.data - 0.5)) <= 1 / 510


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    color = Image.from_array(rng.random((5, 7, 3)))
    gray = Image.from_array(rng.random((5, 7)))
    save_image(color, tmp_path / "c.ppm", 16)
    save_image(gray, tmp_path / "g.pgm", 8)
    color_gap = load_image(tmp_path / "c.ppm").data - color.data
    gray_gap = load_image(tmp_path / "g.pgm").data - gray.data
    assert np.max(np.abs(color_gap)) <= 1 / 131070 + 1e-7
    assert np.max(np.abs(gray_gap)) <= 1 / 510 + 1e-7


def test_pnm_header_comments(tmp_path):
    path = tmp_path / "commented.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    img = load_image(path)
    assert img.data[0, :, 0].tolist() == [0.0, 1.0]


def test_format_errors(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"definitely not a png")
    with pytest.raises(ImageFormatError):
        load_image(bad)
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "picture.jpg")
    ascii_pgm = tmp_path / "ascii.pgm"
    ascii_pgm.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(ImageFormatError):
        load_image(ascii_pgm)
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.png")


def test_image_invariants():
    with pytest.raises(NonFiniteError):
        Image.from_array(np.array([[np.nan]]))
    with pytest.raises(ContractViolation):
        Image(np.zeros((2, 2, 2), dtype=np.float32))
    with pytest.raises(ContractViolation):
        Image(np.zeros((2, 2, 3), dtype=np.uint8))


def test_exposure_tag_positive():
    tag = ExposureTag(exposure_value=0.5, view=View.LEFT, role_hint=Role.UNDER)
    assert tag.view == View.LEFT
    with pytest.raises(ValidationError):
        ExposureTag(exposure_value=0.0, view=View.LEFT, role_hint=Role.UNDER)


def test_flip_involution():
    rng = np.random.default_rng(3)
    img = Image.from_array(rng.random((4, 6, 3)))
    for axis in ("vertical", "horizontal", "diagonal"):
        assert np.array_equal(flip(flip(img, axis), axis).data, img.data)


def test_flip_horizontal_swaps_columns():
    img = Image.from_array(np.array([[0.25, 0.75]]))
    assert flip(img, "horizontal").data[0, :, 0].tolist() == [0.75, 0.25]
    assert flip(img, "vertical").data[0, :, 0].tolist() == [0.25, 0.75]


def test_flip_diagonal_transposes():
    data = np.arange(6, dtype=np.float64).reshape(3, 2) / 10
    img = Image.from_array(data)
    out = flip(img, "diagonal")
    assert out.dims == (3, 2)
    for y in range(3):
        for x in range(2):
            assert out.data[x, y, 0] == img.data[y, x, 0]


def test_resize_constant_and_identity():
    img = Image.constant(5, 4, 0.3)
    grown = resize(img, 11, 7)
    assert grown.dims == (11, 7)
    assert np.allclose(grown.data, 0.3, atol=1e-6)
    assert resize(img, 5, 4) is img


def test_resize_ramp_monotone():
    img = Image.from_array(np.array([[0.0, 1.0]]))
    row = resize(img, 4, 1).data[0, :, 0]
    assert np.all(np.diff(row) >= 0)
    assert np.allclose(row, [0.0, 0.25, 0.75, 1.0])


def test_rgb_to_gray():
    pixels = [[1.0, 1.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
    img = Image.from_array(np.array([pixels]))
    gray = rgb_to_gray(img).data[0, :, 0]
    assert abs(gray[0] - 1.0) < 1e-6
    assert gray[1] == 0.0
    assert abs(gray[2] - 0.299) < 1e-6
    with pytest.raises(ContractViolation):
        rgb_to_gray(Image.constant(2, 2, 0.5, channels=1))


def main():
    """Run this module's tests"""
    return pytest.main([__file__, "-q"])


if __name__ == "__main__":
    sys.exit(main())
