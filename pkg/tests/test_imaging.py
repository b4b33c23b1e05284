import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dispfuse.imaging import (FormatError, crop, denormalize, load_image, load_pfm, normalize, pad_to_32,
                              padded_extent, save_image, save_pfm, sobel)


def test_pgm_two_by_two(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n# comment\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    np.testing.assert_array_equal(load_image(p), [[0, 255], [128, 64]])


@pytest.mark.parametrize("suffix", ["pgm", "png"])
def test_image_round_trip(tmp_path, rng, suffix):
    img = rng.uniform(-20, 275, size=(16, 16))
    p = tmp_path / f"x.{suffix}"
    save_image(p, img)
    np.testing.assert_array_equal(load_image(p), np.clip(np.rint(img), 0, 255))


def test_truncated_pgm_reports_offset(tmp_path):
    p = tmp_path / "t.pgm"
    p.write_bytes(b"P5\n4 4\n255\n" + bytes(10))
    with pytest.raises(FormatError, match="truncated") as info:
        load_image(p)
    assert info.value.offset == 21
    assert "at byte 21" in str(info.value)


def test_malformed_header_offset(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5\n4 x\n255\n")
    with pytest.raises(FormatError) as info:
        load_image(p)
    assert info.value.offset == 5


def test_unknown_signature(tmp_path):
    p = tmp_path / "u.pgm"
    p.write_bytes(b"GIF89a....")
    with pytest.raises(FormatError):
        load_image(p)


def test_pfm_single_value(tmp_path):
    p = tmp_path / "one.pfm"
    p.write_bytes(b"Pf\n1 1\n-1.0\n" + struct.pack("<f", 3.5))
    np.testing.assert_array_equal(load_pfm(p), [[3.5]])


def test_pfm_round_trip_bit_exact(tmp_path, rng):
    d = rng.normal(size=(8, 8)).astype(np.float32)
    save_pfm(tmp_path / "d.pfm", d)
    assert load_pfm(tmp_path / "d.pfm").tobytes() == d.tobytes()


def _write_pfm_independent(path, rows, big_endian):
    """Reference writer: bottom row first, explicit per-value packing."""
    h, w = len(rows), len(rows[0])
    fmt = ">f" if big_endian else "<f"
    body = b"".join(struct.pack(fmt, v) for row in reversed(rows) for v in row)
    scale = b"1.0" if big_endian else b"-1.0"
    path.write_bytes(b"Pf\n%d %d\n%s\n" % (w, h, scale) + body)


def test_pfm_endianness_agrees(tmp_path):
    rows = [[0.5, -2.25, 7.0], [1e-3, 42.0, -0.125]]
    _write_pfm_independent(tmp_path / "le.pfm", rows, big_endian=False)
    _write_pfm_independent(tmp_path / "be.pfm", rows, big_endian=True)
    le, be = load_pfm(tmp_path / "le.pfm"), load_pfm(tmp_path / "be.pfm")
    np.testing.assert_array_equal(le, be)
    np.testing.assert_array_equal(le, np.array(rows, dtype=np.float32))
    save_pfm(tmp_path / "ours_be.pfm", le, little_endian=False)
    assert (tmp_path / "ours_be.pfm").read_bytes() == (tmp_path / "be.pfm").read_bytes().replace(b"1.0\n", b"1.000000\n", 1)


def test_colour_pfm_rejected(tmp_path):
    p = tmp_path / "c.pfm"
    p.write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
    with pytest.raises(FormatError, match="not supported"):
        load_pfm(p)


def test_truncated_pfm(tmp_path):
    p = tmp_path / "t.pfm"
    p.write_bytes(b"Pf\n2 2\n-1.0\n" + bytes(6))
    with pytest.raises(FormatError, match="truncated"):
        load_pfm(p)


def test_sobel_flat_field():
    g = sobel(np.full((5, 6), 17.0))
    for a in g:
        np.testing.assert_array_equal(a, 0.0)


def test_sobel_vertical_step():
    img = np.zeros((6, 8))
    img[:, 4:] = 255.0
    g = sobel(img)
    # hand-applied kernel [1 2 1]^T x [-1 0 1]: (1 + 2 + 1) * 255
    np.testing.assert_array_equal(g.gx[:, 3], 1020.0)
    np.testing.assert_array_equal(g.gx[:, 4], 1020.0)
    np.testing.assert_array_equal(g.gx[:, [0, 1, 2, 5, 6, 7]], 0.0)
    np.testing.assert_array_equal(g.gy, 0.0)


def test_sobel_transpose_swaps(rng):
    img = rng.uniform(0, 255, size=(7, 9))
    a, b = sobel(img), sobel(img.T)
    np.testing.assert_allclose(a.gx.T, b.gy, atol=1e-9)
    np.testing.assert_allclose(a.gy.T, b.gx, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-5, 5), seed=st.integers(0, 2**16))
def test_sobel_linear_and_magnitude(c, seed):
    img = np.random.default_rng(seed).uniform(0, 255, size=(6, 7))
    a, b = sobel(img), sobel(c * img)
    np.testing.assert_allclose(b.gx, c * a.gx, atol=1e-8)
    np.testing.assert_allclose(b.gy, c * a.gy, atol=1e-8)
    np.testing.assert_allclose(a.magnitude, np.sqrt(a.gx**2 + a.gy**2), rtol=1e-12)
    assert (a.magnitude >= 0).all()


def test_sobel_too_small():
    with pytest.raises(ValueError):
        sobel(np.zeros((2, 5)))


def test_normalize_endpoints():
    np.testing.assert_array_equal(normalize(np.array([0.0, 255.0, 127.5])), [-1.0, 1.0, 0.0])
    x = np.linspace(0, 255, 11)
    np.testing.assert_allclose(denormalize(normalize(x)), x, atol=1e-12)


def test_pad_kitti_extent():
    f = pad_to_32(np.ones((375, 1242)), 375, 1242)
    assert f.content.shape == (384, 1248)
    assert f.mask.sum() == 375 * 1242
    assert (f.content[375:] == 0).all() and (f.content[:, 1242:] == 0).all()
    np.testing.assert_array_equal(crop(f.content, 375, 1242), 1.0)


def test_pad_noop():
    f = pad_to_32(np.ones((480, 640)))
    assert f.content.shape == (480, 640)
    assert (f.mask == 1).all()


@given(n=st.integers(1, 500))
def test_padded_extent_smallest_multiple(n):
    m = padded_extent(n)
    assert m % 32 == 0 and n <= m < n + 32


def test_pad_extents_disagree():
    with pytest.raises(ValueError):
        pad_to_32(np.ones((4, 4)), 5, 4)
