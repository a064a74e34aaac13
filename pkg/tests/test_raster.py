import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fabfix.errors import BoundsError, FormatError, InvariantError, ParameterError
from fabfix.raster import (PatchSet, Stitcher, coverage_count, fill_polygon, rasterize,
                           read_pgm, read_pgm_bytes, read_pgm_field, read_ppm, slice_patches,
                           stitch, write_pgm, write_ppm)


def brute_union(rects, w, h):
    out = np.zeros((h, w), np.uint8)
    for i in range(h):
        for j in range(w):
            cx, cy = j + 0.5, i + 0.5
            for x0, y0, x1, y1 in rects:
                if x0 <= cx < x1 and y0 <= cy < y1:
                    out[i, j] = 1
    return out


# -- rasterize ---------------------------------------------------------------

def test_rasterize_single_rect():
    assert rasterize([(0, 0, 2, 2)], 4, 4).sum() == 4


def test_rasterize_empty():
    out = rasterize([], 8, 8)
    assert out.shape == (8, 8) and out.sum() == 0


def test_rasterize_overlap_matches_brute_force():
    rects = [(0, 0, 3, 3), (1, 1, 4, 4)]
    expected = brute_union(rects, 4, 4)
    assert expected.sum() == 14
    np.testing.assert_array_equal(rasterize(rects, 4, 4), expected)


@pytest.mark.parametrize("rect", [(-1, 0, 2, 2), (0, 0, 5, 2), (2, 0, 2, 3), (0, 3, 2, 1)])
def test_rasterize_out_of_bounds(rect):
    with pytest.raises(BoundsError):
        rasterize([rect], 4, 4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 11), st.floats(0, 9), st.floats(0.5, 12),
                          st.floats(0.5, 10)), max_size=5))
def test_rasterize_fractional_rects_match_pixel_center_rule(raw):
    rects = [(x, y, min(12, x + dx), min(10, y + dy)) for x, y, dx, dy in raw]
    rects = [r for r in rects if r[0] < r[2] and r[1] < r[3]]
    np.testing.assert_array_equal(rasterize(rects, 12, 10), brute_union(rects, 12, 10))


def test_rasterize_order_independent():
    rects = [(0, 0, 5, 2), (3, 1, 7, 6), (2, 2, 3, 3)]
    np.testing.assert_array_equal(rasterize(rects, 8, 8), rasterize(rects[::-1], 8, 8))


def test_fill_polygon_square_matches_rasterize():
    sq = [(1, 1), (6, 1), (6, 5), (1, 5)]
    np.testing.assert_array_equal(fill_polygon(sq, 8, 8), rasterize([(1, 1, 6, 5)], 8, 8))


# -- slicing -----------------------------------------------------------------

def test_slice_exact_fit():
    ps = slice_patches(np.ones((128, 128)), 128, 7)
    assert len(ps) == 1 and ps.offsets().tolist() == [[0, 0]]


def test_slice_tiling_count():
    assert len(slice_patches(np.zeros((256, 256)), 128, 128)) == 4


def test_slice_stride4_count():
    per_axis = (256 - 128) // 4 + 1
    assert per_axis == 33
    assert len(slice_patches(np.zeros((256, 256)), 128, 4)) == 1089


def test_slice_row_major_order():
    ps = slice_patches(np.zeros((20, 30)), 10, 10)
    offs = [tuple(o) for o in ps.offsets()]
    assert offs == sorted(offs, key=lambda o: (o[1], o[0]))
    assert offs[:3] == [(0, 0), (10, 0), (20, 0)]


def test_slice_pads_bottom_right_with_zeros():
    img = np.ones((130, 140), np.uint8)
    ps = slice_patches(img, 128, 8)
    assert ps.padded_shape == (136, 144)
    last = ps.patches[-1]
    assert last[:, :].sum() == (130 - 8) * (140 - 16)


def test_slice_small_image_padded_to_patch():
    ps = slice_patches(np.ones((5, 7)), 16, 4)
    assert len(ps) == 1 and ps.patches[0].sum() == 35


@pytest.mark.parametrize("p,s", [(0, 1), (8, 0), (-1, 4), (8, 9)])
def test_slice_bad_parameters(p, s):
    with pytest.raises(ParameterError):
        slice_patches(np.zeros((8, 8)), p, s)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.integers(2, 12), st.integers(1, 12),
       st.integers(0, 2**31))
def test_slice_stitch_round_trip_exact(h, w, p, s, seed):
    s = min(s, p)
    f = np.random.default_rng(seed).random((h, w))
    ps = slice_patches(f, p, s)
    ny, nx = ps.shape
    ph, pw = ps.padded_shape
    assert ny == (ph - p) // s + 1 and nx == (pw - p) // s + 1
    assert ph >= h and pw >= w
    np.testing.assert_array_equal(stitch(ps), f)


@settings(max_examples=40, deadline=None)
@given(st.integers(4, 30), st.integers(4, 30), st.integers(2, 10), st.integers(1, 10))
def test_coverage_matches_brute_force(h, w, p, s):
    s = min(s, p)
    ps = slice_patches(np.zeros((h, w)), p, s)
    count = np.zeros(ps.padded_shape, int)
    for x, y, _ in ps:
        assert 0 <= x <= ps.padded_shape[1] - p and 0 <= y <= ps.padded_shape[0] - p
        count[y:y + p, x:x + p] += 1
    count = count[:h, :w]
    assert count.min() >= 1
    np.testing.assert_array_equal(coverage_count(w, h, p, s), count)


def test_stitch_single_patch_identity():
    f = np.random.default_rng(0).random((16, 16))
    np.testing.assert_array_equal(stitch(slice_patches(f, 16, 16)), f)


def test_stitch_two_coincident_patches_average():
    st_ = Stitcher(8, 8, 8, 8)
    st_.add(0, 0, np.zeros((8, 8)))
    st_.add(0, 0, np.ones((8, 8)))
    np.testing.assert_array_equal(st_.result(), np.full((8, 8), 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_stitch_stays_within_patch_value_range(seed):
    rng = np.random.default_rng(seed)
    ps = slice_patches(np.zeros((24, 20)), 8, 3)
    vals = rng.uniform(0.2, 0.7, size=(len(ps), 8, 8))
    out = stitch(ps.with_values(vals))
    assert out.min() >= vals.min() and out.max() <= vals.max()


def test_stitch_uncovered_pixel_is_an_error():
    st_ = Stitcher(16, 16, 8, 8)
    st_.add(0, 0, np.ones((8, 8)))
    with pytest.raises(InvariantError):
        st_.result()


def test_patchset_with_values_rejects_wrong_count():
    ps = slice_patches(np.zeros((16, 16)), 8, 8)
    with pytest.raises(ValueError):
        ps.with_values(np.zeros((3, 8, 8)))


# -- PGM / PPM ---------------------------------------------------------------

def test_pgm_round_trip_all_ones(tmp_path):
    b = np.ones((4, 4), np.uint8)
    write_pgm(b, tmp_path / "a.pgm")
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), b)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31))
def test_pgm_bitmap_round_trip_bit_exact(tmp_path_factory, h, w, seed):
    b = (np.random.default_rng(seed).random((h, w)) < 0.5).astype(np.uint8)
    path = tmp_path_factory.mktemp("pgm") / "b.pgm"
    write_pgm(b, path)
    out = read_pgm(path)
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, b)


def test_pgm_field_half_maps_to_128_and_reads_as_foreground(tmp_path):
    write_pgm(np.full((2, 3), 0.5), tmp_path / "f.pgm")
    assert (read_pgm_bytes(tmp_path / "f.pgm") == 128).all()
    assert (read_pgm(tmp_path / "f.pgm") == 1).all()


def test_pgm_field_rounding(tmp_path):
    vals = np.array([[0.0, 1.0, 0.25, 100.5 / 255, 100.49 / 255]])
    write_pgm(vals, tmp_path / "f.pgm")
    assert read_pgm_bytes(tmp_path / "f.pgm").tolist() == [[0, 255, 64, 101, 100]]
    np.testing.assert_allclose(read_pgm_field(tmp_path / "f.pgm")[0, 1], 1.0)


def test_pgm_header_with_comment(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[0, 1]]


def test_pgm_ascii_variant_rejected(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(FormatError) as info:
        read_pgm(tmp_path / "a.pgm")
    assert info.value.offset == 0


def test_pgm_truncated_payload(tmp_path):
    (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n" + b"\x00" * 10)
    with pytest.raises(FormatError) as info:
        read_pgm(tmp_path / "t.pgm")
    assert info.value.offset == 21


@pytest.mark.parametrize("data", [b"P5\n4\n", b"P5\n4 x 255\n", b"P5\n4 4 65535\n\x00",
                                  b"P5\n0 4 255\n"])
def test_pgm_malformed_headers(tmp_path, data):
    (tmp_path / "m.pgm").write_bytes(data)
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "m.pgm")


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(1).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    write_ppm(rgb, tmp_path / "x.ppm")
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), rgb)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
