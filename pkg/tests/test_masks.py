import sys
import os
import unittest

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np
import pytest

from src import masks
from src.errors import DegeneratePolygon, DimensionMismatch, ParseError, RunSumMismatch
from src.masks import BinaryMask, Polygon
from tests.helpers import dense_iou, rect


def _random_grid(rng, h, w):
    if rng.random() < 0.5:
        return rng.random((h, w)) < rng.uniform(0.0, 1.0)
    # a few boxes, so long runs occur too
    grid = np.zeros((h, w), dtype=bool)
    for _ in range(int(rng.integers(0, 4))):
        x0, x1 = sorted(int(v) for v in rng.integers(0, w + 1, size=2))
        y0, y1 = sorted(int(v) for v in rng.integers(0, h + 1, size=2))
        grid[y0:y1, x0:x1] = True
    return grid


def test_rle_encode_is_column_major_with_leading_background():
    m = masks.rle_encode([[1, 0], [1, 1]])
    assert m.runs == (0, 2, 1, 1)
    assert m.area == 3
    assert m.to_coco() == {"size": [2, 2], "counts": [0, 2, 1, 1]}


def test_empty_and_full_masks():
    assert masks.empty(3, 4).runs == (12,)
    assert masks.full(3, 4).runs == (0, 12)
    assert masks.empty(3, 4).is_empty()
    assert masks.area(masks.full(3, 4)) == 12


def test_canonical_runs_merges_zero_length_runs():
    assert masks.canonical_runs([0, 0, 3]) == (3,)
    assert masks.canonical_runs([2, 0, 3, 1]) == (5, 1)
    assert masks.canonical_runs([0, 4]) == (0, 4)
    assert masks.canonical_runs([3, 2, 0]) == (3, 2)


def test_decode_rejects_wrong_run_sum():
    with pytest.raises(RunSumMismatch):
        masks.rle_decode(BinaryMask(height=2, width=2, runs=(1, 2)))


def test_negative_runs_are_rejected():
    with pytest.raises(ValueError):
        BinaryMask(height=2, width=2, runs=(5, -1))


def test_set_algebra_matches_dense_reference():
    rng = np.random.default_rng(7)
    for _ in range(10000):
        h, w = (int(v) for v in rng.integers(1, 65, size=2))
        a = _random_grid(rng, h, w)
        b = _random_grid(rng, h, w)
        ma, mb = masks.rle_encode(a), masks.rle_encode(b)
        assert np.array_equal(masks.rle_decode(ma), a)
        assert np.array_equal(masks.rle_decode(masks.intersection(ma, mb)), a & b)
        assert np.array_equal(masks.rle_decode(masks.union(ma, mb)), a | b)
        assert np.array_equal(masks.rle_decode(masks.difference(ma, mb)), a & ~b)
        assert masks.area(ma) == int(a.sum())
        assert masks.is_subset(ma, mb) == (not (a & ~b).any())
        assert masks.iou(ma, mb) == pytest.approx(dense_iou(a, b), abs=1e-12)


def test_operations_return_canonical_runs():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = masks.rle_encode(rng.random((8, 9)) < 0.5)
        b = masks.rle_encode(rng.random((8, 9)) < 0.5)
        for m in (masks.union(a, b), masks.intersection(a, b), masks.difference(a, b)):
            assert m.runs == masks.canonical_runs(m.runs)
            assert all(r > 0 for r in m.runs[1:])


def test_iou_of_two_empty_masks_is_zero():
    assert masks.iou(masks.empty(4, 4), masks.empty(4, 4)) == 0.0


def test_mismatched_sizes_raise():
    with pytest.raises(DimensionMismatch):
        masks.union(masks.empty(3, 3), masks.empty(3, 4))


class TestPolygons(unittest.TestCase):

    def test_rasterize_uses_pixel_centers(self):
        poly = Polygon(vertices=((1, 1), (4, 1), (4, 3), (1, 3)))
        m = masks.rasterize(poly, 5, 6)
        self.assertTrue(np.array_equal(masks.rle_decode(m), rect(5, 6, 1, 1, 4, 3)))

    def test_rasterize_clips_at_border(self):
        poly = Polygon(vertices=((-3, -3), (2, -3), (2, 2), (-3, 2)))
        m = masks.rasterize(poly, 4, 4)
        self.assertEqual(m.area, 4)
        self.assertEqual(masks.polygon_extent(poly), (-3, -3, 1, 1))

    def test_degenerate_polygon(self):
        with self.assertRaises(DegeneratePolygon):
            masks.rasterize(Polygon(vertices=((0, 0), (1, 1))), 4, 4)

    def test_from_flat_rejects_odd_length(self):
        with self.assertRaises(ParseError):
            Polygon.from_flat([0, 0, 1])

    def test_rasterize_shifted_equals_translated_polygon(self):
        poly = Polygon(vertices=((-2.5, 0.5), (3.5, 0.5), (3.5, 4.2), (-2.5, 4.2)))
        shifted = masks.rasterize_shifted(poly, 8, 10, 3, 1)
        moved = Polygon(vertices=tuple((x + 3, y + 1) for x, y in poly.vertices))
        self.assertEqual(shifted, masks.rasterize(moved, 8, 10))


class TestGeometry(unittest.TestCase):

    def test_paste_clips_outside_pixels(self):
        stamp = masks.full(2, 3)
        out = masks.paste(masks.empty(4, 4), stamp, (2, -1))
        expected = np.zeros((4, 4), dtype=bool)
        expected[0, 2:4] = True
        self.assertTrue(np.array_equal(masks.rle_decode(out), expected))

    def test_paste_is_union_with_base(self):
        base = masks.rle_encode(rect(4, 4, 0, 0, 1, 1))
        out = masks.paste(base, masks.full(1, 1), (3, 3))
        self.assertEqual(out.area, 2)

    def test_translate_fully_outside_is_empty(self):
        self.assertTrue(masks.translate(masks.full(2, 2), (10, 10), 4, 4).is_empty())

    def test_pad_moves_foreground(self):
        m = masks.rle_encode(rect(3, 3, 0, 0, 2, 1))
        padded = masks.pad(m, 1, 2, 0, 1)
        self.assertEqual(padded.shape, (6, 4))
        self.assertTrue(np.array_equal(masks.rle_decode(padded), rect(6, 4, 1, 2, 3, 3)))
        with self.assertRaises(ValueError):
            masks.pad(m, -1, 0, 0, 0)

    def test_bbox_and_crop(self):
        m = masks.rle_encode(rect(6, 7, 2, 1, 5, 4))
        self.assertEqual(masks.bbox(m), (2, 1, 4, 3))
        self.assertIsNone(masks.bbox(masks.empty(3, 3)))
        cropped = masks.crop(m, (2, 1, 4, 3))
        self.assertEqual(cropped, masks.full(3, 3))
        with self.assertRaises(ValueError):
            masks.crop(m, (0, 0, 7, 2))


class TestSegmentationCodecs(unittest.TestCase):

    def test_integer_rle(self):
        m = masks.from_segmentation({"size": [2, 2], "counts": [0, 2, 1, 1]}, 2, 2)
        self.assertEqual(m.area, 3)

    def test_rle_size_must_match_image(self):
        with self.assertRaises(DimensionMismatch):
            masks.from_segmentation({"size": [2, 3], "counts": [6]}, 2, 2)

    def test_rle_run_sum_is_checked(self):
        with self.assertRaises(RunSumMismatch):
            masks.from_segmentation({"size": [2, 2], "counts": [1, 1]}, 2, 2)

    def test_polygon_parts_are_unioned(self):
        seg = [[0, 0, 2, 0, 2, 2, 0, 2], [3, 3, 5, 3, 5, 5, 3, 5]]
        m = masks.from_segmentation(seg, 6, 6)
        self.assertEqual(m.area, 8)

    def test_unsupported_segmentation(self):
        with self.assertRaises(ParseError):
            masks.from_segmentation("nope", 2, 2)

    def test_compressed_rle_input(self):
        mask_utils = pytest.importorskip("pycocotools.mask")
        grid = rect(5, 6, 1, 2, 4, 5)
        encoded = mask_utils.encode(np.asfortranarray(grid.astype(np.uint8)))
        seg = {"size": encoded["size"], "counts": encoded["counts"].decode("ascii")}
        self.assertTrue(np.array_equal(masks.rle_decode(masks.from_segmentation(seg, 5, 6)), grid))
