import sys
import os
import json
import logging
import unittest

# Add project root to sys.path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import pytest

from src import masks
from src.dataset import filter_stuff, load_dataset, occlusion_rate, save_dataset, validate_dataset
from src.errors import ConfigError, DatasetIOError, DatasetValidationError, ParseError
from src.ingest.cocoa import CocoaDatasetReader
from src.ingest.d2s import D2SAmodalDatasetReader
from src.ingest.factory import get_dataset_reader
from src.ingest.native import NativeDatasetReader
from src.models import Category
from tests.helpers import annotation, dataset, image, occlusion_fixture, rect, rect_mask


def _write(tmp_path, name, document):
    path = tmp_path / name
    path.write_text(json.dumps(document), encoding="utf-8")
    return str(path)


class TestReaders(unittest.TestCase):

    def test_factory(self):
        self.assertIsInstance(get_dataset_reader("native"), NativeDatasetReader)
        self.assertIsInstance(get_dataset_reader("cocoa"), CocoaDatasetReader)
        self.assertIsInstance(get_dataset_reader("d2s-amodal"), D2SAmodalDatasetReader)
        with self.assertRaises(ConfigError):
            get_dataset_reader("pascal")

    def test_missing_file(self):
        with self.assertRaises(DatasetIOError):
            load_dataset("does/not/exist.json")


def test_native_round_trip(tmp_path):
    ds = occlusion_fixture()
    path = str(tmp_path / "ds.json")
    save_dataset(ds, path)
    assert load_dataset(path) == ds


def test_invalid_json_is_a_parse_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ParseError):
        load_dataset(str(path))


def test_malformed_record_is_a_parse_error(tmp_path):
    path = _write(tmp_path, "bad.json", {"images": [{"id": 1, "width": 4}], "annotations": []})
    with pytest.raises(ParseError):
        load_dataset(path)


def test_cocoa_regions(tmp_path):
    document = {
        "images": [{"id": 7, "width": 8, "height": 6, "file_name": "a.jpg"}],
        "annotations": [{
            "image_id": 7,
            "regions": [
                {"segmentation": [0, 0, 4, 0, 4, 4, 0, 4], "isstuff": 0, "order": 1,
                 "visible_mask": rect_mask(6, 8, 0, 0, 2, 4).to_coco()},
                {"segmentation": [2, 0, 6, 0, 6, 4, 2, 4], "isstuff": 1, "order": 0},
            ],
        }],
    }
    ds = load_dataset(_write(tmp_path, "cocoa.json", document), format="cocoa")
    anns = ds.images[0].annotations
    assert [a.category_id for a in anns] == [1, 2]
    assert anns[0].is_occluded()
    assert anns[0].invisible.area == 8
    assert anns[1].invisible is None
    assert ds.category_by_id()[2].is_stuff
    assert ds.split_name == "cocoa"


def test_d2s_amodal_polygon_past_border_keeps_overflow(tmp_path):
    document = {
        "categories": [{"id": 3, "name": "bottle"}],
        "images": [{"id": 1, "width": 6, "height": 6}],
        "annotations": [{"id": 5, "image_id": 1, "category_id": 3,
                         "segmentation": [[-2, 1, 3, 1, 3, 4, -2, 4]]}],
    }
    ds = load_dataset(_write(tmp_path, "d2s.json", document), format="d2s_amodal")
    a = ds.images[0].annotations[0]
    assert a.amodal.area == 9
    assert a.amodal_overflow.left == 2
    assert a.amodal_polygons is not None
    assert a.visible == a.amodal


def test_split_name_override(tmp_path):
    path = str(tmp_path / "x.json")
    save_dataset(occlusion_fixture(), path)
    assert load_dataset(path, split_name="val").split_name == "val"


class TestValidation(unittest.TestCase):

    def test_fixture_is_valid(self):
        _, violations = validate_dataset(occlusion_fixture(), strict_depth=True)
        self.assertEqual(violations, [])

    def test_visible_outside_amodal_names_annotation(self):
        a = annotation(9, 1, rect(6, 6, 0, 0, 3, 3))
        a = a.model_copy(update={"visible": rect_mask(6, 6, 0, 0, 4, 3)})
        _, violations = validate_dataset(dataset([image(1, 6, 6, [a])]))
        self.assertEqual(len(violations), 1)
        self.assertEqual(violations[0].annotation_id, 9)

    def test_small_excess_is_repaired(self):
        a = annotation(9, 1, rect(6, 6, 0, 0, 3, 3))
        a = a.model_copy(update={"visible": rect_mask(6, 6, 0, 0, 3, 4)})
        with self.assertLogs("src.dataset", level=logging.WARNING):
            fixed, violations = validate_dataset(dataset([image(1, 6, 6, [a])]), repair_slack=3)
        self.assertEqual(violations, [])
        repaired = fixed.images[0].annotations[0]
        self.assertTrue(masks.is_subset(repaired.visible, repaired.amodal))

    def test_invisible_must_equal_amodal_minus_visible(self):
        a = annotation(2, 1, rect(6, 6, 0, 0, 4, 4), rect(6, 6, 0, 0, 2, 4))
        a = a.model_copy(update={"invisible": rect_mask(6, 6, 2, 0, 3, 4)})
        _, violations = validate_dataset(dataset([image(1, 6, 6, [a])]))
        self.assertEqual([v.annotation_id for v in violations], [2])

    def test_duplicate_ids_and_unknown_category(self):
        a = annotation(1, 1, rect(4, 4, 0, 0, 2, 2))
        b = annotation(1, 1, rect(4, 4, 2, 2, 4, 4), category_id=5)
        _, violations = validate_dataset(dataset([image(1, 4, 4, [a, b])]))
        messages = " ".join(str(v) for v in violations)
        self.assertIn("annotation id 1 is used 2 times", messages)
        self.assertIn("unknown category id 5", messages)

    def test_empty_amodal_mask(self):
        a = annotation(4, 1, rect(4, 4, 0, 0, 0, 0))
        _, violations = validate_dataset(dataset([image(1, 4, 4, [a])]))
        self.assertEqual(len(violations), 1)
        self.assertIn("empty", str(violations[0]))

    def test_mask_size_mismatch(self):
        a = annotation(4, 1, rect(5, 4, 0, 0, 2, 2))
        _, violations = validate_dataset(dataset([image(1, 4, 4, [a])]))
        self.assertTrue(violations)
        self.assertEqual(violations[0].annotation_id, 4)

    def test_depth_inconsistency_strict_and_lenient(self):
        back = rect(10, 10, 1, 1, 7, 7)
        front = rect(10, 10, 4, 2, 9, 9)
        img = image(1, 10, 10, [annotation(1, 1, front, depth_order=0), annotation(2, 1, back, depth_order=1)])
        _, violations = validate_dataset(dataset([img]), strict_depth=True)
        self.assertEqual([v.annotation_id for v in violations], [2])
        with self.assertLogs("src.dataset", level=logging.WARNING):
            _, lenient = validate_dataset(dataset([img]))
        self.assertEqual(lenient, [])

    def test_load_raises_with_all_violations(self):
        a = annotation(1, 1, rect(4, 4, 0, 0, 2, 2)).model_copy(update={"visible": rect_mask(4, 4, 0, 0, 4, 4)})
        b = annotation(2, 1, rect(4, 4, 0, 0, 0, 0))
        ds = dataset([image(1, 4, 4, [a, b])])
        with self.assertRaises(DatasetValidationError) as ctx:
            validate_and_raise(ds)
        self.assertEqual(sorted(v.annotation_id for v in ctx.exception.violations), [1, 2])


def validate_and_raise(ds):
    _, violations = validate_dataset(ds)
    if violations:
        raise DatasetValidationError(violations)


def test_load_dataset_lists_violations(tmp_path):
    a = annotation(1, 1, rect(4, 4, 0, 0, 2, 2)).model_copy(update={"visible": rect_mask(4, 4, 0, 0, 4, 4)})
    path = str(tmp_path / "bad.json")
    save_dataset(dataset([image(1, 4, 4, [a])]), path)
    with pytest.raises(DatasetValidationError) as excinfo:
        load_dataset(path)
    assert "annotation 1" in str(excinfo.value)


def test_occlusion_rate():
    ds = occlusion_fixture()
    back = ds.images[0].annotations[1]
    assert occlusion_rate(back) == pytest.approx(back.invisible.area / back.amodal.area)
    assert occlusion_rate(ds.images[1].annotations[0]) == 0.0


def test_filter_stuff_removes_stuff_annotations():
    cats = [Category(id=1, name="thing"), Category(id=2, name="sky", is_stuff=True)]
    img = image(1, 4, 4, [annotation(1, 1, rect(4, 4, 0, 0, 2, 2)), annotation(2, 1, rect(4, 4, 2, 2, 4, 4), category_id=2)])
    out = filter_stuff(dataset([img], cats, split_name="train"))
    assert [a.id for a in out.images[0].annotations] == [1]
    assert [c.id for c in out.categories] == [1]
    assert out.split_name == "train_no_stuff"
