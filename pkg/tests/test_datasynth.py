import json

import numpy as np
import pytest

from elasticdet.datasynth import (
    DatasetSpec,
    generate_dataset,
    rasterize_circle,
    rasterize_convex_polygon,
    read_coco,
    write_coco,
    MIN_OBJECT_AREA,
)
from elasticdet.errors import AnnotationError


SPEC = DatasetSpec(num_images=8, image_size=64, seed=3)


class TestGeneration:
    def test_same_seed_identical(self):
        a = generate_dataset(SPEC)
        b = generate_dataset(SPEC)
        for img_a, img_b in zip(a.images, b.images):
            np.testing.assert_array_equal(img_a, img_b)
        for anns_a, anns_b in zip(a.annotations, b.annotations):
            assert len(anns_a) == len(anns_b)
            for x, y in zip(anns_a, anns_b):
                assert x.class_id == y.class_id
                np.testing.assert_array_equal(x.box_cxcywh, y.box_cxcywh)
                np.testing.assert_array_equal(x.mask, y.mask)

    def test_different_seed_differs(self):
        a = generate_dataset(SPEC)
        b = generate_dataset(DatasetSpec(num_images=8, image_size=64, seed=4))
        assert any(not np.array_equal(x, y) for x, y in zip(a.images, b.images))

    def test_boxes_are_tight_mask_bounds(self):
        dataset = generate_dataset(SPEC)
        size = SPEC.image_size
        for anns in dataset.annotations:
            for ann in anns:
                ys, xs = np.where(ann.mask)
                expected = np.array([
                    (xs.min() + xs.max() + 1) / 2 / size,
                    (ys.min() + ys.max() + 1) / 2 / size,
                    (xs.max() + 1 - xs.min()) / size,
                    (ys.max() + 1 - ys.min()) / size,
                ])
                np.testing.assert_allclose(ann.box_cxcywh, expected, atol=1.0 / size)

    def test_exact_object_count(self):
        spec = DatasetSpec(num_images=5, image_size=64, objects_per_image=(3, 3), seed=0)
        dataset = generate_dataset(spec)
        assert all(len(anns) == 3 for anns in dataset.annotations)

    def test_min_area_respected(self):
        dataset = generate_dataset(DatasetSpec(num_images=20, image_size=48, seed=9))
        for anns in dataset.annotations:
            for ann in anns:
                assert ann.mask.sum() >= MIN_OBJECT_AREA

    def test_objects_do_not_overlap(self):
        dataset = generate_dataset(DatasetSpec(num_images=10, image_size=64,
                                               objects_per_image=(3, 3), seed=5))
        for anns in dataset.annotations:
            total = np.zeros_like(anns[0].mask, dtype=int)
            for ann in anns:
                total += ann.mask.astype(int)
            assert total.max() <= 1

    def test_class_balance_statistical(self):
        dataset = generate_dataset(DatasetSpec(num_images=150, image_size=48,
                                               objects_per_image=(2, 2), seed=1))
        counts = np.zeros(3)
        for anns in dataset.annotations:
            for ann in anns:
                counts[ann.class_id] += 1
        freqs = counts / counts.sum()
        # 300 draws at p=1/3: 4 sigma ~ 0.109
        assert np.all(np.abs(freqs - 1 / 3) < 0.11)


class TestRasterizers:
    def test_circle_center_inclusion(self):
        mask = rasterize_circle(8.0, 8.0, 3.0, 16)
        assert mask[8, 8]
        assert not mask[0, 0]
        assert mask.sum() == pytest.approx(np.pi * 9, rel=0.25)

    def test_polygon_square(self):
        verts = np.array([[2.0, 2.0], [10.0, 2.0], [10.0, 10.0], [2.0, 10.0]])
        mask = rasterize_convex_polygon(verts, 16)
        assert mask.sum() == 64  # pixel centers 2.5..9.5 in both axes
        assert mask[2, 2] and mask[9, 9] and not mask[10, 10]


class TestCocoIO:
    def test_round_trip_lossless(self, tmp_path):
        dataset = generate_dataset(SPEC)
        path = tmp_path / "ann.json"
        write_coco(dataset, path, tmp_path / "images")
        loaded = read_coco(path, tmp_path / "images")
        assert loaded.class_names == dataset.class_names
        assert len(loaded) == len(dataset)
        for img_a, img_b in zip(dataset.images, loaded.images):
            np.testing.assert_array_equal(img_a, img_b)
        for anns_a, anns_b in zip(dataset.annotations, loaded.annotations):
            assert [a.class_id for a in anns_a] == [b.class_id for b in anns_b]
            for a, b in zip(anns_a, anns_b):
                np.testing.assert_allclose(a.box_cxcywh, b.box_cxcywh, atol=1e-9)
                np.testing.assert_array_equal(a.mask, b.mask)
                if a.polygon is None:
                    assert b.polygon is None
                else:
                    np.testing.assert_array_equal(a.polygon, b.polygon)

    def test_box_convention_absolute_xywh(self, tmp_path):
        # normalized (0.5, 0.5, 0.5, 0.5) on a 100 px image -> (25, 25, 50, 50)
        from elasticdet.datasynth import Dataset, ShapeAnnotation

        mask = np.zeros((100, 100), dtype=bool)
        mask[25:75, 25:75] = True
        ann = ShapeAnnotation(class_id=0, box_cxcywh=np.array([0.5, 0.5, 0.5, 0.5]),
                              mask=mask, polygon=np.array([[25.0, 25.0], [75.0, 25.0],
                                                           [75.0, 75.0], [25.0, 75.0]]))
        dataset = Dataset(spec=DatasetSpec(num_images=1, image_size=100),
                          images=[np.zeros((100, 100, 3), dtype=np.uint8)],
                          annotations=[[ann]])
        path = tmp_path / "ann.json"
        write_coco(dataset, path)
        record = json.loads(path.read_text())["annotations"][0]
        assert record["bbox"] == [25.0, 25.0, 50.0, 50.0]

    def test_coco_structure_fields(self, tmp_path):
        dataset = generate_dataset(SPEC)
        path = tmp_path / "ann.json"
        write_coco(dataset, path)
        payload = json.loads(path.read_text())
        assert set(payload) == {"images", "annotations", "categories"}
        assert payload["categories"][0] == {"id": 1, "name": "circle"}
        ann = payload["annotations"][0]
        assert {"id", "image_id", "category_id", "bbox", "area", "iscrowd",
                "segmentation"} <= set(ann)
        # circles carry RLE dicts, polygons carry vertex lists
        kinds = {type(a["segmentation"]).__name__ for a in payload["annotations"]}
        assert kinds <= {"dict", "list"}

    def test_rle_round_trip_exact(self):
        from elasticdet.datasynth import _rle_decode, _rle_encode

        rng = np.random.default_rng(0)
        for _ in range(10):
            mask = rng.random((13, 9)) > 0.6
            assert np.array_equal(_rle_decode(_rle_encode(mask)), mask)

    def test_malformed_json_reports_location(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"images": [,]}')
        with pytest.raises(AnnotationError, match="line 1"):
            read_coco(path)

    def test_missing_keys_identified(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"images": [{"id": 1, "width": 8, "height": 8,
                                                "file_name": "x.png"}],
                                    "annotations": [{"id": 7, "image_id": 1}],
                                    "categories": [{"id": 1, "name": "circle"}]}))
        with pytest.raises(AnnotationError, match="annotation 7"):
            read_coco(path)
