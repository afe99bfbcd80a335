"""Synthetic scene generator and dataset IO tests."""

import json

import numpy as np
import pytest

from aofd.geometry import iou
from aofd.synth import (
    IGNORED_COVERAGE,
    IGNORED_MIN_SIZE,
    MASKED_COVERAGE,
    OCCLUSION_HEAVY_MIX,
    SceneRecord,
    SceneSpec,
    load_image,
    load_mask,
    make_benchmark,
    masked_face_fraction,
    read_dataset,
    render_scene,
    write_dataset,
)

SPEC = SceneSpec(seed=42)


def render(seed, spec=SPEC):
    return render_scene(spec, np.random.default_rng(seed))


class TestRenderScene:
    def test_deterministic_under_seed(self):
        a = render(3)
        b = render(3)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[2], b[2])
        assert a[1] == b[1]

    def test_different_seeds_differ(self):
        imgs = [render(s)[0].tobytes() for s in range(20)]
        assert len(set(imgs)) == 20

    def test_image_dtype_and_size(self):
        img, _, mask = render(0)
        assert img.dtype == np.uint8 and img.shape == (128, 128)
        assert mask.dtype == np.uint8 and set(np.unique(mask)) <= {0, 1}

    def test_boxes_inside_image(self):
        for seed in range(40):
            _, anns, _ = render(seed)
            assert anns
            for a in anns:
                assert 0 <= a.box.x1 < a.box.x2 <= 128
                assert 0 <= a.box.y1 < a.box.y2 <= 128

    def test_mask_pixels_only_inside_masked_boxes(self):
        # every occlusion-mask pixel must fall inside some masked-state box
        for seed in range(30):
            _, anns, mask = render(seed)
            ys, xs = np.nonzero(mask)
            boxes = [a.box for a in anns if a.occlusion_state == "masked"]
            for y, x in zip(ys, xs):
                assert any(b.x1 <= x < b.x2 and b.y1 <= y < b.y2 for b in boxes)

    def test_unmasked_scene_has_empty_mask(self):
        for seed in range(30):
            _, anns, mask = render(seed)
            if not any(a.occlusion_state == "masked" for a in anns):
                assert mask.sum() == 0

    def test_tiny_faces_ignored(self):
        spec = SceneSpec(seed=1, tiny_face_prob=1.0)
        for seed in range(10):
            _, anns, _ = render(seed, spec)
            for a in anns:
                if min(a.box.width, a.box.height) < IGNORED_MIN_SIZE:
                    assert a.occlusion_state == "ignored"

    def test_no_occluder_categories_never_masked(self):
        spec = SceneSpec(seed=1, category_probs={
            "landmark_occlusion": 0.0, "face_over_face": 0.0,
            "object_occlusion": 0.0, "none": 1.0}, tiny_face_prob=0.0)
        for seed in range(20):
            _, anns, mask = render(seed, spec)
            assert all(a.occlusion_state == "unmasked" for a in anns)
            assert mask.sum() == 0

    def test_occlusion_heavy_mix_produces_masked_faces(self):
        spec = SceneSpec(seed=5, category_probs=OCCLUSION_HEAVY_MIX)
        states = [a.occlusion_state for seed in range(40)
                  for a in render(seed, spec)[1]]
        assert states.count("masked") > 0.25 * len(states)

    def test_masked_region_set_exactly_for_masked(self):
        for seed in range(30):
            _, anns, _ = render(seed)
            for a in anns:
                assert (a.occlusion_region is not None) == (a.occlusion_state == "masked")

    def test_face_overlap_bounded(self):
        # non-face-over-face pairs stay below the placement IoU limit
        spec = SceneSpec(seed=1, category_probs={
            "landmark_occlusion": 0.3, "face_over_face": 0.0,
            "object_occlusion": 0.3, "none": 0.4})
        for seed in range(20):
            _, anns, _ = render(seed, spec)
            for i, a in enumerate(anns):
                for b in anns[i + 1:]:
                    assert iou(a.box, b.box) < 0.1

    def test_probability_validation(self):
        with pytest.raises(ValueError):
            SceneSpec(category_probs={"none": 0.5})
        with pytest.raises(ValueError):
            SceneSpec(face_size=(10.0, 40.0))

    def test_coverage_thresholds_are_ordered(self):
        assert 0 < MASKED_COVERAGE < IGNORED_COVERAGE < 1


class TestDatasetIO:
    def _scenes(self, n=6):
        out = []
        spec = SceneSpec(seed=9, category_probs=OCCLUSION_HEAVY_MIX)
        for seed in range(n):
            img, anns, mask = render(seed, spec)
            out.append(SceneRecord(image=img, annotations=anns, mask=mask,
                                   split="train"))
        return out

    def test_round_trip(self, tmp_path):
        scenes = self._scenes()
        written = write_dataset(scenes, tmp_path)
        back = read_dataset(tmp_path)
        assert back == written
        for scene, rec in zip(scenes, back):
            assert np.array_equal(load_image(tmp_path, rec), scene.image)
            if rec.mask is not None:
                assert np.array_equal(load_mask(tmp_path, rec), scene.mask)
            else:
                assert scene.mask.sum() == 0

    def test_mask_written_iff_masked_face(self, tmp_path):
        records = write_dataset(self._scenes(), tmp_path)
        for rec in records:
            has_masked = any(a.occlusion_state == "masked" for a in rec.annotations)
            assert (rec.mask is not None) == has_masked

    def test_empty_directory(self, tmp_path):
        assert read_dataset(tmp_path) == []

    def test_malformed_line_reports_line_number(self, tmp_path):
        write_dataset(self._scenes(2), tmp_path)
        index = tmp_path / "annotations.jsonl"
        index.write_text(index.read_text() + '{"image": "x.png"}\n')
        with pytest.raises(ValueError, match="annotations.jsonl:3"):
            read_dataset(tmp_path)

    def test_missing_mask_file_rejected(self, tmp_path):
        write_dataset(self._scenes(), tmp_path)
        recs = read_dataset(tmp_path)
        victim = next(r for r in recs if r.mask is not None)
        (tmp_path / victim.mask).unlink()
        with pytest.raises(FileNotFoundError):
            read_dataset(tmp_path)

    def test_coco_like_export(self, tmp_path):
        from aofd.synth import export_coco_like
        records = write_dataset(self._scenes(3), tmp_path)
        export_coco_like(records, tmp_path / "index.json")
        d = json.loads((tmp_path / "index.json").read_text())
        assert len(d["images"]) == 3
        assert len(d["annotations"]) == sum(len(r.annotations) for r in records)


class TestMakeBenchmark:
    @pytest.fixture(scope="class")
    @staticmethod
    def bench():
        return make_benchmark(SceneSpec(seed=7), sizes=(20, 5, 12), seg_size=8)

    def test_split_sizes(self, bench):
        assert [len(bench[s]) for s in ("train", "val", "test", "seg")] == [20, 5, 12, 8]

    def test_test_split_masked_heavy(self, bench):
        assert masked_face_fraction(bench["test"]) >= 0.5

    def test_train_split_mostly_unoccluded(self, bench):
        assert masked_face_fraction(bench["train"]) < 0.5

    def test_seg_split_all_masked(self, bench):
        for scene in bench["seg"]:
            assert any(a.occlusion_state == "masked" for a in scene.annotations)

    def test_splits_disjoint_by_content(self, bench):
        hashes = [s.content_hash() for split in bench.values() for s in split]
        assert len(set(hashes)) == len(hashes)

    def test_deterministic(self, bench):
        again = make_benchmark(SceneSpec(seed=7), sizes=(20, 5, 12), seg_size=8)
        for split in bench:
            assert [s.content_hash() for s in bench[split]] == \
                   [s.content_hash() for s in again[split]]

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            make_benchmark(SPEC, sizes=(0, 1, 1))
