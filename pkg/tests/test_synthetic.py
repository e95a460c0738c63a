import os
from collections import Counter

import numpy as np
import pytest

from dva.src.models.schemas import GenConfig, Split
from dva.src.services import synthetic
from dva.src.services.synthetic import Placement, class_templates, gen_dataset, object_layers, tight_box
from dva.src.utils import imaging
from dva.src.utils.manifest import load_detections, read_manifest


@pytest.fixture(scope="module")
def small_cfg():
    return GenConfig(n_classes=3, n_per_class=4, image_size=48, seed=7)


@pytest.fixture(scope="module")
def generated(small_cfg, tmp_path_factory):
    out_dir = str(tmp_path_factory.mktemp("gen"))
    records, detections = gen_dataset(small_cfg, out_dir)
    return out_dir, records, detections


def test_counts_and_balance(small_cfg, generated):
    _, records, detections = generated
    assert len(records) == 12 and len(detections) == 12
    assert Counter(r.label_id for r in records) == {0: 4, 1: 4, 2: 4}
    per_class_train = Counter(r.label_id for r in records if r.split == Split.TRAIN)
    assert per_class_train == {0: 2, 1: 2, 2: 2}


def test_files_round_trip(generated):
    out_dir, records, detections = generated
    on_disk = read_manifest(os.path.join(out_dir, synthetic.MANIFEST_FILE))
    assert [(r.image_id, r.label_id, r.split) for r in on_disk] == [(r.image_id, r.label_id, r.split) for r in records]
    assert load_detections(os.path.join(out_dir, synthetic.DETECTIONS_FILE)) == {d.image_id: d for d in detections}


def test_boxes_within_area_range(small_cfg, generated):
    _, records, detections = generated
    lo, hi = small_cfg.fg_area_range
    size = small_cfg.image_size
    for det in detections:
        assert lo <= det.bbox.area / (size * size) <= hi
        assert det.bbox.x1 <= size and det.bbox.y1 <= size
        assert det.bbox.area / (size * size) * 100 < 50.0


def test_tight_box():
    mask = np.zeros((10, 10), dtype=bool)
    mask[2:5, 3:8] = True
    box = tight_box(mask)
    assert box.as_list() == [3, 2, 8, 5]


def test_images_match_config(small_cfg, generated):
    _, records, _ = generated
    image = imaging.read_ppm(records[0].image_path)
    assert image.shape == (48, 48, 3)
    assert 0.0 <= image.min() and image.max() <= 1.0


def test_same_seed_same_bytes(small_cfg, generated, tmp_path):
    out_dir, records, _ = generated
    again, _ = gen_dataset(small_cfg, str(tmp_path / "again"))
    for a, b in zip(records, again):
        with open(a.image_path, "rb") as fa, open(b.image_path, "rb") as fb:
            assert fa.read() == fb.read()


def test_other_seed_other_images(small_cfg, generated, tmp_path):
    _, records, _ = generated
    other, _ = gen_dataset(small_cfg.model_copy(update={"seed": 8}), str(tmp_path / "other"))
    assert not np.array_equal(imaging.read_ppm(records[0].image_path), imaging.read_ppm(other[0].image_path))


def _canvas(template, size=64):
    image = np.zeros((size, size, 3))
    for mask, color in object_layers(size, Placement(cx=32, cy=32, scale=40, mirror=False), template):
        image[mask] = color
    return image


def test_subtlety_controls_class_gap():
    """Lower subtlety, smaller difference between two class templates"""
    def gap(subtlety):
        a, b = class_templates(GenConfig(n_classes=2, subtlety=subtlety))
        return np.abs(_canvas(a) - _canvas(b)).mean()

    assert gap(0.1) < gap(1.0)


def test_templates_share_draws_across_subtlety():
    coarse = class_templates(GenConfig(n_classes=3, subtlety=1.0))
    fine = class_templates(GenConfig(n_classes=3, subtlety=0.5))
    for c, f in zip(coarse, fine):
        assert (f.stripe_width - 0.12) == pytest.approx((c.stripe_width - 0.12) / 2)


def test_config_validation():
    with pytest.raises(ValueError):
        GenConfig(fg_area_range=(0.5, 0.3))
    with pytest.raises(ValueError):
        GenConfig(n_classes=1)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
