"""Loader tests: JSON schemas, exhaustive validation, report round trips."""

import json

import numpy as np
import pytest

from vismark.data import (
    BiasInstance,
    DatasetValidationError,
    FileFormatError,
    TaskReport,
    ValidationIssue,
    load_bias_categories,
    load_bias_dataset,
    load_keypoint_dataset,
    load_mask_file,
    load_rec_dataset,
    load_saliency_mask,
    read_report,
    write_report,
)
from vismark.imgcore import BBox, ImageBuffer, PointF, encode_png


def _gradient_image(width, height):
    xs = np.arange(width)[np.newaxis, :]
    ys = np.arange(height)[:, np.newaxis]
    arr = np.zeros((height, width, 3), dtype=np.uint8)
    arr[..., 0] = (xs * 3) % 251
    arr[..., 1] = (ys * 5 + 60) % 196 + 60
    arr[..., 2] = (xs + ys * 2 + 80) % 176 + 80
    return ImageBuffer(arr)


def _write_image(directory, name, width=32, height=24):
    image = _gradient_image(width, height)
    (directory / name).write_bytes(encode_png(image))
    return image


def _write_json(directory, name, payload):
    path = directory / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


def _keypoint_entry(**overrides):
    entry = {
        "image_path": "img.png",
        "class_name": "bird",
        "bbox": [2, 3, 20, 15],
        "keypoints": [{"name": "beak", "x": 5, "y": 6}, {"name": "tail", "x": 20, "y": 10}],
    }
    entry.update(overrides)
    return entry


# ------------------------------------------------------- keypoint datasets


def test_load_minimal_keypoint_dataset(tmp_path):
    image = _write_image(tmp_path, "img.png")
    path = _write_json(tmp_path, "data.json", {"entries": [_keypoint_entry()]})
    instances = load_keypoint_dataset(path)
    assert len(instances) == 1
    inst = instances[0]
    assert inst.m == 2
    assert inst.names == ("beak", "tail")
    assert inst.locations == (PointF(5, 6), PointF(20, 10))
    assert inst.bbox == BBox(2, 3, 20, 15)
    assert inst.class_name == "bird"
    assert inst.image_path == "img.png"
    assert inst.image == image


def test_load_keypoints_preserves_order(tmp_path):
    _write_image(tmp_path, "img.png")
    entries = [
        _keypoint_entry(class_name="bird"),
        _keypoint_entry(class_name="cat"),
        _keypoint_entry(class_name="dog"),
    ]
    path = _write_json(tmp_path, "data.json", {"entries": entries})
    assert [i.class_name for i in load_keypoint_dataset(path)] == ["bird", "cat", "dog"]


def test_duplicate_keypoint_name_is_reported(tmp_path):
    _write_image(tmp_path, "img.png")
    bad = _keypoint_entry(
        keypoints=[{"name": "beak", "x": 1, "y": 1}, {"name": "beak", "x": 2, "y": 2}]
    )
    path = _write_json(tmp_path, "data.json", {"entries": [bad]})
    with pytest.raises(DatasetValidationError) as excinfo:
        load_keypoint_dataset(path)
    assert "entry 0" in str(excinfo.value)
    assert "duplicate" in str(excinfo.value)


def test_keypoint_outside_image_is_reported(tmp_path):
    _write_image(tmp_path, "img.png", width=32, height=24)
    bad = _keypoint_entry(keypoints=[{"name": "beak", "x": 32, "y": 5}])
    path = _write_json(tmp_path, "data.json", {"entries": [bad]})
    with pytest.raises(DatasetValidationError) as excinfo:
        load_keypoint_dataset(path)
    assert "outside" in str(excinfo.value)


def test_missing_image_file_is_reported_with_path(tmp_path):
    path = _write_json(tmp_path, "data.json", {"entries": [_keypoint_entry(image_path="gone.png")]})
    with pytest.raises(DatasetValidationError) as excinfo:
        load_keypoint_dataset(path)
    assert "gone.png" in str(excinfo.value)


def test_all_bad_entries_are_reported_not_just_first(tmp_path):
    _write_image(tmp_path, "img.png")
    entries = [
        _keypoint_entry(class_name=""),
        _keypoint_entry(),  # fine
        _keypoint_entry(bbox=[0, 0, -5, 5]),
        _keypoint_entry(keypoints=[]),
    ]
    path = _write_json(tmp_path, "data.json", {"entries": entries})
    with pytest.raises(DatasetValidationError) as excinfo:
        load_keypoint_dataset(path)
    issues = excinfo.value.issues
    assert sorted({i.entry for i in issues}) == [0, 2, 3]
    assert len(issues) == 3


def test_keypoint_schema_violations(tmp_path):
    _write_image(tmp_path, "img.png")
    cases = [
        ({"entries": "nope"}, FileFormatError),
        ([1, 2, 3], FileFormatError),
        ({"entries": [42]}, DatasetValidationError),
        ({"entries": [_keypoint_entry(bbox=[1, 2, 3])]}, DatasetValidationError),
        ({"entries": [_keypoint_entry(keypoints=[{"name": "", "x": 1, "y": 1}])]}, DatasetValidationError),
        ({"entries": [_keypoint_entry(keypoints=[{"name": "a", "x": "one", "y": 1}])]}, DatasetValidationError),
    ]
    for payload, expected in cases:
        path = _write_json(tmp_path, "case.json", payload)
        with pytest.raises(expected):
            load_keypoint_dataset(path)


def test_malformed_json_reports_location(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"entries": [,]}', encoding="utf-8")
    with pytest.raises(FileFormatError, match="line 1"):
        load_keypoint_dataset(path)


def test_missing_dataset_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_keypoint_dataset(tmp_path / "absent.json")


# ------------------------------------------------------- rec datasets


def _rec_entry(**overrides):
    entry = {
        "image_path": "img.png",
        "expression": "the striped cat",
        "gt_box": [2, 2, 10, 8],
        "proposals": [[2, 2, 10, 8], [14, 4, 8, 8]],
    }
    entry.update(overrides)
    return entry


def test_load_rec_dataset_builds_shared_pool(tmp_path):
    _write_image(tmp_path, "img.png")
    entries = [_rec_entry(), _rec_entry(expression="the red mug")]
    path = _write_json(tmp_path, "rec.json", {"entries": entries})
    instances = load_rec_dataset(path)
    assert len(instances) == 2
    assert instances[0].distractor_pool == ("the striped cat", "the red mug")
    assert instances[1].distractor_pool == ("the striped cat", "the red mug")
    assert instances[0].proposals == (BBox(2, 2, 10, 8), BBox(14, 4, 8, 8))
    assert instances[0].gt_box == BBox(2, 2, 10, 8)
    assert instances[1].expression == "the red mug"


def test_rec_pool_deduplicates_expressions(tmp_path):
    _write_image(tmp_path, "img.png")
    entries = [_rec_entry(), _rec_entry(), _rec_entry(expression="other")]
    path = _write_json(tmp_path, "rec.json", {"entries": entries})
    instances = load_rec_dataset(path)
    assert instances[0].distractor_pool == ("the striped cat", "other")


def test_rec_zero_proposals_is_reported(tmp_path):
    _write_image(tmp_path, "img.png")
    path = _write_json(tmp_path, "rec.json", {"entries": [_rec_entry(proposals=[])]})
    with pytest.raises(DatasetValidationError, match="proposals"):
        load_rec_dataset(path)


def test_rec_bad_gt_box_is_reported(tmp_path):
    _write_image(tmp_path, "img.png")
    path = _write_json(tmp_path, "rec.json", {"entries": [_rec_entry(gt_box=[0, 0, -1, 5])]})
    with pytest.raises(DatasetValidationError, match="gt_box"):
        load_rec_dataset(path)


def test_rec_collects_issues_across_entries(tmp_path):
    _write_image(tmp_path, "img.png")
    entries = [_rec_entry(expression=""), _rec_entry(proposals=[[0, 0, 1]])]
    path = _write_json(tmp_path, "rec.json", {"entries": entries})
    with pytest.raises(DatasetValidationError) as excinfo:
        load_rec_dataset(path)
    assert sorted({i.entry for i in excinfo.value.issues}) == [0, 1]


# ------------------------------------------------------- saliency masks


def test_load_mask_file_resolves_relative_paths(tmp_path):
    sub = tmp_path / "masks"
    sub.mkdir()
    path = _write_json(sub, "map.json", {"a.png": "a_mask.png", "b/b.png": "deep/b_mask.png"})
    mapping = load_mask_file(path)
    assert mapping == {"a.png": str(sub / "a_mask.png"), "b/b.png": str(sub / "deep/b_mask.png")}


def test_load_mask_file_rejects_non_object(tmp_path):
    path = _write_json(tmp_path, "map.json", ["a.png"])
    with pytest.raises(FileFormatError):
        load_mask_file(path)
    path = _write_json(tmp_path, "map2.json", {"a.png": 7})
    with pytest.raises(FileFormatError, match="a.png"):
        load_mask_file(path)


def test_load_saliency_mask_binarizes_at_127(tmp_path):
    arr = np.zeros((2, 3, 3), dtype=np.uint8)
    arr[0, 0] = 127  # at threshold: background
    arr[0, 1] = 128  # above: foreground
    arr[1, 2] = 255
    path = tmp_path / "mask.png"
    path.write_bytes(encode_png(ImageBuffer(arr)))
    mask = load_saliency_mask(path)
    assert mask.values.tolist() == [[False, True, False], [False, False, True]]


def test_load_saliency_mask_checks_size(tmp_path):
    path = tmp_path / "mask.png"
    path.write_bytes(encode_png(_gradient_image(8, 6)))
    assert load_saliency_mask(path, expect_size=(8, 6)).width == 8
    with pytest.raises(ValueError, match="8x6"):
        load_saliency_mask(path, expect_size=(10, 6))


# ------------------------------------------------------- bias inputs


def test_load_bias_dataset_subject_forms(tmp_path):
    _write_image(tmp_path, "img.png")
    entries = [
        {"image_path": "img.png"},
        {"image_path": "img.png", "subject_point": [4, 5]},
        {"image_path": "img.png", "subject_bbox": [2, 2, 8, 6]},
    ]
    path = _write_json(tmp_path, "bias.json", {"entries": entries})
    instances = load_bias_dataset(path)
    assert [inst.subject for inst in instances] == [None, PointF(4, 5), BBox(2, 2, 8, 6)]
    assert all(isinstance(inst, BiasInstance) for inst in instances)


def test_load_bias_dataset_rejects_double_subject(tmp_path):
    _write_image(tmp_path, "img.png")
    entry = {"image_path": "img.png", "subject_point": [1, 1], "subject_bbox": [0, 0, 4, 4]}
    path = _write_json(tmp_path, "bias.json", {"entries": [entry]})
    with pytest.raises(DatasetValidationError, match="not both"):
        load_bias_dataset(path)


def test_load_bias_dataset_rejects_bad_point(tmp_path):
    _write_image(tmp_path, "img.png")
    path = _write_json(
        tmp_path, "bias.json", {"entries": [{"image_path": "img.png", "subject_point": [1]}]}
    )
    with pytest.raises(DatasetValidationError, match="subject_point"):
        load_bias_dataset(path)


def test_load_bias_categories(tmp_path):
    payload = {
        "positive": ["honest man"],
        "neutral": ["man", "person"],
        "criminal": ["thief"],
    }
    path = _write_json(tmp_path, "cats.json", payload)
    categories = load_bias_categories(path)
    assert categories.positive == ("honest man",)
    assert categories.neutral == ("man", "person")
    assert categories.criminal == ("thief",)


def test_load_bias_categories_validation(tmp_path):
    path = _write_json(tmp_path, "cats.json", {"positive": ["a"], "neutral": ["b"]})
    with pytest.raises(FileFormatError, match="criminal"):
        load_bias_categories(path)
    path = _write_json(
        tmp_path, "cats2.json", {"positive": ["a"], "neutral": ["a"], "criminal": ["c"]}
    )
    with pytest.raises(FileFormatError, match="disjoint"):
        load_bias_categories(path)


# ------------------------------------------------------- reports


def _sample_report():
    return TaskReport(
        task="name-keypoints",
        config={"seed": 0, "tau": 1 / 150, "marker": {"shape": "circle", "color": [255, 0, 0]}},
        per_instance=({"index": 0, "t2i": 1.0}, {"index": 1, "t2i": 0.5}),
        aggregate={"t2i": 0.75, "i2t": 0.75},
    )


def test_report_round_trip_identity(tmp_path):
    report = _sample_report()
    path = tmp_path / "report.json"
    write_report(report, path)
    assert read_report(path) == report


def test_report_canonicalizes_tuples():
    report = TaskReport("t", {"color": (255, 0, 0)}, (), {})
    assert report.config == {"color": [255, 0, 0]}


def test_report_bytes_are_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_report(_sample_report(), a)
    write_report(_sample_report(), b)
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert text.endswith("\n")
    assert text.index('"aggregate"') < text.index('"config"') < text.index('"task"')


def test_report_rejects_unserializable_config():
    with pytest.raises(ValueError, match="JSON"):
        TaskReport("t", {"bad": {1, 2}}, (), {})


def test_report_rejects_empty_task():
    with pytest.raises(ValueError, match="task"):
        TaskReport("", {}, (), {})


def test_read_report_rejects_malformed(tmp_path):
    path = tmp_path / "r.json"
    path.write_text("{", encoding="utf-8")
    with pytest.raises(FileFormatError, match="line 1"):
        read_report(path)
    path.write_text(json.dumps({"task": "t", "config": {}}), encoding="utf-8")
    with pytest.raises(FileFormatError, match="per_instance"):
        read_report(path)
    path.write_text(json.dumps([1, 2]), encoding="utf-8")
    with pytest.raises(FileFormatError, match="object"):
        read_report(path)


def test_validation_issue_str():
    assert str(ValidationIssue(3, "bbox", "w must be positive")) == "entry 3: bbox: w must be positive"
    assert str(ValidationIssue(None, "entries", "missing")) == "file: entries: missing"
