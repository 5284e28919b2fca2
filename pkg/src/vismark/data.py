"""Dataset ingestion and run-report persistence.

Annotation files are plain JSON (UTF-8) with pixel coordinates in the source
image frame and [x, y, w, h] boxes. Loaders decode every referenced image,
validate each entry, and report all problems in one pass rather than
stopping at the first.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

from vismark.imgcore import BBox, DecodeError, ImageBuffer, PointF, decode_png
from vismark.tasks import BiasCategories, KeypointInstance, RecInstance, SaliencyMask


class FileFormatError(ValueError):
    """A file that does not parse as its expected format."""


@dataclass(frozen=True)
class ValidationIssue:
    """One problem found in one dataset entry (or in the file head)."""

    entry: int | None
    field: str
    reason: str

    def __str__(self) -> str:
        where = "file" if self.entry is None else f"entry {self.entry}"
        return f"{where}: {self.field}: {self.reason}"


class DatasetValidationError(ValueError):
    """Every validation problem found in one artifact file, together."""

    def __init__(self, path: str | Path, issues: Sequence[ValidationIssue]) -> None:
        self.path = str(path)
        self.issues = tuple(issues)
        listing = "\n".join(f"  {issue}" for issue in self.issues)
        super().__init__(f"{self.path}: {len(self.issues)} validation issue(s)\n{listing}")


def _read_json(path: str | Path) -> Any:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _entries(data: Any, path: str | Path) -> list:
    if not isinstance(data, dict) or not isinstance(data.get("entries"), list):
        raise FileFormatError(f'{path}: expected a JSON object with an "entries" list')
    return data["entries"]


def _number(value: Any) -> float | None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return None
    return float(value)


def _parse_box(value: Any) -> BBox | str:
    """A BBox, or a string describing why the value is not one."""
    if not isinstance(value, list) or len(value) != 4:
        return f"expected [x, y, w, h], got {value!r}"
    nums = [_number(v) for v in value]
    if any(n is None for n in nums):
        return f"box entries must be numbers, got {value!r}"
    try:
        return BBox(*nums)
    except ValueError as exc:
        return str(exc)


def _decode_image(
    base: Path, rel_path: Any, idx: int, issues: list[ValidationIssue]
) -> tuple[str, ImageBuffer] | None:
    if not isinstance(rel_path, str) or not rel_path:
        issues.append(ValidationIssue(idx, "image_path", f"expected a non-empty string, got {rel_path!r}"))
        return None
    try:
        raw = (base / rel_path).read_bytes()
    except OSError as exc:
        issues.append(ValidationIssue(idx, "image_path", str(exc)))
        return None
    try:
        return rel_path, decode_png(raw)
    except DecodeError as exc:
        issues.append(ValidationIssue(idx, "image_path", f"{base / rel_path}: {exc}"))
        return None


# --------------------------------------------------------------------------
# Keypoint datasets
# --------------------------------------------------------------------------


def _keypoint_entry(base: Path, idx: int, entry: Any, issues: list[ValidationIssue]) -> KeypointInstance | None:
    if not isinstance(entry, dict):
        issues.append(ValidationIssue(idx, "entry", f"expected an object, got {type(entry).__name__}"))
        return None
    before = len(issues)

    decoded = _decode_image(base, entry.get("image_path"), idx, issues)

    class_name = entry.get("class_name")
    if not isinstance(class_name, str) or not class_name:
        issues.append(ValidationIssue(idx, "class_name", f"expected a non-empty string, got {class_name!r}"))

    box = _parse_box(entry.get("bbox"))
    if isinstance(box, str):
        issues.append(ValidationIssue(idx, "bbox", box))

    keypoints = entry.get("keypoints")
    names: list[str] = []
    locations: list[PointF] = []
    if not isinstance(keypoints, list) or not keypoints:
        issues.append(ValidationIssue(idx, "keypoints", f"expected a non-empty list, got {keypoints!r}"))
    else:
        for k, kp in enumerate(keypoints):
            if not isinstance(kp, dict) or not isinstance(kp.get("name"), str) or not kp.get("name"):
                issues.append(ValidationIssue(idx, f"keypoints[{k}].name", f"expected a non-empty string in {kp!r}"))
                continue
            x, y = _number(kp.get("x")), _number(kp.get("y"))
            if x is None or y is None:
                issues.append(ValidationIssue(idx, f"keypoints[{k}]", f"x and y must be numbers, got {kp!r}"))
                continue
            names.append(kp["name"])
            locations.append(PointF(x, y))
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            issues.append(ValidationIssue(idx, "keypoints", f"duplicate keypoint names: {dupes}"))
        if decoded is not None:
            _, image = decoded
            for k, pt in enumerate(locations):
                if not (0 <= pt.x < image.width and 0 <= pt.y < image.height):
                    issues.append(
                        ValidationIssue(
                            idx,
                            f"keypoints[{k}]",
                            f"({pt.x}, {pt.y}) outside {image.width}x{image.height} image",
                        )
                    )

    if len(issues) > before or decoded is None:
        return None
    rel_path, image = decoded
    try:
        return KeypointInstance(
            image=image,
            names=tuple(names),
            locations=tuple(locations),
            bbox=box,
            class_name=class_name,
            image_path=rel_path,
        )
    except ValueError as exc:
        issues.append(ValidationIssue(idx, "entry", str(exc)))
        return None


def load_keypoint_dataset(path: str | Path) -> list[KeypointInstance]:
    """Load a keypoint annotation file, decoding images relative to it.

    Raises DatasetValidationError listing every bad entry, FileFormatError
    for malformed JSON, and OSError if the file itself is unreadable.
    """
    path = Path(path)
    entries = _entries(_read_json(path), path)
    issues: list[ValidationIssue] = []
    instances = []
    for idx, entry in enumerate(entries):
        inst = _keypoint_entry(path.parent, idx, entry, issues)
        if inst is not None:
            instances.append(inst)
    if issues:
        raise DatasetValidationError(path, issues)
    return instances


# --------------------------------------------------------------------------
# Referring-expression datasets
# --------------------------------------------------------------------------


def _rec_entry(
    base: Path, idx: int, entry: Any, issues: list[ValidationIssue]
) -> tuple[str, ImageBuffer, tuple[BBox, ...], str, BBox] | None:
    if not isinstance(entry, dict):
        issues.append(ValidationIssue(idx, "entry", f"expected an object, got {type(entry).__name__}"))
        return None
    before = len(issues)

    decoded = _decode_image(base, entry.get("image_path"), idx, issues)

    expression = entry.get("expression")
    if not isinstance(expression, str) or not expression:
        issues.append(ValidationIssue(idx, "expression", f"expected a non-empty string, got {expression!r}"))

    gt_box = _parse_box(entry.get("gt_box"))
    if isinstance(gt_box, str):
        issues.append(ValidationIssue(idx, "gt_box", gt_box))

    proposals_raw = entry.get("proposals")
    proposals: list[BBox] = []
    if not isinstance(proposals_raw, list) or not proposals_raw:
        issues.append(ValidationIssue(idx, "proposals", f"expected a non-empty list, got {proposals_raw!r}"))
    else:
        for k, raw in enumerate(proposals_raw):
            box = _parse_box(raw)
            if isinstance(box, str):
                issues.append(ValidationIssue(idx, f"proposals[{k}]", box))
            else:
                proposals.append(box)

    if len(issues) > before or decoded is None:
        return None
    rel_path, image = decoded
    return rel_path, image, tuple(proposals), expression, gt_box


def load_rec_dataset(path: str | Path) -> list[RecInstance]:
    """Load a referring-expression file; every instance's distractor pool is
    the (deduplicated, order-preserving) list of all expressions in the file."""
    path = Path(path)
    entries = _entries(_read_json(path), path)
    issues: list[ValidationIssue] = []
    parsed = []
    for idx, entry in enumerate(entries):
        row = _rec_entry(path.parent, idx, entry, issues)
        if row is not None:
            parsed.append(row)
    if issues:
        raise DatasetValidationError(path, issues)
    pool = tuple(dict.fromkeys(expression for _, _, _, expression, _ in parsed))
    return [
        RecInstance(
            image=image,
            proposals=proposals,
            expression=expression,
            gt_box=gt_box,
            distractor_pool=pool,
            image_path=rel_path,
        )
        for rel_path, image, proposals, expression, gt_box in parsed
    ]


# --------------------------------------------------------------------------
# Saliency masks
# --------------------------------------------------------------------------


def load_mask_file(path: str | Path) -> dict[str, str]:
    """Parse an image-path -> mask-path JSON object, resolving mask paths
    relative to the mapping file."""
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, dict):
        raise FileFormatError(f"{path}: expected a JSON object mapping image paths to mask paths")
    resolved: dict[str, str] = {}
    for key, value in data.items():
        if not isinstance(value, str) or not value:
            raise FileFormatError(f"{path}: mask path for {key!r} must be a non-empty string, got {value!r}")
        resolved[key] = str(path.parent / value)
    return resolved


def load_saliency_mask(path: str | Path, expect_size: tuple[int, int] | None = None) -> SaliencyMask:
    """Decode a mask PNG and binarize it at the standard threshold (127).

    expect_size is (width, height) of the image the mask must match.
    """
    path = Path(path)
    image = decode_png(path.read_bytes())
    if expect_size is not None and (image.width, image.height) != tuple(expect_size):
        raise ValueError(
            f"{path}: mask is {image.width}x{image.height} but the image is "
            f"{expect_size[0]}x{expect_size[1]}"
        )
    return SaliencyMask.from_image(image)


# --------------------------------------------------------------------------
# Bias-probe inputs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BiasInstance:
    """One probe image plus where its subject is (box, point, or unknown)."""

    image: ImageBuffer
    subject: BBox | PointF | None
    image_path: str | None = None


def _bias_entry(base: Path, idx: int, entry: Any, issues: list[ValidationIssue]) -> BiasInstance | None:
    if not isinstance(entry, dict):
        issues.append(ValidationIssue(idx, "entry", f"expected an object, got {type(entry).__name__}"))
        return None
    before = len(issues)

    decoded = _decode_image(base, entry.get("image_path"), idx, issues)

    subject: BBox | PointF | None = None
    if "subject_bbox" in entry and "subject_point" in entry:
        issues.append(ValidationIssue(idx, "subject", "give subject_bbox or subject_point, not both"))
    elif "subject_bbox" in entry:
        box = _parse_box(entry["subject_bbox"])
        if isinstance(box, str):
            issues.append(ValidationIssue(idx, "subject_bbox", box))
        else:
            subject = box
    elif "subject_point" in entry:
        raw = entry["subject_point"]
        nums = [_number(v) for v in raw] if isinstance(raw, list) and len(raw) == 2 else [None]
        if any(n is None for n in nums):
            issues.append(ValidationIssue(idx, "subject_point", f"expected [x, y], got {raw!r}"))
        else:
            subject = PointF(*nums)

    if len(issues) > before or decoded is None:
        return None
    rel_path, image = decoded
    return BiasInstance(image=image, subject=subject, image_path=rel_path)


def load_bias_dataset(path: str | Path) -> list[BiasInstance]:
    """Load a probe-image file; each entry may pin its subject by box or point."""
    path = Path(path)
    entries = _entries(_read_json(path), path)
    issues: list[ValidationIssue] = []
    instances = []
    for idx, entry in enumerate(entries):
        inst = _bias_entry(path.parent, idx, entry, issues)
        if inst is not None:
            instances.append(inst)
    if issues:
        raise DatasetValidationError(path, issues)
    return instances


def load_bias_categories(path: str | Path) -> BiasCategories:
    """Load the positive/neutral/criminal term lists from a JSON object."""
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, dict):
        raise FileFormatError(f"{path}: expected a JSON object with positive/neutral/criminal lists")
    lists = {}
    for group in ("positive", "neutral", "criminal"):
        value = data.get(group)
        if not isinstance(value, list) or not all(isinstance(t, str) and t for t in value):
            raise FileFormatError(f"{path}: {group!r} must be a list of non-empty strings, got {value!r}")
        lists[group] = tuple(value)
    try:
        return BiasCategories(**lists)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------
# Run reports
# --------------------------------------------------------------------------


def _canonical(value: Any, what: str) -> Any:
    try:
        return json.loads(json.dumps(value))
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{what} is not JSON-serializable: {exc}") from exc


@dataclass(frozen=True)
class TaskReport:
    """A run's complete, serializable record: task, config, results.

    All fields are canonicalized to plain JSON types on construction, so a
    report compares equal to itself after a write/read round trip.
    """

    task: str
    config: Mapping[str, Any]
    per_instance: tuple[Mapping[str, Any], ...]
    aggregate: Mapping[str, Any]

    def __post_init__(self) -> None:
        if not self.task:
            raise ValueError("task name must be non-empty")
        object.__setattr__(self, "config", _canonical(dict(self.config), "config"))
        object.__setattr__(
            self, "per_instance", tuple(_canonical(item, "per_instance") for item in self.per_instance)
        )
        object.__setattr__(self, "aggregate", _canonical(dict(self.aggregate), "aggregate"))


def write_report(report: TaskReport, path: str | Path) -> None:
    """Write a report as canonical JSON: sorted keys, two-space indent."""
    payload = {
        "task": report.task,
        "config": report.config,
        "per_instance": list(report.per_instance),
        "aggregate": report.aggregate,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def read_report(path: str | Path) -> TaskReport:
    """Read a report written by write_report."""
    path = Path(path)
    data = _read_json(path)
    if not isinstance(data, dict):
        raise FileFormatError(f"{path}: expected a JSON object")
    for field_name, kind in (("task", str), ("config", dict), ("per_instance", list), ("aggregate", dict)):
        if not isinstance(data.get(field_name), kind):
            raise FileFormatError(f"{path}: missing or malformed {field_name!r} field")
    return TaskReport(
        task=data["task"],
        config=data["config"],
        per_instance=tuple(data["per_instance"]),
        aggregate=data["aggregate"],
    )
