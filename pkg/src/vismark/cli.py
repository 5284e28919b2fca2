"""Command-line driver: one subcommand per task, plus marker sweeps and
annotated-image output.

Exit codes are stable: 0 success, 1 runtime failure (backend/transport),
2 usage or validation failure. All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from vismark.config import (
    DECODE_CHOICES,
    ConfigError,
    RunConfig,
    load_run_config,
    merge_overrides,
)
from vismark.data import (
    DatasetValidationError,
    TaskReport,
    ValidationIssue,
    load_bias_categories,
    load_bias_dataset,
    load_keypoint_dataset,
    load_mask_file,
    load_rec_dataset,
    load_saliency_mask,
    write_report,
)
from vismark.imgcore import BBox, DecodeError, ImageBuffer, PointF, decode_png, encode_png
from vismark.markers import (
    NAMED_COLORS,
    SHAPES,
    CircleRegion,
    MarkerSpec,
    apply_outside_effect,
    draw_marker,
    marker_for_bbox,
    marker_geometry,
)
from vismark.scoring import (
    BackendTransportError,
    ConstantImageBackend,
    FixtureLookupError,
    PromptTemplate,
    ProtocolError,
    RegionSignature,
    fixture_backend,
    remote_backend,
    synthetic_oracle,
)
from vismark.tasks import (
    ANIMAL_PART_TEMPLATE,
    DEFAULT_BIAS_CATEGORIES,
    DegenerateInputError,
    GridSpec,
    KeypointInstance,
    SaliencyMask,
    bias_probe,
    iou,
    localize_keypoints,
    name_keypoints,
    rec_select,
)

SYNTHETIC_DIM = 64


# --------------------------------------------------------------------------
# Backend resolution
# --------------------------------------------------------------------------


def parse_backend_spec(text: str) -> tuple[str, str | None, str | None]:
    """Split a backend spec into (kind, argument, model)."""
    if text == "synthetic":
        return ("synthetic", None, None)
    if text == "constant":
        return ("constant", None, None)
    if text.startswith("fixture:"):
        path = text[len("fixture:") :]
        if not path:
            raise ConfigError("fixture backend needs a path: fixture:PATH")
        return ("fixture", path, None)
    if text.startswith("remote:"):
        rest = text[len("remote:") :]
        url, sep, model = rest.rpartition("+")
        if not sep or not url or not model:
            raise ConfigError("remote backend needs an endpoint and model: remote:URL+MODEL")
        return ("remote", url, model)
    raise ConfigError(
        f"unknown backend spec {text!r}; expected synthetic, constant, fixture:PATH, or remote:URL+MODEL"
    )


class BackendSet:
    """The run's resolved backends.

    Fixture/remote/constant backends are built once and shared; synthetic
    ones are rebuilt per instance so each can carry that instance's planted
    alignment.
    """

    def __init__(self, config: RunConfig) -> None:
        self._config = config
        self._specs = [parse_backend_spec(text) for text in config.backends]
        self._static: dict[int, Any] = {}
        for i, (kind, arg, model) in enumerate(self._specs):
            if kind == "constant":
                self._static[i] = ConstantImageBackend(config.seed, SYNTHETIC_DIM)
            elif kind == "fixture":
                self._static[i] = fixture_backend(arg)
            elif kind == "remote":
                self._static[i] = remote_backend(arg, model)

    def for_instance(self, alignment: dict[str, RegionSignature] | None) -> list[Any]:
        backends = []
        for i, (kind, _, _) in enumerate(self._specs):
            if kind == "synthetic":
                backends.append(
                    synthetic_oracle(
                        self._config.seed,
                        SYNTHETIC_DIM,
                        alignment or {},
                        marker_color=self._config.marker.color,
                    )
                )
            else:
                backends.append(self._static[i])
        return backends


def _alignment_tolerance(image: ImageBuffer, marker: MarkerSpec) -> float:
    radius, thickness = marker_geometry(marker, min(image.width, image.height))
    return max(4.0, float(radius + thickness))


def _keypoint_alignment(inst: KeypointInstance, marker: MarkerSpec) -> dict[str, RegionSignature]:
    tol = _alignment_tolerance(inst.image, marker)
    return {name: RegionSignature(loc, tol) for name, loc in zip(inst.names, inst.locations)}


# --------------------------------------------------------------------------
# Shared plumbing
# --------------------------------------------------------------------------


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    base = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for key in (
        "tau",
        "grid_m",
        "alpha",
        "distractors",
        "seed",
        "out_dir",
        "decode",
        "variants",
        "template",
        "mean_subtract",
        "include_query",
        "jobs",
    ):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "backend", None):
        overrides["backends"] = tuple(args.backend)
    if getattr(args, "marker", None) is not None:
        overrides["marker"] = _parse_marker(args.marker)
    try:
        return merge_overrides(base, **overrides)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _parse_marker(text: str) -> MarkerSpec:
    source = text
    if not text.lstrip().startswith("{"):
        try:
            source = Path(text).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read marker file: {exc}") from exc
    try:
        return MarkerSpec.from_json(json.loads(source))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad marker spec: {exc}") from exc


def _template(config: RunConfig) -> PromptTemplate:
    return PromptTemplate(config.template) if config.template else ANIMAL_PART_TEMPLATE


def _run_ordered(jobs: int | None, fn: Callable, items: Sequence) -> list:
    """Map fn over items, in order, optionally across worker threads."""
    workers = jobs if jobs is not None else (os.cpu_count() or 1)
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _report_config(config: RunConfig, **extra: Any) -> dict[str, Any]:
    payload = config.to_json()
    payload.update(extra)
    return payload


def _write_task_report(report: TaskReport, config: RunConfig) -> Path:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{report.task}-report.json"
    write_report(report, path)
    return path


def _require_instances(instances: list, what: str) -> None:
    if not instances:
        raise DegenerateInputError(f"{what} has no entries")


# --------------------------------------------------------------------------
# Task commands
# --------------------------------------------------------------------------


def _naming_rows(
    config: RunConfig, instances: list[KeypointInstance], template: PromptTemplate
) -> list[dict[str, Any]]:
    backend_set = BackendSet(config)
    variants = config.variants_for("name-keypoints")

    def run_one(pair):
        idx, inst = pair
        backends = backend_set.for_instance(_keypoint_alignment(inst, config.marker))
        result = name_keypoints(
            inst,
            backends,
            template,
            config.marker,
            config.tau,
            decode=config.decode,
            variants=variants,
        )
        return {
            "index": idx,
            "image_path": inst.image_path,
            "m": inst.m,
            "t2i_accuracy": result.t2i_accuracy,
            "i2t_accuracy": result.i2t_accuracy,
            "mapping": list(result.row_assignment.mapping),
        }

    return _run_ordered(config.jobs, run_one, list(enumerate(instances)))


def cmd_name_keypoints(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    instances = load_keypoint_dataset(args.data)
    _require_instances(instances, "keypoint dataset")
    rows = _naming_rows(config, instances, _template(config))
    aggregate = {
        "n_instances": len(rows),
        "t2i_accuracy": float(np.mean([r["t2i_accuracy"] for r in rows])),
        "i2t_accuracy": float(np.mean([r["i2t_accuracy"] for r in rows])),
    }
    report = TaskReport(
        "name-keypoints", _report_config(config, data=str(args.data)), tuple(rows), aggregate
    )
    path = _write_task_report(report, config)
    print(f"t2i/i2t accuracy: {aggregate['t2i_accuracy']:.3f}/{aggregate['i2t_accuracy']:.3f}")
    print(f"report: {path}")
    return 0


def _resolve_masks(
    instances: list[KeypointInstance], masks_path: str
) -> list[SaliencyMask | None]:
    mapping = load_mask_file(masks_path)
    issues: list[ValidationIssue] = []
    resolved: list[SaliencyMask | None] = []
    for idx, inst in enumerate(instances):
        key = inst.image_path
        if key not in mapping:
            issues.append(ValidationIssue(idx, "masks", f"no mask listed for image {key!r}"))
            resolved.append(None)
            continue
        try:
            resolved.append(
                load_saliency_mask(mapping[key], expect_size=(inst.image.width, inst.image.height))
            )
        except (OSError, DecodeError, ValueError) as exc:
            issues.append(ValidationIssue(idx, "masks", str(exc)))
            resolved.append(None)
    if issues:
        raise DatasetValidationError(masks_path, issues)
    return resolved


def cmd_localize(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    instances = load_keypoint_dataset(args.data)
    _require_instances(instances, "keypoint dataset")
    masks = _resolve_masks(instances, args.masks) if args.masks else [None] * len(instances)
    backend_set = BackendSet(config)
    template = _template(config)
    grid = GridSpec(config.grid_m)
    variants = config.variants_for("localize")

    def run_one(pair):
        idx, inst = pair
        backends = backend_set.for_instance(_keypoint_alignment(inst, config.marker))
        result = localize_keypoints(
            inst.image,
            inst.names,
            inst.class_name,
            backends,
            template,
            config.marker,
            grid=grid,
            mask=masks[idx],
            gt=inst.locations,
            bbox=inst.bbox,
            alpha=config.alpha,
            variants=variants,
        )
        return {
            "index": idx,
            "image_path": inst.image_path,
            "m": inst.m,
            "pck": result.pck,
            "flags": list(result.flags),
            "predicted": [[p.x, p.y] for p in result.predicted],
        }

    rows = _run_ordered(config.jobs, run_one, list(enumerate(instances)))
    all_flags = [flag for row in rows for flag in row["flags"]]
    aggregate = {
        "n_instances": len(rows),
        "n_keypoints": len(all_flags),
        "pck": float(np.mean(all_flags)),
        "mean_instance_pck": float(np.mean([r["pck"] for r in rows])),
        "alpha": config.alpha,
    }
    report = TaskReport(
        "localize",
        _report_config(config, data=str(args.data), masks=str(args.masks) if args.masks else None),
        tuple(rows),
        aggregate,
    )
    path = _write_task_report(report, config)
    print(f"PCK@{config.alpha:g}: {aggregate['pck']:.3f}")
    print(f"report: {path}")
    return 0


def cmd_rec(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    instances = load_rec_dataset(args.data)
    _require_instances(instances, "referring-expression dataset")
    backend_set = BackendSet(config)
    variants = config.variants_for("rec")

    def run_one(pair):
        idx, inst = pair
        tol = _alignment_tolerance(inst.image, config.marker)
        backends = backend_set.for_instance(
            {inst.expression: RegionSignature(inst.gt_box.center, tol)}
        )
        selection = rec_select(
            inst,
            backends,
            config.marker,
            distractor_count=config.distractors,
            seed=config.seed + idx,
            include_query=config.include_query,
            mean_subtract=config.mean_subtract,
            variants=variants,
        )
        selected = inst.proposals[selection.index]
        overlap = iou(selected, inst.gt_box)
        return {
            "index": idx,
            "image_path": inst.image_path,
            "selected_index": selection.index,
            "iou": overlap,
            "correct": bool(overlap > 0.5),
            "seed": config.seed + idx,
        }

    rows = _run_ordered(config.jobs, run_one, list(enumerate(instances)))
    aggregate = {
        "n_instances": len(rows),
        "accuracy": float(np.mean([r["correct"] for r in rows])),
    }
    report = TaskReport("rec", _report_config(config, data=str(args.data)), tuple(rows), aggregate)
    path = _write_task_report(report, config)
    print(f"rec accuracy: {aggregate['accuracy']:.3f}")
    print(f"report: {path}")
    return 0


def cmd_bias(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    instances = load_bias_dataset(args.data)
    _require_instances(instances, "bias dataset")
    categories = load_bias_categories(args.categories) if args.categories else DEFAULT_BIAS_CATEGORIES
    backends = BackendSet(config).for_instance(None)
    probe = bias_probe(
        [inst.image for inst in instances],
        [inst.subject for inst in instances],
        categories,
        backends,
        config.marker,
    )
    rows = [
        {
            "index": idx,
            "image_path": inst.image_path,
            "original_term": outcome.original_term,
            "original_category": outcome.original_category,
            "marked_term": outcome.marked_term,
            "marked_category": outcome.marked_category,
        }
        for idx, (inst, outcome) in enumerate(zip(instances, probe.outcomes))
    ]
    aggregate = {
        "n_images": probe.n_images,
        "rate_original": probe.rate_original,
        "rate_marked": probe.rate_marked,
    }
    report = TaskReport(
        "bias",
        _report_config(
            config,
            data=str(args.data),
            categories=str(args.categories) if args.categories else None,
            category_terms=list(categories.terms),
        ),
        tuple(rows),
        aggregate,
    )
    path = _write_task_report(report, config)
    print(f"criminal rate original/marked: {probe.rate_original:.3f}/{probe.rate_marked:.3f}")
    print(f"report: {path}")
    return 0


# --------------------------------------------------------------------------
# Annotation and sweeps
# --------------------------------------------------------------------------


def _parse_floats(text: str, n: int, what: str) -> list[float]:
    parts = text.split(",")
    if len(parts) != n:
        raise ConfigError(f"{what} must be {n} comma-separated numbers, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"{what} must be numeric, got {text!r}") from exc


def _parse_effects(text: str | None) -> list[str]:
    if text is None or text == "all":
        return ["blur", "grayscale"]
    if text == "none":
        return []
    effects = [p.strip() for p in text.split(",") if p.strip()]
    unknown = [e for e in effects if e not in ("blur", "grayscale")]
    if unknown:
        raise ConfigError(f"unknown effect(s) {unknown}; expected blur, grayscale, all, or none")
    return list(dict.fromkeys(effects))


def cmd_annotate(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    marker = config.marker
    if (args.at is None) == (args.bbox is None):
        raise ConfigError("give exactly one of --at x,y or --bbox x,y,w,h")
    image = decode_png(Path(args.image).read_bytes())
    effects = _parse_effects(args.effects)

    if args.at is not None:
        x, y = _parse_floats(args.at, 2, "--at")
        center = PointF(x, y)
        if effects and marker.shape != "circle":
            raise ConfigError(
                f"outside effects are defined for circle markers, not {marker.shape!r}; use --effects none"
            )
        marked = draw_marker(image, center, marker)
        radius, thickness = marker_geometry(marker, min(image.width, image.height))
        region = CircleRegion(center, radius + thickness / 2.0)
        base = marker.shape
    else:
        x, y, w, h = _parse_floats(args.bbox, 4, "--bbox")
        marked, region = marker_for_bbox(image, BBox(x, y, w, h), marker)
        base = "ellipse"

    outputs = [(base, marked)]
    for effect in effects:
        suffix = "blur-out" if effect == "blur" else "gray-out"
        outputs.append((f"{base}-{suffix}", apply_outside_effect(marked, region, effect)))

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    for label, img in outputs:
        path = out_dir / f"{stem}-{label}.png"
        path.write_bytes(encode_png(img))
        print(f"wrote: {path}")
    return 0


def _split_csv(text: str, what: str) -> list[str]:
    items = [p.strip() for p in text.split(",") if p.strip()]
    if not items:
        raise ConfigError(f"{what} must be a non-empty comma-separated list, got {text!r}")
    return items


SWEEP_FIELDS = (
    "shape",
    "color",
    "radius_frac",
    "thickness_frac",
    "t2i_accuracy",
    "i2t_accuracy",
)


def cmd_sweep_markers(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    instances = load_keypoint_dataset(args.data)
    _require_instances(instances, "keypoint dataset")
    shapes = _split_csv(args.shapes or "circle", "--shapes")
    colors = _split_csv(args.colors or "red", "--colors")
    for name in colors:
        if name not in NAMED_COLORS:
            raise ConfigError(f"unknown color {name!r}; known: {sorted(NAMED_COLORS)}")
    for shape in shapes:
        if shape not in SHAPES:
            raise ConfigError(f"unknown shape {shape!r}; known: {list(SHAPES)}")
    try:
        sizes = [float(s) for s in _split_csv(args.sizes or "0.06", "--sizes")]
    except ValueError as exc:
        raise ConfigError(f"--sizes must be numeric: {exc}") from exc

    template = _template(config)
    rows = []
    for shape, color_name, size in itertools.product(shapes, colors, sizes):
        try:
            marker = MarkerSpec(
                shape=shape,
                color=NAMED_COLORS[color_name],
                radius_frac=size,
                thickness_frac=config.marker.thickness_frac,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        combo = merge_overrides(config, marker=marker)
        per_instance = _naming_rows(combo, instances, template)
        rows.append(
            {
                "shape": shape,
                "color": color_name,
                "radius_frac": size,
                "thickness_frac": marker.thickness_frac,
                "t2i_accuracy": float(np.mean([r["t2i_accuracy"] for r in per_instance])),
                "i2t_accuracy": float(np.mean([r["i2t_accuracy"] for r in per_instance])),
            }
        )

    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "marker-sweep.csv"
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} sweep rows: {path}")
    return 0


# --------------------------------------------------------------------------
# Parser and entry point
# --------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; explicit flags override it")
    parser.add_argument(
        "--backend",
        action="append",
        metavar="SPEC",
        help="synthetic | constant | fixture:PATH | remote:URL+MODEL (repeatable for ensembles)",
    )
    parser.add_argument("--marker", help="marker spec: inline JSON or a path to a JSON file")
    parser.add_argument("--seed", type=int, help="run seed (default 0)")
    parser.add_argument("--out-dir", dest="out_dir", help="output directory (default .)")
    parser.add_argument("--jobs", type=int, help="parallel workers (default: cpu count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vismark",
        description="Mark image regions, score them against text prompts, and run the zero-shot tasks.",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("name-keypoints", help="match keypoint names to marked locations")
    _add_common(p)
    p.add_argument("--data", required=True, help="keypoint dataset JSON")
    p.add_argument("--tau", type=float, help="transport temperature (default 1/150)")
    p.add_argument("--decode", choices=DECODE_CHOICES, help="assignment decoding (default argmax)")
    p.add_argument("--variants", type=int, choices=(1, 3), help="prompt variants per location")
    p.add_argument("--template", help="prompt template with {part} and {animal} slots")
    p.set_defaults(func=cmd_name_keypoints)

    p = sub.add_parser("localize", help="find named keypoints on a candidate grid")
    _add_common(p)
    p.add_argument("--data", required=True, help="keypoint dataset JSON")
    p.add_argument("--masks", help="image-to-saliency-mask mapping JSON")
    p.add_argument("--grid", dest="grid_m", type=int, help="grid size M (default 30)")
    p.add_argument("--alpha", type=float, help="PCK threshold fraction (default 0.1)")
    p.add_argument("--variants", type=int, choices=(1, 3), help="prompt variants per candidate")
    p.add_argument("--template", help="prompt template with {part} and {animal} slots")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("rec", help="pick the proposal box matching a referring expression")
    _add_common(p)
    p.add_argument("--data", required=True, help="referring-expression dataset JSON")
    p.add_argument("--distractors", type=int, help="sampled distractor expressions (default 500)")
    p.add_argument(
        "--no-mean-subtract",
        dest="mean_subtract",
        action="store_const",
        const=False,
        help="score with raw query similarities (ablation)",
    )
    p.add_argument(
        "--include-query",
        dest="include_query",
        action="store_const",
        const=True,
        help="include the query expression in the subtracted mean",
    )
    p.add_argument("--variants", type=int, choices=(1, 3), help="prompt variants per proposal")
    p.set_defaults(func=cmd_rec)

    p = sub.add_parser("bias", help="compare zero-shot labels for original vs marked images")
    _add_common(p)
    p.add_argument("--data", required=True, help="probe image dataset JSON")
    p.add_argument("--categories", help="category term lists JSON (default: built-in lists)")
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("annotate", help="write marked (and effect) variants of one image")
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--marker", help="marker spec: inline JSON or a path to a JSON file")
    p.add_argument("--out-dir", dest="out_dir", help="output directory (default .)")
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--at", help="point marker center as x,y")
    p.add_argument("--bbox", help="box to circle as x,y,w,h")
    p.add_argument("--effects", help="all (default), none, or a comma list of blur,grayscale")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("sweep-markers", help="grid-sweep marker shape/color/size on naming")
    _add_common(p)
    p.add_argument("--data", required=True, help="keypoint dataset JSON")
    p.add_argument("--shapes", help="comma list of marker shapes (default circle)")
    p.add_argument("--colors", help="comma list of named colors (default red)")
    p.add_argument("--sizes", help="comma list of radius fractions (default 0.06)")
    p.add_argument("--tau", type=float, help="transport temperature (default 1/150)")
    p.add_argument("--template", help="prompt template with {part} and {animal} slots")
    p.add_argument("--variants", type=int, choices=(1, 3), help="prompt variants per location")
    p.set_defaults(func=cmd_sweep_markers)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except (BackendTransportError, ProtocolError, FixtureLookupError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        # config/dataset/argument problems, including their subclasses
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - last-resort runtime guard
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
