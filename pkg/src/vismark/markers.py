"""Marker drawing and prompt-variant construction.

A marker is a stroked shape (circle by default, in pure red) whose pixel
geometry is an exact function of the image's shorter side: the stroke covers
every pixel whose center lies within half a thickness of the ideal outline,
with no anti-aliasing. Prompt ensembles pair the marked image with variants
whose *outside* is blurred or decolorized, keeping the marked region intact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from vismark.imgcore import (
    BBox,
    Color,
    ImageBuffer,
    PointF,
    gaussian_blur,
    round_half_up,
    to_grayscale,
)

SHAPES = ("circle", "rectangle", "cross", "arrow")

OUTSIDE_EFFECTS = ("blur", "grayscale")

#: Fraction of the shorter side used as blur sigma when none is given.
DEFAULT_BLUR_SIGMA_FRAC = 0.02

NAMED_COLORS = {
    "red": Color(255, 0, 0),
    "green": Color(0, 255, 0),
    "blue": Color(0, 0, 255),
    "yellow": Color(255, 255, 0),
    "cyan": Color(0, 255, 255),
    "magenta": Color(255, 0, 255),
    "white": Color(255, 255, 255),
    "black": Color(0, 0, 0),
}

# Arrow proportions relative to the marker radius: the shaft runs from the
# tip (the marked point) toward the lower right, and two head strokes fan
# back from the tip at +-30 degrees around the shaft direction.
_ARROW_SHAFT_LEN = 2.0
_ARROW_HEAD_LEN = 0.6
_ARROW_ANGLE = math.pi / 4
_ARROW_HEAD_SPREAD = math.pi / 6


@dataclass(frozen=True)
class MarkerSpec:
    """How to draw a marker: shape, color, and size as image fractions."""

    shape: str = "circle"
    color: Color = field(default_factory=lambda: Color(255, 0, 0))
    radius_frac: float = 0.06
    thickness_frac: float = 0.01

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if not 0 < self.radius_frac <= 0.5:
            raise ValueError(f"radius_frac must be in (0, 0.5], got {self.radius_frac}")
        if not self.thickness_frac > 0:
            raise ValueError(f"thickness_frac must be > 0, got {self.thickness_frac}")

    def to_json(self) -> dict:
        return {
            "shape": self.shape,
            "color": [self.color.r, self.color.g, self.color.b],
            "radius_frac": self.radius_frac,
            "thickness_frac": self.thickness_frac,
        }

    @classmethod
    def from_json(cls, data: dict) -> "MarkerSpec":
        try:
            r, g, b = data["color"]
            return cls(
                shape=data["shape"],
                color=Color(int(r), int(g), int(b)),
                radius_frac=float(data["radius_frac"]),
                thickness_frac=float(data["thickness_frac"]),
            )
        except KeyError as exc:
            raise ValueError(f"marker spec missing field {exc.args[0]!r}") from exc


def default_marker() -> MarkerSpec:
    """The standard marker: a red circle, radius 6% and stroke 1% of the shorter side."""
    return MarkerSpec()


def marker_geometry(spec: MarkerSpec, shorter_side: int) -> tuple[int, int]:
    """Pixel (radius, thickness) for a marker on an image with this shorter side.

    Radius rounds half-up; thickness rounds half-up but never drops below a
    single pixel, so markers survive thumbnail-sized images.
    """
    if shorter_side < 1:
        raise ValueError(f"shorter side must be >= 1, got {shorter_side}")
    radius = round_half_up(spec.radius_frac * shorter_side)
    thickness = max(1, round_half_up(spec.thickness_frac * shorter_side))
    return radius, thickness


class Region(Protocol):
    """Anything that can rasterize itself to a boolean inside-mask."""

    def mask(self, width: int, height: int) -> np.ndarray: ...


@dataclass(frozen=True)
class CircleRegion:
    center: PointF
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")

    def mask(self, width: int, height: int) -> np.ndarray:
        dx, dy = _pixel_offsets(width, height, self.center)
        return np.hypot(dx, dy) <= self.radius


@dataclass(frozen=True)
class EllipseRegion:
    center: PointF
    semi_x: float
    semi_y: float

    def __post_init__(self) -> None:
        if not (self.semi_x > 0 and self.semi_y > 0):
            raise ValueError("ellipse semi-axes must be > 0")

    def mask(self, width: int, height: int) -> np.ndarray:
        dx, dy = _pixel_offsets(width, height, self.center)
        return (dx / self.semi_x) ** 2 + (dy / self.semi_y) ** 2 <= 1.0


@dataclass(frozen=True)
class VisualPrompt:
    """An ordered set of prompt variants of the same underlying image."""

    variants: tuple[ImageBuffer, ...]
    labels: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.variants:
            raise ValueError("a prompt needs at least one variant")
        if len(self.variants) != len(self.labels):
            raise ValueError("one label per variant")
        w, h = self.variants[0].width, self.variants[0].height
        for v in self.variants[1:]:
            if (v.width, v.height) != (w, h):
                raise ValueError("all variants must share dimensions")


def _pixel_offsets(width: int, height: int, center: PointF) -> tuple[np.ndarray, np.ndarray]:
    dx = np.arange(width, dtype=np.float64)[np.newaxis, :] - center.x
    dy = np.arange(height, dtype=np.float64)[:, np.newaxis] - center.y
    return dx, dy


def _segment_distance(dx, dy, p0: tuple[float, float], p1: tuple[float, float]) -> np.ndarray:
    """Distance from each pixel offset to the segment p0-p1 (center-relative)."""
    vx, vy = p1[0] - p0[0], p1[1] - p0[1]
    length2 = vx * vx + vy * vy
    px = dx - p0[0]
    py = dy - p0[1]
    if length2 == 0.0:
        return np.hypot(px, py)
    t = np.clip((px * vx + py * vy) / length2, 0.0, 1.0)
    return np.hypot(px - t * vx, py - t * vy)


def _stroke_mask(shape: str, width: int, height: int, center: PointF, radius: int, thickness: int) -> np.ndarray:
    dx, dy = _pixel_offsets(width, height, center)
    half = thickness / 2.0
    if shape == "circle":
        return np.abs(np.hypot(dx, dy) - radius) <= half
    if shape == "rectangle":
        ax, ay = np.abs(dx), np.abs(dy)
        cheb = np.maximum(ax, ay)
        inner = radius - cheb  # signed distance while inside the square
        outer = np.hypot(np.maximum(ax - radius, 0.0), np.maximum(ay - radius, 0.0))
        dist = np.where(cheb <= radius, inner, outer)
        return dist <= half
    if shape == "cross":
        horiz = np.hypot(np.maximum(np.abs(dx) - radius, 0.0), dy)
        vert = np.hypot(dx, np.maximum(np.abs(dy) - radius, 0.0))
        return np.minimum(horiz, vert) <= half
    if shape == "arrow":
        ux, uy = math.cos(_ARROW_ANGLE), math.sin(_ARROW_ANGLE)
        tail = (_ARROW_SHAFT_LEN * radius * ux, _ARROW_SHAFT_LEN * radius * uy)
        dist = _segment_distance(dx, dy, (0.0, 0.0), tail)
        for sign in (-1.0, 1.0):
            angle = _ARROW_ANGLE + sign * _ARROW_HEAD_SPREAD
            head = (_ARROW_HEAD_LEN * radius * math.cos(angle), _ARROW_HEAD_LEN * radius * math.sin(angle))
            dist = np.minimum(dist, _segment_distance(dx, dy, (0.0, 0.0), head))
        return dist <= half
    raise ValueError(f"unknown shape {shape!r}")


def draw_marker(image: ImageBuffer, center: PointF, spec: MarkerSpec | None = None) -> ImageBuffer:
    """Stamp the marker onto a copy of the image.

    A pixel is painted exactly when its integer coordinate lies within half a
    stroke thickness of the ideal outline; everything else is byte-identical
    to the input. The marker may extend past the image edges and is clipped.
    """
    spec = spec or default_marker()
    if not (0 <= center.x < image.width and 0 <= center.y < image.height):
        raise ValueError(
            f"marker center ({center.x}, {center.y}) outside {image.width}x{image.height} image"
        )
    radius, thickness = marker_geometry(spec, min(image.width, image.height))
    mask = _stroke_mask(spec.shape, image.width, image.height, center, radius, thickness)
    out = image.array.copy()
    out[mask] = spec.color.as_tuple()
    return ImageBuffer(out)


def default_blur_sigma(image: ImageBuffer) -> float:
    return DEFAULT_BLUR_SIGMA_FRAC * min(image.width, image.height)


def apply_outside_effect(
    image: ImageBuffer,
    region: Region,
    effect: str,
    *,
    sigma: float | None = None,
) -> ImageBuffer:
    """Blur or decolorize everything outside the region, preserving its inside.

    sigma applies to the blur effect only and defaults to 2% of the shorter
    side.
    """
    if effect not in OUTSIDE_EFFECTS:
        raise ValueError(f"unknown effect {effect!r}; expected one of {OUTSIDE_EFFECTS}")
    if effect == "blur":
        backdrop = gaussian_blur(image, sigma if sigma is not None else default_blur_sigma(image))
    else:
        backdrop = to_grayscale(image)
    inside = region.mask(image.width, image.height)
    out = backdrop.array.copy()
    out[inside] = image.array[inside]
    return ImageBuffer(out)


def build_prompt_ensemble(
    image: ImageBuffer,
    center: PointF,
    spec: MarkerSpec | None = None,
    *,
    sigma: float | None = None,
) -> VisualPrompt:
    """The standard three-variant prompt for a circle marker.

    Variant 0 is the marked image; variants 1 and 2 additionally blur or
    decolorize everything outside the circle's outer stroke edge.
    """
    spec = spec or default_marker()
    if spec.shape != "circle":
        raise ValueError(f"prompt ensembles are defined for circle markers, got {spec.shape!r}")
    marked = draw_marker(image, center, spec)
    radius, thickness = marker_geometry(spec, min(image.width, image.height))
    region = CircleRegion(center, radius + thickness / 2.0)
    return VisualPrompt(
        variants=(
            marked,
            apply_outside_effect(marked, region, "blur", sigma=sigma),
            apply_outside_effect(marked, region, "grayscale"),
        ),
        labels=("circle", "circle+blur-out", "circle+gray-out"),
    )


def marker_for_bbox(
    image: ImageBuffer,
    bbox: BBox,
    spec: MarkerSpec | None = None,
) -> tuple[ImageBuffer, EllipseRegion]:
    """Draw the ellipse circumscribing a box and return it with its region.

    The ellipse is centered on the box with semi-axes (w/2 + t, h/2 + t)
    where t is the stroke thickness; the returned region extends to the
    stroke's outer edge and is what outside-effects should preserve.
    """
    spec = spec or default_marker()
    ix0, iy0 = max(bbox.x, 0.0), max(bbox.y, 0.0)
    ix1, iy1 = min(bbox.x + bbox.w, image.width), min(bbox.y + bbox.h, image.height)
    if ix1 <= ix0 or iy1 <= iy0:
        raise ValueError(
            f"bbox ({bbox.x}, {bbox.y}, {bbox.w}, {bbox.h}) does not intersect a "
            f"{image.width}x{image.height} image"
        )
    _, thickness = marker_geometry(spec, min(image.width, image.height))
    center = bbox.center
    a = bbox.w / 2.0 + thickness
    b = bbox.h / 2.0 + thickness
    half = thickness / 2.0
    dx, dy = _pixel_offsets(image.width, image.height, center)
    outer = (dx / (a + half)) ** 2 + (dy / (b + half)) ** 2 <= 1.0
    inner = (dx / (a - half)) ** 2 + (dy / (b - half)) ** 2 < 1.0
    out = image.array.copy()
    out[outer & ~inner] = spec.color.as_tuple()
    return ImageBuffer(out), EllipseRegion(center, a + half, b + half)


def crop_prompt(image: ImageBuffer, center: PointF, window_frac: float) -> ImageBuffer:
    """Cut a square window around a point instead of marking it.

    The window side is window_frac of the shorter image side; the window is
    shifted (not shrunk) when the point sits near an edge.
    """
    if not 0 < window_frac <= 1:
        raise ValueError(f"window_frac must be in (0, 1], got {window_frac}")
    if not (0 <= center.x < image.width and 0 <= center.y < image.height):
        raise ValueError(
            f"window center ({center.x}, {center.y}) outside {image.width}x{image.height} image"
        )
    side = max(1, round_half_up(window_frac * min(image.width, image.height)))
    left = min(max(round_half_up(center.x - side / 2.0), 0), image.width - side)
    top = min(max(round_half_up(center.y - side / 2.0), 0), image.height - side)
    return ImageBuffer(image.array[top : top + side, left : left + side])
