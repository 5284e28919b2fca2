"""vismark: visual marker prompting for zero-shot localization-style tasks.

Draw a marker (a red circle, by default) on an image, embed the variants with
a CLIP-style backend, and solve keypoint naming, keypoint localization,
referring expression comprehension, and a marker-bias probe on top of the
resulting score matrices.
"""

from vismark.imgcore import BBox, Color, ImageBuffer, PointF

__all__ = ["BBox", "Color", "ImageBuffer", "PointF"]
__version__ = "0.1.0"
