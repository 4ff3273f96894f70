"""Floor-marker detection on ground-camera frames.

Colour segmentation happens in OpenCV's 8-bit HSV space (H in [0, 180)).
Blobs are split into 8-connected components; each component is summarised
by its pixel centroid and the principal axis of its second moments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import cv2
import numpy as np

from .arena import Frame


@dataclass(frozen=True)
class ColorRange:
    low: tuple[int, int, int]
    high: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "low", tuple(int(v) for v in self.low))
        object.__setattr__(self, "high", tuple(int(v) for v in self.high))
        if any(lo > hi for lo, hi in zip(self.low, self.high)):
            raise ValueError(f"low must be <= high per channel: {self.low} vs {self.high}")


DEFAULT_RANGES: dict[str, ColorRange] = {
    "orange": ColorRange((5, 120, 120), (28, 255, 255)),
    "blue": ColorRange((100, 120, 120), (125, 255, 255)),
    "pink": ColorRange((145, 100, 120), (170, 255, 255)),
}


@dataclass(frozen=True)
class DetectorParams:
    min_area: int = 30
    min_elongation: float = 3.0


@dataclass(frozen=True)
class Blob:
    centroid: tuple[float, float]
    area: int
    direction: float  # principal axis angle in [0, pi), counter-clockwise on screen
    elongation: float  # ratio of principal standard deviations

    @property
    def is_line(self) -> bool:
        return math.isfinite(self.elongation)


@dataclass(frozen=True)
class GroundObservation:
    circle_centroid: Optional[tuple[float, float]] = None
    circle_pixel_radius: Optional[float] = None
    blue_direction: Optional[float] = None
    pink_direction: Optional[float] = None
    pink_centroid: Optional[tuple[float, float]] = None
    blue_segments: tuple[Blob, ...] = field(default=())

    @property
    def empty(self) -> bool:
        return (
            self.circle_centroid is None
            and self.blue_direction is None
            and self.pink_direction is None
        )


EMPTY_OBSERVATION = GroundObservation()


def image_angle(du: float, dv: float) -> float:
    """Screen angle of a pixel displacement, counter-clockwise from +u."""
    return math.atan2(-dv, du)


def line_angle(a: float) -> float:
    """Orientation-free angle in [0, pi)."""
    a = math.fmod(a, math.pi)
    if a < 0:
        a += math.pi
    return 0.0 if a >= math.pi else a


def _moments_blob(component: np.ndarray, x0: int, y0: int) -> Blob:
    m = cv2.moments(component, binaryImage=True)
    area = m["m00"]
    cu = m["m10"] / area + x0 + 0.5
    cv = m["m01"] / area + y0 + 0.5
    mu20, mu02, mu11 = m["mu20"] / area, m["mu02"] / area, m["mu11"] / area
    # covariance in (u, -v) screen-up coordinates flips the sign of mu11
    theta = 0.5 * math.atan2(-2.0 * mu11, mu20 - mu02)
    common = math.sqrt(((mu20 - mu02) / 2.0) ** 2 + mu11**2)
    lam1 = (mu20 + mu02) / 2.0 + common
    lam2 = (mu20 + mu02) / 2.0 - common
    elong = math.sqrt(lam1 / lam2) if lam2 > 1e-12 else math.inf
    return Blob((cu, cv), int(round(area)), line_angle(theta), elong)


def _components(mask: np.ndarray, min_area: int) -> list[Blob]:
    contours, _ = cv2.findContours(mask, cv2.RETR_EXTERNAL, cv2.CHAIN_APPROX_SIMPLE)
    blobs = []
    for c in contours:
        x, y, w, h = cv2.boundingRect(c)
        if w * h < min_area:
            continue
        roi = np.zeros((h, w), dtype=np.uint8)
        cv2.drawContours(roi, [c], 0, 1, thickness=-1, offset=(-x, -y))
        roi &= mask[y : y + h, x : x + w] > 0
        if int(roi.sum()) < min_area:
            continue
        blobs.append(_moments_blob(roi, x, y))
    blobs.sort(key=lambda b: (-b.area, b.centroid))
    return blobs


def color_mask(hsv: np.ndarray, rng: ColorRange) -> np.ndarray:
    return cv2.inRange(hsv, rng.low, rng.high)


def detect_markers(
    frame: Frame | np.ndarray,
    ranges: Mapping[str, ColorRange] = DEFAULT_RANGES,
    params: DetectorParams = DetectorParams(),
) -> GroundObservation:
    """Find the stop circle and line marks in a ground-camera image.

    The circle is the largest orange component; each line direction comes
    from the largest component of its colour that is elongated enough.
    Nothing here raises on a missing marker: absent fields stay ``None``.
    """
    pixels = frame.pixels if isinstance(frame, Frame) else frame
    hsv = cv2.cvtColor(pixels, cv2.COLOR_RGB2HSV)

    circle = None
    radius = None
    orange = color_mask(hsv, ranges["orange"])
    if cv2.countNonZero(orange) >= params.min_area:
        blobs = _components(orange, params.min_area)
        if blobs:
            circle = blobs[0].centroid
            radius = math.sqrt(blobs[0].area / math.pi)

    def lines(name: str) -> list[Blob]:
        m = color_mask(hsv, ranges[name])
        if cv2.countNonZero(m) < params.min_area:
            return []
        return [b for b in _components(m, params.min_area) if b.elongation >= params.min_elongation]

    blue = lines("blue")
    pink = lines("pink")
    return GroundObservation(
        circle_centroid=circle,
        circle_pixel_radius=radius,
        blue_direction=blue[0].direction if blue else None,
        pink_direction=pink[0].direction if pink else None,
        pink_centroid=pink[0].centroid if pink else None,
        blue_segments=tuple(blue),
    )


def ranges_from_dict(d: Mapping) -> dict[str, ColorRange]:
    out = dict(DEFAULT_RANGES)
    for name, spec in (d or {}).items():
        out[name] = ColorRange(tuple(spec["low"]), tuple(spec["high"]))
    return out


def ranges_to_dict(ranges: Mapping[str, ColorRange]) -> dict:
    return {k: {"low": list(v.low), "high": list(v.high)} for k, v in ranges.items()}
