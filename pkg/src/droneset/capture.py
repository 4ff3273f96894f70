"""Drone-quality degradation of object views and annotation boxes."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from .arena import Frame
from .vehicle import DronePose


class NoObjectInView(ValueError):
    """The foreground mask is empty: the object left the frame."""


@dataclass(frozen=True)
class DegradationParams:
    """Camera-shake image effects.

    ``blur_scale`` converts image-plane camera speed (m/s) times exposure
    time (s) into kernel length in pixels, i.e. it is in px per metre of
    travel during the exposure.
    """

    blur_scale: float = 750.0
    exposure_jitter_std: float = 0.06
    sensor_noise_std: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if min(self.blur_scale, self.exposure_jitter_std, self.sensor_noise_std) < 0:
            raise ValueError("degradation parameters must be >= 0")


NO_DEGRADATION = DegradationParams(0.0, 0.0, 0.0, 0)


@dataclass(eq=False)
class CaptureRecord:
    frame: Frame
    bbox: tuple[int, int, int, int]
    stop_index: int
    frame_index: int
    instantaneous_pose: DronePose
    nominal_view_degrees: int
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    image_plane_speed: float = 0.0
    blur_length: float = 1.0
    timestamp: float = 0.0

    def __post_init__(self):
        x1, y1, x2, y2 = self.bbox
        if not (0 <= x1 < x2 <= 640 and 0 <= y1 < y2 <= 360):
            raise ValueError(f"invalid bbox {self.bbox}")
        if self.nominal_view_degrees not in range(0, 360, 45):
            raise ValueError(f"view {self.nominal_view_degrees} is off the 45 degree grid")


def image_plane_velocity(velocity, yaw: float) -> tuple[float, float]:
    """Camera velocity components along the object camera's right and down axes."""
    vx, vy, vz = velocity
    right = vx * math.sin(yaw) - vy * math.cos(yaw)
    return right, -vz


def blur_length(speed: float, params: DegradationParams, exposure_time: float) -> float:
    """Kernel length in px, floored at 1 (a 1 px kernel is the identity)."""
    return max(1.0, params.blur_scale * speed * exposure_time)


def motion_kernel(length: float, angle: float) -> np.ndarray:
    """Normalized line kernel of ``length`` px along screen angle ``angle``.

    The kernel is a box of width ``length`` integrated along the motion
    direction and splatted bilinearly onto the grid.
    """
    if length <= 1.0:
        return np.ones((1, 1), dtype=np.float32)
    half = (length - 1.0) / 2.0
    size = 2 * int(math.ceil(half)) + 3
    c = size // 2
    k = np.zeros((size, size), dtype=np.float64)
    n = max(2, int(math.ceil((length - 1.0) * 8)) + 1)
    t = np.linspace(-half, half, n)
    xs = c + t * math.cos(angle)
    ys = c + t * math.sin(angle)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx, fy = xs - x0, ys - y0
    for dx, dy, w in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        np.add.at(k, (y0 + dy, x0 + dx), w)
    k /= k.sum()
    return k.astype(np.float32)


def frame_rng(seed: int, stop_index: Optional[int], frame_index: Optional[int]) -> np.random.Generator:
    # index + 1 so that "no index" (0) stays distinct from index 0
    return np.random.default_rng([seed, 0 if stop_index is None else stop_index + 1,
                                  0 if frame_index is None else frame_index + 1, 0x5EED])


def degrade(
    frame: Frame,
    velocity,
    params: DegradationParams,
    exposure_time: float,
) -> Frame:
    """Blur, then exposure gain, then sensor noise; output stays uint8.

    Blur runs along the camera's image-plane motion (yaw jitter is not
    blurred). Randomness comes from a stream keyed by
    ``(seed, stop_index, frame_index)`` so frames can be processed in any
    order.
    """
    yaw = frame.pose.yaw if frame.pose is not None else 0.0
    right, down = image_plane_velocity(velocity, yaw)
    speed = math.hypot(right, down)
    length = blur_length(speed, params, exposure_time)
    rng = frame_rng(params.seed, frame.stop_index, frame.frame_index)
    gain = 1.0
    if params.exposure_jitter_std > 0:
        gain = max(0.0, 1.0 + params.exposure_jitter_std * float(rng.standard_normal()))

    img = frame.pixels
    if length > 1.0:
        # image motion is opposite to camera motion; a line kernel is symmetric anyway
        img = cv2.filter2D(img, -1, motion_kernel(length, math.atan2(down, right)),
                           borderType=cv2.BORDER_REPLICATE)
    if gain != 1.0 or params.sensor_noise_std > 0:
        out = img.astype(np.float32)
        if gain != 1.0:
            out *= np.float32(gain)
        if params.sensor_noise_std > 0:
            # OpenCV's generator is thread-local and about 3x faster than numpy's here;
            # seeding it from the frame stream keeps frames order-independent
            cv2.setRNGSeed(int(rng.integers(1, 2**31)))
            noise = np.empty((out.shape[0], out.size // out.shape[0]), dtype=np.float32)
            cv2.randn(noise, 0.0, float(params.sensor_noise_std))
            out += noise.reshape(out.shape)
        np.rint(out, out=out)
        np.clip(out, 0, 255, out=out)
        img = out.astype(np.uint8)
    elif img is frame.pixels:
        img = img.copy()
    return Frame(img, frame.stop_index, frame.frame_index, frame.timestamp, frame.pose)


def compute_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight half-open box ``(x1, y1, x2, y2)`` around the nonzero pixels."""
    cols = np.flatnonzero(mask.any(axis=0))
    if cols.size == 0:
        raise NoObjectInView("no object in view: mask is empty")
    rows = np.flatnonzero(mask.any(axis=1))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1
