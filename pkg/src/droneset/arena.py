"""Flight-space geometry and the two synthetic cameras.

The arena is a floor with orange stop circles, blue path segments joining
consecutive stops and short pink heading marks aimed at the object
platform. Ground views are rendered with a downward pinhole camera; object
views with a horizontal pinhole camera looking at a procedural prism stack.

Pixel convention: pixel ``(col, row)`` covers ``[col, col+1) x [row, row+1)``
so its centre is at ``(col + 0.5, row + 0.5)`` and the principal point of a
640x360 camera is ``(320, 180)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property, lru_cache
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
import yaml

from .vehicle import DronePose, wrap_angle, wrap_pi

IMAGE_WIDTH = 640
IMAGE_HEIGHT = 360

# exact RGB constants used by the renderer; perception re-detects them
ORANGE = (255, 140, 0)
BLUE = (30, 80, 230)
PINK = (240, 60, 200)
FLOOR = (120, 120, 120)
GREEN_SCREEN = (40, 170, 60)

_SHIFT = 4  # cv2 fixed-point bits
_SCALE = 1 << _SHIFT

Point = tuple[float, float]


class OutsideArenaError(ValueError):
    pass


class ObjectPlacementError(ValueError):
    pass


@dataclass(frozen=True)
class Stop:
    center: Point
    circle_radius: float
    heading_direction: float
    outgoing_segment: Optional[tuple[Point, Point]] = None

    def __post_init__(self):
        if self.circle_radius <= 0:
            raise ValueError("circle_radius must be > 0")
        object.__setattr__(self, "heading_direction", wrap_angle(float(self.heading_direction)))


@dataclass(frozen=True)
class ArenaLayout:
    stops: tuple[Stop, ...]
    platform_center: Point = (0.0, 0.0)
    platform_height: float = 0.7
    platform_radius: float = 0.3
    bounds: tuple[float, float, float, float] = (-2.5, -2.5, 2.5, 2.5)
    wall_color: tuple[int, int, int] = GREEN_SCREEN
    floor_color: tuple[int, int, int] = FLOOR
    line_width: float = 0.025
    heading_length: float = 0.18
    marker_gap: float = 0.02
    heading_tolerance: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "stops", tuple(self.stops))
        if not self.stops:
            raise ValueError("layout needs at least one stop")
        for i, stop in enumerate(self.stops):
            last = i == len(self.stops) - 1
            if last and stop.outgoing_segment is not None:
                raise ValueError("last stop must not have an outgoing segment")
            if not last and stop.outgoing_segment is None:
                raise ValueError(f"stop {i} is missing its outgoing segment")
            aim = math.atan2(
                self.platform_center[1] - stop.center[1],
                self.platform_center[0] - stop.center[0],
            )
            if abs(wrap_pi(stop.heading_direction - aim)) > self.heading_tolerance:
                raise ValueError(f"stop {i} heading mark does not point at the platform")
            if not self.contains(stop.center):
                raise ValueError(f"stop {i} lies outside the arena bounds")
        if not self.contains(self.platform_center):
            raise ValueError("platform lies outside the arena bounds")

    def contains(self, p: Point) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= p[0] <= x1 and y0 <= p[1] <= y1

    @cached_property
    def _marker_geometry(self):
        """World-frame circles, quads (colour, 4 corners) for rendering."""
        circles = []
        quads = []
        hw = self.line_width / 2.0
        for stop in self.stops:
            cx, cy = stop.center
            circles.append((cx, cy, stop.circle_radius))
            if stop.outgoing_segment is not None:
                quads.append((BLUE, _segment_quad(*stop.outgoing_segment, hw)))
            h = stop.heading_direction
            d0 = stop.circle_radius + self.marker_gap
            d1 = d0 + self.heading_length
            p0 = (cx + d0 * math.cos(h), cy + d0 * math.sin(h))
            p1 = (cx + d1 * math.cos(h), cy + d1 * math.sin(h))
            quads.append((PINK, _segment_quad(p0, p1, hw)))
        colors = [c for c, _ in quads]
        corners = np.array([q for _, q in quads]).reshape(-1, 4, 2)
        return np.array(circles, dtype=float), colors, corners

    def heading_segment(self, index: int) -> tuple[Point, Point]:
        stop = self.stops[index]
        h = stop.heading_direction
        d0 = stop.circle_radius + self.marker_gap
        d1 = d0 + self.heading_length
        cx, cy = stop.center
        return (
            (cx + d0 * math.cos(h), cy + d0 * math.sin(h)),
            (cx + d1 * math.cos(h), cy + d1 * math.sin(h)),
        )


def _segment_quad(p0: Point, p1: Point, half_width: float) -> np.ndarray:
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    n = math.hypot(dx, dy)
    nx, ny = -dy / n * half_width, dx / n * half_width
    return np.array(
        [
            (p0[0] + nx, p0[1] + ny),
            (p1[0] + nx, p1[1] + ny),
            (p1[0] - nx, p1[1] - ny),
            (p0[0] - nx, p0[1] - ny),
        ]
    )


def generate_layout(
    n_stops: int,
    radius: float,
    seed: int,
    *,
    platform_center: Point = (0.0, 0.0),
    circle_radius: float = 0.08,
    margin: float = 1.0,
) -> ArenaLayout:
    """Evenly spaced stops on a circle around the platform.

    The seed only picks the angular position of the first stop; the stops
    then run counter-clockwise.
    """
    if n_stops < 1:
        raise ValueError("n_stops must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be > 0")
    rng = np.random.default_rng(seed)
    start = float(rng.uniform(0.0, 2.0 * math.pi))
    px, py = platform_center
    centers = []
    for k in range(n_stops):
        phi = start + 2.0 * math.pi * k / n_stops
        centers.append((px + radius * math.cos(phi), py + radius * math.sin(phi)))
    gap = circle_radius + 0.02
    stops = []
    for k, c in enumerate(centers):
        heading = math.atan2(py - c[1], px - c[0])
        seg = None
        if k + 1 < n_stops:
            nxt = centers[k + 1]
            dx, dy = nxt[0] - c[0], nxt[1] - c[1]
            d = math.hypot(dx, dy)
            ux, uy = dx / d, dy / d
            seg = (
                (c[0] + gap * ux, c[1] + gap * uy),
                (nxt[0] - gap * ux, nxt[1] - gap * uy),
            )
        stops.append(Stop(c, circle_radius, heading, seg))
    ext = radius + margin
    bounds = (px - ext, py - ext, px + ext, py + ext)
    return ArenaLayout(tuple(stops), platform_center=platform_center, bounds=bounds)


# --------------------------------------------------------------------------
# config file round trip


def layout_to_dict(layout: ArenaLayout) -> dict:
    return {
        "platform": {
            "center": list(layout.platform_center),
            "height": layout.platform_height,
            "radius": layout.platform_radius,
        },
        "bounds": list(layout.bounds),
        "colors": {"wall": list(layout.wall_color), "floor": list(layout.floor_color)},
        "markers": {
            "line_width": layout.line_width,
            "heading_length": layout.heading_length,
            "gap": layout.marker_gap,
            "heading_tolerance": layout.heading_tolerance,
        },
        "stops": [
            {
                "center": list(s.center),
                "circle_radius": s.circle_radius,
                "heading_direction": s.heading_direction,
                "outgoing_segment": None
                if s.outgoing_segment is None
                else [list(s.outgoing_segment[0]), list(s.outgoing_segment[1])],
            }
            for s in layout.stops
        ],
    }


def _pt(v) -> Point:
    return (float(v[0]), float(v[1]))


def layout_from_dict(d: dict) -> ArenaLayout:
    platform = d.get("platform", {})
    colors = d.get("colors", {})
    markers = d.get("markers", {})
    stops = []
    for s in d["stops"]:
        seg = s.get("outgoing_segment")
        stops.append(
            Stop(
                center=_pt(s["center"]),
                circle_radius=float(s["circle_radius"]),
                heading_direction=float(s["heading_direction"]),
                outgoing_segment=None if seg is None else (_pt(seg[0]), _pt(seg[1])),
            )
        )
    return ArenaLayout(
        stops=tuple(stops),
        platform_center=_pt(platform.get("center", (0.0, 0.0))),
        platform_height=float(platform.get("height", 0.7)),
        platform_radius=float(platform.get("radius", 0.3)),
        bounds=tuple(float(v) for v in d["bounds"]),
        wall_color=tuple(int(v) for v in colors.get("wall", GREEN_SCREEN)),
        floor_color=tuple(int(v) for v in colors.get("floor", FLOOR)),
        line_width=float(markers.get("line_width", 0.025)),
        heading_length=float(markers.get("heading_length", 0.18)),
        marker_gap=float(markers.get("gap", 0.02)),
        heading_tolerance=float(markers.get("heading_tolerance", 0.01)),
    )


def dump_layout(layout: ArenaLayout, extra: dict | None = None) -> str:
    """Serialize to YAML. ``extra`` lets callers attach e.g. colour ranges."""
    d = layout_to_dict(layout)
    if extra:
        d.update(extra)
    return yaml.safe_dump(d, sort_keys=False)


def load_layout(text: str) -> ArenaLayout:
    return layout_from_dict(yaml.safe_load(text))


def read_layout(path: str | Path) -> ArenaLayout:
    return load_layout(Path(path).read_text())


# --------------------------------------------------------------------------
# cameras and frames


class CameraOrientation(str, Enum):
    GROUND = "ground-facing"
    OBJECT = "object-facing"


@dataclass(frozen=True)
class CameraModel:
    orientation: CameraOrientation = CameraOrientation.GROUND
    horizontal_fov: float = math.radians(64.0)
    exposure_time: float = 1.0 / 25.0
    image_width: int = IMAGE_WIDTH
    image_height: int = IMAGE_HEIGHT

    def __post_init__(self):
        if (self.image_width, self.image_height) != (IMAGE_WIDTH, IMAGE_HEIGHT):
            raise ValueError("cameras are fixed at 640x360")
        if not 0.0 < self.horizontal_fov < math.pi:
            raise ValueError("horizontal_fov must be in (0, pi)")

    @property
    def focal_px(self) -> float:
        return (self.image_width / 2.0) / math.tan(self.horizontal_fov / 2.0)

    @property
    def principal_point(self) -> Point:
        return (self.image_width / 2.0, self.image_height / 2.0)


GROUND_CAMERA = CameraModel(CameraOrientation.GROUND, math.radians(64.0))
OBJECT_CAMERA = CameraModel(CameraOrientation.OBJECT, math.radians(60.0))


@dataclass(eq=False)
class Frame:
    pixels: np.ndarray  # (360, 640, 3) uint8 RGB
    stop_index: Optional[int] = None
    frame_index: Optional[int] = None
    timestamp: Optional[float] = None
    pose: Optional[DronePose] = None

    def same_pixels(self, other: "Frame") -> bool:
        return np.array_equal(self.pixels, other.pixels)


@lru_cache(maxsize=16)
def _background(color: tuple[int, int, int]) -> np.ndarray:
    img = np.empty((IMAGE_HEIGHT, IMAGE_WIDTH, 3), dtype=np.uint8)
    img[:] = np.array(color, dtype=np.uint8)
    img.flags.writeable = False
    return img


def _blank(color) -> np.ndarray:
    return _background(tuple(int(c) for c in color)).copy()


def project_ground(points: np.ndarray, pose: DronePose, cam: CameraModel) -> np.ndarray:
    """World floor points (N, 2) -> continuous pixel coordinates (N, 2)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    f = cam.focal_px
    cx, cy = cam.principal_point
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    dx = pts[:, 0] - pose.x
    dy = pts[:, 1] - pose.y
    bx = c * dx + s * dy  # body forward
    by = -s * dx + c * dy  # body left
    u = cx - f * by / pose.z
    v = cy - f * bx / pose.z
    return np.stack([u, v], axis=1)


def ground_to_body(du: float, dv: float, altitude: float, cam: CameraModel) -> Point:
    """Pixel offset from the principal point -> body-frame floor offset (m)."""
    f = cam.focal_px
    return (-dv * altitude / f, -du * altitude / f)


def _fixed(uv: np.ndarray) -> np.ndarray:
    # continuous pixel coords -> cv2 fixed point (cv2 puts pixel centres on integers)
    return np.round((uv - 0.5) * _SCALE).astype(np.int32)


def render_ground_view(layout: ArenaLayout, pose: DronePose, cam: CameraModel = GROUND_CAMERA) -> Frame:
    if cam.orientation != CameraOrientation.GROUND:
        raise ValueError("render_ground_view needs a ground-facing camera")
    if pose.z <= 0:
        raise ValueError("ground view needs altitude > 0")
    if not layout.contains((pose.x, pose.y)):
        raise OutsideArenaError(f"pose ({pose.x:.3f}, {pose.y:.3f}) is outside the arena")
    img = _blank(layout.floor_color)
    W, H = cam.image_width, cam.image_height
    circles, colors, corners = layout._marker_geometry
    scale = cam.focal_px / pose.z

    if len(colors):
        uv = project_ground(corners.reshape(-1, 2), pose, cam).reshape(-1, 4, 2)
        lo, hi = uv.min(axis=1), uv.max(axis=1)
        visible = (hi[:, 0] >= 0) & (lo[:, 0] <= W) & (hi[:, 1] >= 0) & (lo[:, 1] <= H)
        fixed = _fixed(uv)
        for k in np.flatnonzero(visible):
            cv2.fillConvexPoly(img, fixed[k], colors[k], lineType=cv2.LINE_8, shift=_SHIFT)

    centers = project_ground(circles[:, :2], pose, cam)
    for (uc, vc), r in zip(centers, circles[:, 2] * scale):
        c0, c1 = max(0, int(math.floor(uc - r))), min(W, int(math.ceil(uc + r)) + 1)
        r0, r1 = max(0, int(math.floor(vc - r))), min(H, int(math.ceil(vc + r)) + 1)
        if c0 >= c1 or r0 >= r1:
            continue
        du = np.arange(c0, c1) + 0.5 - uc
        dv = np.arange(r0, r1) + 0.5 - vc
        inside = dv[:, None] ** 2 + du[None, :] ** 2 <= r * r
        img[r0:r1, c0:c1][inside] = ORANGE
    return Frame(img, pose=pose)


# --------------------------------------------------------------------------
# procedural objects


class FrontFace(str, Enum):
    YES = "yes"
    NO = "no"
    NOT_IDENTIFIABLE = "not-identifiable"


SYMMETRY_CHOICES = (45, 90, 180, 360)


@dataclass(frozen=True)
class ObjectSpec:
    class_name: str
    instance_id: str
    description: str = ""
    has_front_face: FrontFace = FrontFace.YES
    symmetry_degrees: int = 360
    appearance_seed: int = 0
    footprint: tuple[float, float] = (0.2, 0.2)

    def __post_init__(self):
        object.__setattr__(self, "has_front_face", FrontFace(self.has_front_face))
        if self.symmetry_degrees not in SYMMETRY_CHOICES:
            raise ValueError(
                f"symmetry_degrees must be one of {SYMMETRY_CHOICES}, got {self.symmetry_degrees}"
            )
        if min(self.footprint) <= 0:
            raise ValueError("footprint must be positive")


@dataclass(frozen=True)
class _Tier:
    n_faces: int
    radius: float
    z0: float
    z1: float
    phase: float
    band_edges: tuple[float, ...]  # fractions in (0, 1) of tier height
    colors: np.ndarray = field(compare=False)  # (period, n_bands, 3)
    top_color: tuple[int, int, int] = (0, 0, 0)


@dataclass(frozen=True)
class ObjectGeometry:
    tiers: tuple[_Tier, ...]

    @property
    def height(self) -> float:
        return max(t.z1 for t in self.tiers)


def object_geometry(spec: ObjectSpec) -> ObjectGeometry:
    """Stack of 1-3 regular prisms whose colouring repeats every symmetry step.

    A tier with ``K = (360 / symmetry) * P`` faces coloured with ``P``
    distinct colours per period is invariant under rotations by exactly
    ``symmetry_degrees`` and no smaller step (for ``P >= 2``).
    """
    rng = np.random.default_rng([spec.appearance_seed, spec.symmetry_degrees])
    reps = 360 // spec.symmetry_degrees
    base_r = min(spec.footprint) / 2.0
    n_tiers = int(rng.integers(1, 4))
    height = float(rng.uniform(0.12, 0.33))
    cuts = np.sort(rng.uniform(0.3, 0.8, size=n_tiers - 1))
    edges = np.concatenate([[0.0], cuts, [1.0]]) * height
    tiers = []
    for k in range(n_tiers):
        if reps == 8:
            period = int(rng.integers(1, 3))
        elif reps == 4:
            period = int(rng.integers(1, 3))
        elif reps == 2:
            period = int(rng.integers(2, 4))
        else:
            period = int(rng.integers(3, 7))
        n_faces = reps * period
        radius = base_r * (1.0 if k == 0 else float(rng.uniform(0.45, 0.95)))
        n_bands = int(rng.integers(1, 4))
        bands = tuple(float(b) for b in np.sort(rng.uniform(0.15, 0.85, size=n_bands - 1)))
        colors = rng.integers(30, 226, size=(period, n_bands, 3))
        # keep the period minimal: make face colours pairwise distinct
        colors[:, 0, 0] = (np.arange(period) * 47 + colors[0, 0, 0]) % 196 + 30
        tiers.append(
            _Tier(
                n_faces=n_faces,
                radius=radius,
                z0=float(edges[k]),
                z1=float(edges[k + 1]),
                phase=float(rng.uniform(0.0, 2.0 * math.pi / n_faces)),
                band_edges=bands,
                colors=colors.astype(np.uint8),
                top_color=tuple(int(c) for c in rng.integers(30, 226, size=3)),
            )
        )
    return ObjectGeometry(tuple(tiers))


class _ObjectCamera:
    """Horizontal pinhole camera at a drone pose."""

    def __init__(self, pose: DronePose, cam: CameraModel):
        self.origin = np.array([pose.x, pose.y, pose.z])
        c, s = math.cos(pose.yaw), math.sin(pose.yaw)
        self.forward = np.array([c, s, 0.0])
        self.right = np.array([s, -c, 0.0])
        self.down = np.array([0.0, 0.0, -1.0])
        self.f = cam.focal_px
        self.cx, self.cy = cam.principal_point

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rel = pts - self.origin
        depth = rel @ self.forward
        u = self.cx + self.f * (rel @ self.right) / depth
        v = self.cy + self.f * (rel @ self.down) / depth
        return np.stack([u, v], axis=-1), depth


def object_vertices(
    geometry: ObjectGeometry, base: np.ndarray, yaw: float
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per tier, (bottom ring, top ring) world vertices, each (K, 3)."""
    out = []
    for t in geometry.tiers:
        ang = yaw + t.phase + 2.0 * math.pi * np.arange(t.n_faces) / t.n_faces
        ring = np.stack([np.cos(ang) * t.radius, np.sin(ang) * t.radius], axis=1) + base[:2]
        bottom = np.column_stack([ring, np.full(t.n_faces, base[2] + t.z0)])
        top = np.column_stack([ring, np.full(t.n_faces, base[2] + t.z1)])
        out.append((bottom, top))
    return out


NEAR_PLANE = 0.05


def _draw_object(img, mask, geometry, base, yaw, camera: _ObjectCamera):
    for t, (bottom, top) in zip(geometry.tiers, object_vertices(geometry, base, yaw)):
        K = t.n_faces
        period = t.colors.shape[0]
        cam_xy = camera.origin[:2]
        (ub, db), (ut, dtp) = camera.project(bottom), camera.project(top)
        if min(db.min(), dtp.min()) < NEAR_PLANE:
            raise ObjectPlacementError("object intersects or is behind the camera")
        fracs = (0.0,) + t.band_edges + (1.0,)
        for j in range(K):
            j2 = (j + 1) % K
            mid = (bottom[j, :2] + bottom[j2, :2]) / 2.0
            normal = mid - base[:2]
            normal /= np.linalg.norm(normal)
            view = cam_xy - mid
            cosang = float(normal @ view) / float(np.linalg.norm(view))
            if cosang <= 0.0:
                continue
            shade = 0.7 + 0.3 * cosang
            for b in range(len(fracs) - 1):
                lo, hi = fracs[b], fracs[b + 1]
                quad = np.array(
                    [
                        ub[j] + (ut[j] - ub[j]) * lo,
                        ub[j2] + (ut[j2] - ub[j2]) * lo,
                        ub[j2] + (ut[j2] - ub[j2]) * hi,
                        ub[j] + (ut[j] - ub[j]) * hi,
                    ]
                )
                color = tuple(int(round(c * shade)) for c in t.colors[j % period, b])
                pts = _fixed(quad)
                cv2.fillConvexPoly(img, pts, color, lineType=cv2.LINE_8, shift=_SHIFT)
                cv2.fillConvexPoly(mask, pts, 1, lineType=cv2.LINE_8, shift=_SHIFT)
        if camera.origin[2] > base[2] + t.z1:
            pts = _fixed(ut)
            cv2.fillConvexPoly(img, pts, t.top_color, lineType=cv2.LINE_8, shift=_SHIFT)
            cv2.fillConvexPoly(mask, pts, 1, lineType=cv2.LINE_8, shift=_SHIFT)


def reduced_yaw_degrees(yaw_degrees: float, symmetry_degrees: int) -> float:
    """Placement yaw folded into one symmetry period."""
    r = math.fmod(float(yaw_degrees), float(symmetry_degrees))
    return r + symmetry_degrees if r < 0 else r


def render_object_view(
    layout: ArenaLayout,
    obj: Optional[ObjectSpec],
    pose: DronePose,
    cam: CameraModel = OBJECT_CAMERA,
    *,
    placement_degrees: float = 0.0,
    offset: Point = (0.0, 0.0),
) -> tuple[Frame, np.ndarray]:
    """Render ``obj`` on the platform against the green screen.

    ``placement_degrees`` is the world direction (counter-clockwise from +x)
    the object's front face points to. Returns the frame and a uint8 0/1
    foreground mask. ``obj=None`` renders the empty platform.
    """
    if cam.orientation != CameraOrientation.OBJECT:
        raise ValueError("render_object_view needs an object-facing camera")
    img = _blank(layout.wall_color)
    mask = np.zeros((cam.image_height, cam.image_width), dtype=np.uint8)
    if obj is None:
        return Frame(img, pose=pose), mask
    reach = math.hypot(*offset) + math.hypot(*obj.footprint) / 2.0
    if reach > layout.platform_radius + 1e-12:
        raise ObjectPlacementError(f"{obj.instance_id} does not fit on the platform")
    geometry = object_geometry(obj)
    yaw = math.radians(reduced_yaw_degrees(placement_degrees, obj.symmetry_degrees))
    base = np.array(
        [
            layout.platform_center[0] + offset[0],
            layout.platform_center[1] + offset[1],
            layout.platform_height,
        ]
    )
    _draw_object(img, mask, geometry, base, yaw, _ObjectCamera(pose, cam))
    return Frame(img, pose=pose), mask


def stop_view_degrees(layout: ArenaLayout, index: int) -> float:
    """World azimuth (degrees) of a stop as seen from the platform centre."""
    s = layout.stops[index].center
    p = layout.platform_center
    return math.degrees(wrap_angle(math.atan2(s[1] - p[1], s[0] - p[0])))
