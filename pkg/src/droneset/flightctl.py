"""PID loops, the capture-mission state machine and the closed-loop runner."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Iterator, Mapping, Optional

import numpy as np

from . import perception
from .arena import (
    GROUND_CAMERA,
    OBJECT_CAMERA,
    ArenaLayout,
    CameraModel,
    Frame,
    ObjectSpec,
    ground_to_body,
    render_ground_view,
    render_object_view,
    stop_view_degrees,
)
from .capture import (
    CaptureRecord,
    DegradationParams,
    blur_length,
    compute_bbox,
    degrade,
    image_plane_velocity,
)
from .perception import DEFAULT_RANGES, ColorRange, DetectorParams, GroundObservation
from .vehicle import (
    HOVER,
    Command,
    DronePose,
    DroneState,
    ShakeModel,
    VehicleParams,
    initial_state,
    step_dynamics,
    wrap_angle,
    wrap_pi,
)

# --------------------------------------------------------------------------
# PID


@dataclass(frozen=True)
class PidGains:
    kp: float
    ki: float = 0.0
    kd: float = 0.0
    integral_limit: float = 1.0
    output_limit: float = 1.0

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise ValueError("PID gains must be >= 0")
        if self.integral_limit <= 0 or self.output_limit <= 0:
            raise ValueError("PID limits must be > 0")


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    previous_error: Optional[float] = None


PID_RESET = PidState()


def _clamp(v: float, lim: float) -> float:
    return max(-lim, min(lim, v))


def pid_step(state: PidState, gains: PidGains, error: float, dt: float) -> tuple[PidState, float]:
    """One PID update with a clamped integrator and backward-difference D term.

    The derivative is zero on the first call after a reset.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    integral = _clamp(state.integral + error * dt, gains.integral_limit)
    deriv = 0.0 if state.previous_error is None else (error - state.previous_error) / dt
    out = gains.kp * error + gains.ki * integral + gains.kd * deriv
    return PidState(integral, error), _clamp(out, gains.output_limit)


@dataclass(frozen=True)
class FlightGains:
    """One independent loop per controlled axis."""

    altitude: PidGains = PidGains(1.5, 0.1, 0.0, integral_limit=0.5, output_limit=0.5)
    image_x: PidGains = PidGains(1.0, 0.05, 0.0, integral_limit=0.5, output_limit=0.5)
    image_y: PidGains = PidGains(1.0, 0.05, 0.0, integral_limit=0.5, output_limit=0.5)
    yaw: PidGains = PidGains(1.5, 0.0, 0.0, integral_limit=0.5, output_limit=0.8)
    path: PidGains = PidGains(1.0, 0.0, 0.0, integral_limit=0.5, output_limit=0.3)


LOOPS = ("altitude", "image_x", "image_y", "yaw", "path")

# --------------------------------------------------------------------------
# state machine


class Phase(str, Enum):
    CALIBRATE = "Calibrate"
    TAKEOFF = "Takeoff"
    APPROACH_STOP = "ApproachStop"
    ALIGN_HEADING = "AlignHeading"
    HOVER_CAPTURE = "HoverCapture"
    FOLLOW_LINE = "FollowLine"
    LAND = "Land"
    DONE = "Done"


INDEXED = {Phase.APPROACH_STOP, Phase.ALIGN_HEADING, Phase.HOVER_CAPTURE, Phase.FOLLOW_LINE}


@dataclass(frozen=True)
class MissionConfig:
    target_altitude: float = 1.0
    altitude_band: float = 0.05
    centering_tolerance: float = 12.0  # px
    heading_tolerance: float = 0.05  # rad
    frames_per_stop: int = 30
    capture_rate: float = 5.0  # Hz
    settle_time: float = 0.3  # s aligned before capturing
    timeout_per_state: float = 30.0
    calibration_time: float = 1.0
    cruise_speed: float = 0.4
    search_speed: float = 0.1
    land_speed: float = 0.5
    depart_margin: float = 0.1  # m
    min_view_altitude: float = 0.1
    dt: float = 0.05
    ground_camera: CameraModel = GROUND_CAMERA
    object_camera: CameraModel = OBJECT_CAMERA

    def __post_init__(self):
        for name in (
            "target_altitude",
            "centering_tolerance",
            "heading_tolerance",
            "capture_rate",
            "settle_time",
            "timeout_per_state",
            "dt",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.frames_per_stop < 1:
            raise ValueError("frames_per_stop must be >= 1")

    @property
    def capture_duration(self) -> float:
        """Span from the first to the last capture at one stop."""
        return (self.frames_per_stop - 1) / self.capture_rate


@dataclass(frozen=True)
class FlightState:
    """Mission phase plus the controller memory needed to step it.

    Only ``phase`` and ``stop`` define the mission-graph position; the
    rest is bookkeeping (timers, loop integrators, path heading).
    """

    phase: Phase = Phase.CALIBRATE
    stop: int = 0
    n_stops: int = 1
    entered_at: float = 0.0
    captures: int = 0
    first_capture_at: Optional[float] = None
    aligned_since: Optional[float] = None
    departed: bool = False
    travel_dir: Optional[float] = None  # world heading of the current path leg
    pids: tuple[PidState, ...] = (PID_RESET,) * len(LOOPS)

    def __post_init__(self):
        if self.phase in INDEXED and not 0 <= self.stop < self.n_stops:
            raise ValueError(f"stop index {self.stop} out of range")

    @property
    def label(self) -> str:
        if self.phase in INDEXED:
            return f"{self.phase.value}({self.stop})"
        return self.phase.value

    def pid(self, name: str) -> PidState:
        return self.pids[LOOPS.index(name)]


@dataclass(frozen=True)
class CaptureRequest:
    stop_index: int
    frame_index: int
    timestamp: float  # seconds since the stop's first capture


class NavigationTimeout(RuntimeError):
    def __init__(self, state: FlightState, clock: float):
        super().__init__(f"{state.label} timed out at t={clock:.2f}s")
        self.state = state
        self.clock = clock


# allowed successor labels, used by tests and the timeout diagnostics
def mission_graph(n_stops: int) -> dict[str, set[str]]:
    g: dict[str, set[str]] = {
        "Calibrate": {"Takeoff"},
        "Takeoff": {"ApproachStop(0)"},
        "Land": {"Done"},
    }
    for i in range(n_stops):
        g[f"ApproachStop({i})"] = {f"AlignHeading({i})"}
        g[f"AlignHeading({i})"] = {f"HoverCapture({i})"}
        nxt = f"FollowLine({i})" if i + 1 < n_stops else "Land"
        g[f"HoverCapture({i})"] = {nxt}
        if i + 1 < n_stops:
            g[f"FollowLine({i})"] = {f"ApproachStop({i + 1})"}
    return g


class _Memory:
    """Mutable scratch copy of the PID states during one fsm step."""

    def __init__(self, state: FlightState, gains: FlightGains, dt: float):
        self.pids = list(state.pids)
        self.gains = gains
        self.dt = dt

    def run(self, name: str, error: float) -> float:
        i = LOOPS.index(name)
        self.pids[i], out = pid_step(self.pids[i], getattr(self.gains, name), error, self.dt)
        return out

    def frozen(self) -> tuple[PidState, ...]:
        return tuple(self.pids)


def _enter(state: FlightState, phase: Phase, clock: float, stop: Optional[int] = None, **kw) -> FlightState:
    return replace(
        state,
        phase=phase,
        stop=state.stop if stop is None else stop,
        entered_at=clock,
        aligned_since=None,
        pids=(PID_RESET,) * len(LOOPS),
        **kw,
    )


def _world_to_body(wx: float, wy: float, yaw: float) -> tuple[float, float]:
    c, s = math.cos(yaw), math.sin(yaw)
    return c * wx + s * wy, -s * wx + c * wy


def _circle_body(obs: GroundObservation, z: float, cfg: MissionConfig) -> Optional[tuple[float, float]]:
    if obs.circle_centroid is None:
        return None
    cx, cy = cfg.ground_camera.principal_point
    return ground_to_body(obs.circle_centroid[0] - cx, obs.circle_centroid[1] - cy, z, cfg.ground_camera)


def _circle_px_error(obs: GroundObservation, cfg: MissionConfig) -> float:
    cx, cy = cfg.ground_camera.principal_point
    return math.hypot(obs.circle_centroid[0] - cx, obs.circle_centroid[1] - cy)


def _pink_heading_error(obs: GroundObservation) -> Optional[float]:
    """Yaw change that puts the pink mark straight ahead (screen up)."""
    if obs.pink_direction is None or obs.circle_centroid is None or obs.pink_centroid is None:
        return None
    du = obs.pink_centroid[0] - obs.circle_centroid[0]
    dv = obs.pink_centroid[1] - obs.circle_centroid[1]
    bearing = perception.image_angle(du, dv)
    axis = obs.pink_direction
    # orient the axis toward the pink mark, away from the circle
    if math.cos(axis - bearing) < 0:
        axis += math.pi
    return wrap_pi(axis - math.pi / 2.0)


def _screen_to_world_angle(a: float, yaw: float) -> float:
    return wrap_angle(a + yaw - math.pi / 2.0)


def _blob_world(blob: perception.Blob, z: float, yaw: float, cfg: MissionConfig):
    cx, cy = cfg.ground_camera.principal_point
    bx, by = ground_to_body(blob.centroid[0] - cx, blob.centroid[1] - cy, z, cfg.ground_camera)
    c, s = math.cos(yaw), math.sin(yaw)
    return (c * bx - s * by, s * bx + c * by), _screen_to_world_angle(blob.direction, yaw)


def _pick_path(obs: GroundObservation, state: FlightState, z: float, yaw: float, cfg: MissionConfig):
    """Choose the blue segment to follow; returns (offset_world, direction) or None."""
    if not obs.blue_segments:
        return None
    cands = [_blob_world(b, z, yaw, cfg) for b in obs.blue_segments]
    if state.travel_dir is None:
        # first leg: only the outgoing segment touches the start stop
        (off, axis) = cands[0]
        bearing = math.atan2(off[1], off[0])
        if math.cos(axis - bearing) < 0:
            axis += math.pi
        return off, wrap_angle(axis)
    if not state.departed and state.captures:
        # at a stop: take the segment that leaves farthest from where we came in
        back = state.travel_dir + math.pi
        best = max(cands, key=lambda c: -math.cos(math.atan2(c[0][1], c[0][0]) - back))
        off, axis = best
        bearing = math.atan2(off[1], off[0])
        if math.cos(axis - bearing) < 0:
            axis += math.pi
        return off, wrap_angle(axis)
    # en route: the segment best aligned with the current leg, nearest first
    def score(c):
        off, axis = c
        along = abs(math.cos(axis - state.travel_dir))
        dist = abs(-math.sin(axis) * off[0] + math.cos(axis) * off[1])
        return (round(along, 1), -dist)

    off, axis = max(cands, key=score)
    if math.cos(axis - state.travel_dir) < 0:
        axis += math.pi
    return off, wrap_angle(axis)


def fsm_step(
    state: FlightState,
    obs: GroundObservation,
    drone: DroneState,
    cfg: MissionConfig,
    clock: float,
    gains: FlightGains = FlightGains(),
) -> tuple[FlightState, Command, Optional[CaptureRequest]]:
    """Advance the mission state machine by one control tick.

    Raises :class:`NavigationTimeout` when a state outlives
    ``cfg.timeout_per_state``.
    """
    if state.phase == Phase.DONE:
        raise ValueError("mission already done")
    if clock - state.entered_at > cfg.timeout_per_state:
        raise NavigationTimeout(state, clock)

    mem = _Memory(state, gains, cfg.dt)
    z = drone.pose.z
    yaw = drone.pose.yaw
    eps = 1e-9

    def alt_cmd() -> float:
        return mem.run("altitude", cfg.target_altitude - z)

    def center_cmd(body) -> tuple[float, float]:
        return mem.run("image_y", body[0]), mem.run("image_x", body[1])

    def along(world_dir: float, speed: float) -> tuple[float, float]:
        return _world_to_body(speed * math.cos(world_dir), speed * math.sin(world_dir), yaw)

    phase = state.phase
    if phase == Phase.CALIBRATE:
        if clock - state.entered_at + eps >= cfg.calibration_time:
            return _enter(state, Phase.TAKEOFF, clock), HOVER, None
        return state, HOVER, None

    if phase == Phase.TAKEOFF:
        vz = alt_cmd()
        vx = vy = 0.0
        body = _circle_body(obs, z, cfg)
        if body is not None:
            vx, vy = center_cmd(body)
        if abs(cfg.target_altitude - z) <= cfg.altitude_band:
            return _enter(state, Phase.APPROACH_STOP, clock, stop=0), Command(vx, vy, vz), None
        return replace(state, pids=mem.frozen()), Command(vx, vy, vz), None

    if phase == Phase.APPROACH_STOP:
        vz = alt_cmd()
        body = _circle_body(obs, z, cfg)
        if body is None:
            if state.travel_dir is None:
                return replace(state, pids=mem.frozen()), Command(0.0, 0.0, vz), None
            vx, vy = along(state.travel_dir, cfg.search_speed)
            return replace(state, pids=mem.frozen()), Command(vx, vy, vz), None
        vx, vy = center_cmd(body)
        cmd = Command(vx, vy, vz)
        if (
            _circle_px_error(obs, cfg) <= cfg.centering_tolerance
            and abs(cfg.target_altitude - z) <= cfg.altitude_band
        ):
            return _enter(state, Phase.ALIGN_HEADING, clock), cmd, None
        return replace(state, pids=mem.frozen()), cmd, None

    if phase == Phase.ALIGN_HEADING:
        vz = alt_cmd()
        body = _circle_body(obs, z, cfg)
        vx = vy = 0.0
        if body is not None:
            vx, vy = center_cmd(body)
        err = _pink_heading_error(obs)
        yaw_rate = mem.run("yaw", err) if err is not None else 0.0
        cmd = Command(vx, vy, vz, yaw_rate)
        ok = (
            err is not None
            and abs(err) < cfg.heading_tolerance
            and _circle_px_error(obs, cfg) <= cfg.centering_tolerance
            and abs(cfg.target_altitude - z) <= cfg.altitude_band
        )
        if not ok:
            return replace(state, pids=mem.frozen(), aligned_since=None), cmd, None
        since = state.aligned_since if state.aligned_since is not None else clock
        if clock - since + eps >= cfg.settle_time:
            nxt = _enter(state, Phase.HOVER_CAPTURE, clock, captures=0, first_capture_at=clock)
            return nxt, HOVER, None
        return replace(state, pids=mem.frozen(), aligned_since=since), cmd, None

    if phase == Phase.HOVER_CAPTURE:
        t0 = state.first_capture_at if state.first_capture_at is not None else clock
        k = state.captures
        if clock - t0 + eps < k / cfg.capture_rate:
            return state, HOVER, None
        req = CaptureRequest(state.stop, k, k / cfg.capture_rate)
        k += 1
        if k < cfg.frames_per_stop:
            return replace(state, captures=k, first_capture_at=t0), HOVER, req
        if state.stop + 1 < state.n_stops:
            nxt = _enter(state, Phase.FOLLOW_LINE, clock, captures=k, departed=False)
        else:
            nxt = _enter(state, Phase.LAND, clock, captures=k)
        return nxt, HOVER, req

    if phase == Phase.FOLLOW_LINE:
        vz = alt_cmd()
        path = _pick_path(obs, state, z, yaw, cfg)
        travel = state.travel_dir
        if path is None:
            if travel is None:
                return replace(state, pids=mem.frozen()), Command(0.0, 0.0, vz), None
            vx, vy = along(travel, cfg.search_speed)
        else:
            off, travel = path
            # signed distance from the drone to the line, positive to the left of travel
            cross = -math.sin(travel) * off[0] + math.cos(travel) * off[1]
            corr = mem.run("path", cross)
            wx = cfg.cruise_speed * math.cos(travel) - corr * math.sin(travel)
            wy = cfg.cruise_speed * math.sin(travel) + corr * math.cos(travel)
            vx, vy = _world_to_body(wx, wy, yaw)
        departed = state.departed
        body = _circle_body(obs, z, cfg)
        ahead = None
        if body is not None:
            c, s = math.cos(yaw), math.sin(yaw)
            wx, wy = c * body[0] - s * body[1], s * body[0] + c * body[1]
            ahead = wx * math.cos(travel) + wy * math.sin(travel)
        if not departed and (ahead is None or ahead < -cfg.depart_margin):
            departed = True
        cmd = Command(vx, vy, vz)
        if departed and ahead is not None and ahead > 0.0:
            nxt = _enter(state, Phase.APPROACH_STOP, clock, stop=state.stop + 1,
                         travel_dir=travel, departed=False, captures=0)
            return nxt, cmd, None
        return replace(state, pids=mem.frozen(), travel_dir=travel, departed=departed), cmd, None

    if phase == Phase.LAND:
        if drone.nominal.z <= 0.0:
            return _enter(state, Phase.DONE, clock), HOVER, None
        return state, Command(0.0, 0.0, -cfg.land_speed), None

    raise AssertionError(f"unhandled phase {phase}")


# --------------------------------------------------------------------------
# mission runner


@dataclass(frozen=True)
class TickRecord:
    clock: float
    state: str
    pose: tuple[float, float, float, float]
    command: tuple

    def to_json(self) -> str:
        return json.dumps(
            {"clock": self.clock, "state": self.state, "pose": list(self.pose),
             "command": list(self.command)},
            separators=(",", ":"),
        )


@dataclass(eq=False)
class MissionLog:
    ticks: list[TickRecord] = field(default_factory=list)
    captures: list[CaptureRecord] = field(default_factory=list)
    placement_degrees: float = 0.0
    aborted: bool = False
    abort_reason: Optional[str] = None

    @property
    def duration(self) -> float:
        return self.ticks[-1].clock if self.ticks else 0.0

    @property
    def state_trace(self) -> list[str]:
        out: list[str] = []
        for t in self.ticks:
            if not out or out[-1] != t.state:
                out.append(t.state)
        return out

    def iter_jsonl(self) -> Iterator[str]:
        for t in self.ticks:
            yield t.to_json()

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.iter_jsonl():
                fh.write(line + "\n")

    def digest(self) -> str:
        """SHA-256 over the tick trace and every captured frame."""
        h = hashlib.sha256()
        for line in self.iter_jsonl():
            h.update(line.encode())
        for c in self.captures:
            h.update(repr((c.bbox, c.stop_index, c.frame_index, c.instantaneous_pose.as_tuple(),
                           c.nominal_view_degrees, c.velocity, c.blur_length)).encode())
            h.update(c.frame.pixels.tobytes())
        return h.hexdigest()


class MissionAborted(RuntimeError):
    def __init__(self, reason: str, log: MissionLog):
        super().__init__(reason)
        self.log = log


def start_pose(layout: ArenaLayout, rng: np.random.Generator) -> DronePose:
    """On the first stop, on the ground, roughly facing the platform."""
    s = layout.stops[0]
    dx, dy = rng.uniform(-0.03, 0.03, size=2)
    yaw = s.heading_direction + rng.uniform(-math.radians(15), math.radians(15))
    return DronePose(s.center[0] + dx, s.center[1] + dy, 0.0, yaw)


def view_degrees(layout: ArenaLayout, stop_index: int, placement_degrees: float) -> int:
    """Pose label of a stop relative to the object's front direction."""
    rel = (stop_view_degrees(layout, stop_index) - placement_degrees) % 360.0
    return int(round(rel / 45.0)) % 8 * 45


def run_mission(
    layout: ArenaLayout,
    obj: Optional[ObjectSpec],
    cfg: MissionConfig = MissionConfig(),
    gains: FlightGains = FlightGains(),
    shake: Optional[ShakeModel] = ShakeModel(),
    seed: int = 0,
    *,
    degradation: Optional[DegradationParams] = None,
    vehicle: VehicleParams = VehicleParams(),
    ranges: Mapping[str, ColorRange] = DEFAULT_RANGES,
    detector: DetectorParams = DetectorParams(),
    placement_degrees: Optional[float] = None,
    max_time: float = 900.0,
    observer=None,
) -> MissionLog:
    """Fly one full capture mission around ``obj``.

    Each tick renders the ground camera, detects markers, steps the state
    machine and integrates the vehicle. Capture requests render the object
    camera at the instantaneous (shaken) pose and degrade it with the
    image-plane velocity over the last tick.

    ``placement_degrees`` defaults to the first stop's azimuth plus a
    seeded multiple of 45 degrees, so stops land on the pose grid.
    ``observer`` is called with each new :class:`TickRecord`.
    """
    rng = np.random.default_rng([seed, 0xF17])
    if shake is not None:
        shake = replace(shake, seed=int(np.random.default_rng([seed, shake.seed]).integers(2**63)))
    if degradation is None:
        degradation = DegradationParams(seed=seed)
    if placement_degrees is None:
        placement_degrees = (stop_view_degrees(layout, 0) + 45.0 * int(rng.integers(8))) % 360.0
    drone = initial_state(start_pose(layout, rng), shake)
    state = FlightState(n_stops=len(layout.stops), entered_at=0.0)
    log = MissionLog(placement_degrees=placement_degrees)
    dt = cfg.dt
    tick = 0
    prev_pose = drone.pose
    while state.phase != Phase.DONE:
        clock = tick * dt
        if clock > max_time:
            log.aborted, log.abort_reason = True, "mission time limit exceeded"
            raise MissionAborted(log.abort_reason, log)
        pose = drone.pose
        if pose.z >= cfg.min_view_altitude:
            try:
                ground = render_ground_view(layout, pose, cfg.ground_camera)
            except ValueError as exc:
                log.aborted, log.abort_reason = True, f"{exc} at t={clock:.2f}s"
                raise MissionAborted(log.abort_reason, log) from exc
            obs = perception.detect_markers(ground, ranges, detector)
        else:
            obs = perception.EMPTY_OBSERVATION
        label = state.label
        try:
            state, cmd, req = fsm_step(state, obs, drone, cfg, clock, gains)
        except NavigationTimeout as exc:
            log.aborted = True
            log.abort_reason = f"{exc}; trace: {' -> '.join(log.state_trace[-6:])}"
            raise MissionAborted(log.abort_reason, log) from exc
        rec = TickRecord(clock, label, pose.as_tuple(), cmd.as_tuple())
        log.ticks.append(rec)
        if observer is not None:
            observer(rec)
        if req is not None:
            log.captures.append(_capture(layout, obj, drone, prev_pose, req, cfg, degradation,
                                         placement_degrees, clock))
        prev_pose = drone.pose
        drone = step_dynamics(drone, cmd, dt, vehicle, shake)
        tick += 1
    return log


def _capture(layout, obj, drone, prev_pose, req, cfg, degradation, placement, clock) -> CaptureRecord:
    pose = drone.pose
    velocity = tuple((a - b) / cfg.dt for a, b in zip(pose.as_tuple()[:3], prev_pose.as_tuple()[:3]))
    raw, mask = render_object_view(layout, obj, pose, cfg.object_camera, placement_degrees=placement)
    bbox = compute_bbox(mask)
    raw = Frame(raw.pixels, req.stop_index, req.frame_index, req.timestamp, pose)
    exposure = cfg.object_camera.exposure_time
    frame = degrade(raw, velocity, degradation, exposure)
    right, down = image_plane_velocity(velocity, pose.yaw)
    speed = math.hypot(right, down)
    return CaptureRecord(
        frame=frame,
        bbox=bbox,
        stop_index=req.stop_index,
        frame_index=req.frame_index,
        instantaneous_pose=pose,
        nominal_view_degrees=view_degrees(layout, req.stop_index, placement),
        velocity=velocity,
        image_plane_speed=speed,
        blur_length=blur_length(speed, degradation, exposure),
        timestamp=req.timestamp,
    )
