"""Quadcopter state, first-order kinematics and the hover shake process."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Normalize an angle to [0, 2*pi)."""
    a = math.fmod(a, TWO_PI)
    if a < 0.0:
        a += TWO_PI
    # fmod of a tiny negative can round up to exactly 2*pi
    return 0.0 if a >= TWO_PI else a


def wrap_pi(a: float) -> float:
    """Signed angle in [-pi, pi)."""
    return wrap_angle(a + math.pi) - math.pi


@dataclass(frozen=True)
class DronePose:
    x: float
    y: float
    z: float
    yaw: float = 0.0

    def __post_init__(self):
        if self.z < 0.0:
            raise ValueError(f"altitude must be >= 0, got {self.z}")
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.z, self.yaw)


@dataclass(frozen=True)
class ShakeModel:
    """Per-axis stationary std and mean-reversion time of hover jitter.

    Each of x, y, z and yaw follows an independent Ornstein-Uhlenbeck
    process. The defaults give a few millimetres of drift and a fraction of
    a degree of yaw wobble, enough for visible frame-to-frame variation.
    """

    sigma_pos: float = 0.01
    sigma_yaw: float = 0.01
    tau: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.sigma_pos < 0 or self.sigma_yaw < 0:
            raise ValueError("shake sigmas must be >= 0")
        if self.tau <= 0:
            raise ValueError("shake tau must be > 0")


@dataclass(frozen=True)
class ShakeState:
    step: int = 0
    offset: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)


def _unit_normals(seed: int, step: int) -> np.ndarray:
    # counter-based stream: the draw for a step never depends on call history
    gen = np.random.Generator(np.random.Philox(key=seed & (2**64 - 1), counter=step))
    return gen.standard_normal(4)


def _scales(model: ShakeModel) -> np.ndarray:
    return np.array([model.sigma_pos] * 3 + [model.sigma_yaw])


def initial_shake(model: ShakeModel) -> ShakeState:
    """Start the process in its stationary distribution."""
    offset = _scales(model) * _unit_normals(model.seed, 0)
    return ShakeState(step=0, offset=tuple(float(v) for v in offset))


def sample_shake(state: ShakeState, model: ShakeModel, dt: float) -> tuple[ShakeState, tuple]:
    """Advance the shake process by ``dt`` using the exact OU transition."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    a = math.exp(-dt / model.tau)
    b = math.sqrt(1.0 - a * a)
    step = state.step + 1
    noise = _unit_normals(model.seed, step)
    scales = _scales(model)
    offset = tuple(
        float(a * o + b * s * n) for o, s, n in zip(state.offset, scales, noise)
    )
    return ShakeState(step=step, offset=offset), offset


@dataclass(frozen=True)
class Command:
    """Body-frame velocity setpoint (x forward, y left, z up) and yaw rate.

    ``hover`` engages the onboard position hold: velocities are zeroed at
    once instead of being tracked.
    """

    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0
    yaw_rate: float = 0.0
    hover: bool = False

    def as_tuple(self) -> tuple:
        return (self.vx, self.vy, self.vz, self.yaw_rate, self.hover)


HOVER = Command(hover=True)


@dataclass(frozen=True)
class VehicleParams:
    tau_velocity: float = 0.25
    tau_yaw: float = 0.2
    max_speed_xy: float = 1.0
    max_speed_z: float = 0.8
    max_yaw_rate: float = 1.5


@dataclass(frozen=True)
class DroneState:
    """``pose`` is what cameras and sensors see; ``nominal`` excludes shake."""

    pose: DronePose
    linear_velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0
    shake_state: ShakeState = field(default_factory=ShakeState)
    nominal: DronePose | None = None

    def __post_init__(self):
        if self.nominal is None:
            object.__setattr__(self, "nominal", self.pose)


def initial_state(pose: DronePose, shake: ShakeModel | None = None) -> DroneState:
    shake_state = initial_shake(shake) if shake is not None else ShakeState()
    return DroneState(pose=pose, shake_state=shake_state, nominal=pose)


def _clamp(v: float, lim: float) -> float:
    return max(-lim, min(lim, v))


def clamp_command(cmd: Command, params: VehicleParams) -> Command:
    vx, vy = cmd.vx, cmd.vy
    speed = math.hypot(vx, vy)
    if speed > params.max_speed_xy:
        k = params.max_speed_xy / speed
        vx, vy = vx * k, vy * k
    return replace(
        cmd,
        vx=vx,
        vy=vy,
        vz=_clamp(cmd.vz, params.max_speed_z),
        yaw_rate=_clamp(cmd.yaw_rate, params.max_yaw_rate),
    )


def _track(current: float, target: float, dt: float, tau: float) -> float:
    if tau <= 0:
        return target
    return current + (1.0 - math.exp(-dt / tau)) * (target - current)


def step_dynamics(
    state: DroneState,
    cmd: Command,
    dt: float,
    params: VehicleParams = VehicleParams(),
    shake: ShakeModel | None = None,
) -> DroneState:
    """Advance the vehicle one tick.

    Velocity tracks the (clamped) setpoint with a first-order lag, the
    unperturbed pose integrates it, then the shake offset is re-applied on
    top. Shake is suppressed while the vehicle sits on the ground.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    cmd = clamp_command(cmd, params)
    nom = state.nominal
    if cmd.hover:
        vel = (0.0, 0.0, 0.0)
        yaw_rate = 0.0
    else:
        c, s = math.cos(nom.yaw), math.sin(nom.yaw)
        target = (c * cmd.vx - s * cmd.vy, s * cmd.vx + c * cmd.vy, cmd.vz)
        vel = tuple(
            _track(v, t, dt, params.tau_velocity) for v, t in zip(state.linear_velocity, target)
        )
        yaw_rate = _track(state.yaw_rate, cmd.yaw_rate, dt, params.tau_yaw)

    x = nom.x + vel[0] * dt
    y = nom.y + vel[1] * dt
    z = nom.z + vel[2] * dt
    if z <= 0.0:
        z = 0.0
        if vel[2] < 0.0:
            vel = (vel[0], vel[1], 0.0)
    nominal = DronePose(x, y, z, nom.yaw + yaw_rate * dt)

    shake_state = state.shake_state
    offset = (0.0, 0.0, 0.0, 0.0)
    if shake is not None:
        shake_state, offset = sample_shake(shake_state, shake, dt)
        if z <= 0.0:
            offset = (0.0, 0.0, 0.0, 0.0)
    pose = DronePose(
        x + offset[0],
        y + offset[1],
        max(0.0, z + offset[2]),
        nominal.yaw + offset[3],
    )
    return DroneState(
        pose=pose,
        linear_velocity=vel,
        yaw_rate=yaw_rate,
        shake_state=shake_state,
        nominal=nominal,
    )
