"""Galvo pair and motorized reference arm, mapped to an FOV pose.

Actuator states are immutable; ``command_*`` and ``advance_*`` return new
states. Time is absolute simulation time in seconds.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

from .phantom import FovPose


@dataclass(frozen=True)
class GalvoParams:
    step_mm: float = 0.0025
    latency: float = 1.2e-3
    max_range_mm: float = 25.4

    @property
    def max_steps(self) -> int:
        return min(int(math.floor(self.max_range_mm / self.step_mm + 1e-9)), 32767)


@dataclass(frozen=True)
class MotorParams:
    step_mm: float = 0.0125
    top_speed: float = 190.0  # mm/s
    latency: float = 3e-3
    reversal_delay: float = 5e-3
    range_mm: float = 420.0
    path_scale: float = 1.0  # FOV axial mm per motor mm

    @property
    def steps_per_s(self) -> float:
        return self.top_speed / self.step_mm

    @property
    def max_steps(self) -> int:
        return int(math.floor(self.range_mm / self.step_mm + 1e-9))


@dataclass(frozen=True)
class DistortionModel:
    """Slightly spherical scan path of the galvo stage.

    For a lateral FOV offset ``(x, y)`` in mm the center moves by
    ``(cx * x * y, cy * x * y, axial * (x**2 + y**2))``. The default curvature
    gives 1 mm of axial error 20 mm off-axis.
    """

    axial: float = 0.0025
    cx: float = 2e-4
    cy: float = 2e-4
    enabled: bool = True

    def offset(self, x: float, y: float):
        if not self.enabled:
            return (0.0, 0.0, 0.0)
        return (self.cx * x * y, self.cy * x * y, self.axial * (x * x + y * y))


@dataclass(frozen=True)
class DeviceParams:
    galvo: GalvoParams = field(default_factory=GalvoParams)
    motor: MotorParams = field(default_factory=MotorParams)
    distortion: DistortionModel = field(default_factory=DistortionModel)

    @classmethod
    def from_dict(cls, d: dict | None) -> "DeviceParams":
        d = d or {}
        return cls(GalvoParams(**d.get("galvo", {})), MotorParams(**d.get("motor", {})),
                   DistortionModel(**d.get("distortion", {})))

    def to_dict(self) -> dict:
        return asdict(self)


def describe_device(device: DeviceParams = DeviceParams()) -> dict:
    d = device.to_dict()
    d["galvo"]["max_steps"] = device.galvo.max_steps
    d["motor"]["max_steps"] = device.motor.max_steps
    d["motor"]["steps_per_s"] = device.motor.steps_per_s
    return d


# --------------------------------------------------------------------------
# galvo


@dataclass(frozen=True)
class GalvoState:
    """One galvo axis. ``pending`` holds ``(effective_time, delta_steps)``."""

    position: int = 0
    commanded: int = 0
    pending: tuple = ()
    saturated: bool = False
    params: GalvoParams = field(default_factory=GalvoParams)

    @property
    def mm(self) -> float:
        return self.position * self.params.step_mm


def command_galvo(state: GalvoState, delta_steps: int, now: float) -> GalvoState:
    """Queue a relative move that takes effect ``latency`` seconds after ``now``.

    Targets beyond the lens range are clamped and flagged as saturated.
    """
    delta_steps = int(delta_steps)
    lim = state.params.max_steps
    target = state.commanded + delta_steps
    clamped = max(-lim, min(lim, target))
    saturated = clamped != target
    real = clamped - state.commanded
    pending = state.pending + ((now + state.params.latency, real),) if real else state.pending
    return replace(state, commanded=clamped, pending=pending, saturated=saturated)


def advance_galvo(state: GalvoState, t: float) -> GalvoState:
    """Apply every pending command whose effective time is ``<= t``."""
    if not state.pending or state.pending[0][0] > t:
        return state
    pos = state.position
    rest = []
    for when, delta in state.pending:
        if when <= t:
            pos += delta
        else:
            rest.append((when, delta))
    return replace(state, position=pos, pending=tuple(rest))


# --------------------------------------------------------------------------
# motor


@dataclass(frozen=True)
class MotorState:
    """Stepper-driven reference arm.

    Each command shifts the motor's target by ``delta`` steps once its latency
    has elapsed. The motor slews toward the current target at top speed; when
    the required direction flips relative to the last motion it first waits
    ``reversal_delay``. ``position`` is always an integer step count; the
    fractional progress toward the next step is kept in ``carry``.
    """

    position: int = 0
    target: int = 0
    commanded: int = 0
    pending: tuple = ()
    last_dir: int = 0
    resume: float = 0.0
    carry: float = 0.0
    clock: float = 0.0
    saturated: bool = False
    params: MotorParams = field(default_factory=MotorParams)

    @classmethod
    def at(cls, position: int, params: MotorParams = MotorParams(), clock: float = 0.0) -> "MotorState":
        return cls(position=position, target=position, commanded=position, clock=clock, params=params)

    @property
    def mm(self) -> float:
        return self.position * self.params.step_mm

    @property
    def busy(self) -> bool:
        return bool(self.pending) or self.target != self.position


def command_motor(state: MotorState, delta_steps: int, now: float) -> MotorState:
    """Queue a relative move; the target is clamped to the mechanical range."""
    delta_steps = int(delta_steps)
    target = state.commanded + delta_steps
    clamped = max(0, min(state.params.max_steps, target))
    real = clamped - state.commanded
    pending = state.pending + ((now + state.params.latency, real),) if real else state.pending
    return replace(state, commanded=clamped, pending=pending, saturated=clamped != target)


def advance_motor(state: MotorState, dt: float) -> MotorState:
    """Advance the motor clock by ``dt`` seconds."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    p = state.params
    rate = p.steps_per_s
    t_end = state.clock + dt
    pos, target, carry = state.position, state.target, state.carry
    last_dir, resume, now = state.last_dir, state.resume, state.clock
    pending = list(state.pending)

    def slew(until):
        nonlocal pos, carry
        if target == pos:
            carry = 0.0
            return
        start = max(now, resume)
        if until <= start:
            return
        avail = (until - start) * rate + carry
        steps = int(math.floor(avail + 1e-9))
        need = abs(target - pos)
        if steps >= need:
            pos, carry = target, 0.0
        else:
            pos += steps if target > pos else -steps
            carry = avail - steps

    while pending and pending[0][0] <= t_end:
        when, delta = pending.pop(0)
        slew(when)
        now = max(now, when)
        target += delta
        direction = (target > pos) - (target < pos)
        if direction:
            if last_dir and direction != last_dir:
                resume = now + p.reversal_delay
                carry = 0.0
            last_dir = direction
    slew(t_end)
    return replace(state, position=pos, target=target, carry=carry, last_dir=last_dir, resume=resume,
                   pending=tuple(pending), clock=t_end)


def advance_motor_to(state: MotorState, t: float) -> MotorState:
    return advance_motor(state, t - state.clock) if t > state.clock else state


# --------------------------------------------------------------------------
# pose


def fov_pose(galvo_x: GalvoState, galvo_y: GalvoState, motor: MotorState,
             distortion: DistortionModel = DistortionModel()) -> FovPose:
    """World-frame FOV center (mm) for the current actuator positions."""
    x = galvo_x.position * galvo_x.params.step_mm
    y = galvo_y.position * galvo_y.params.step_mm
    z = motor.position * motor.params.step_mm * motor.params.path_scale
    dx, dy, dz = distortion.offset(x, y)
    return FovPose((x + dx, y + dy, z + dz))


def pose_from_steps(gx: int, gy: int, m: int, device: DeviceParams = DeviceParams()):
    """FOV center for raw step counts, without building actuator states."""
    x = gx * device.galvo.step_mm
    y = gy * device.galvo.step_mm
    z = m * device.motor.step_mm * device.motor.path_scale
    dx, dy, dz = device.distortion.offset(x, y)
    return (x + dx, y + dy, z + dz)
