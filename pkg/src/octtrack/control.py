"""Closed tracking loop on a virtual clock.

Each tick renders a volume at the current FOV pose, registers it against the
template captured at t = 0 and converts the residual shift into galvo and
motor commands. Corrections are referenced to the actuator position at which
the volume was acquired, so a new correction replaces, rather than adds to,
motor moves that are still queued.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .actuation import (
    DeviceParams,
    GalvoState,
    MotorState,
    advance_galvo,
    advance_motor_to,
    command_galvo,
    command_motor,
    fov_pose,
)
from .core import ContractError, DegenerateInputError, OutOfSceneError, ParameterError, Volume, VolumeDims, VoxelPitch, voxel_to_metric
from .phantom import FovPose, NoiseStream, Scene, render_volume, trajectory_position
from .registration import FilterParams, MatchResult, TemplateMatcher

LOG_COLUMNS = ("t_s", "gt_x_mm", "gt_y_mm", "gt_z_mm", "est_x_mm", "est_y_mm", "est_z_mm",
               "confidence", "galvo_x_steps", "galvo_y_steps", "motor_steps")


@dataclass(frozen=True)
class ControllerConfig:
    """Loop gains and schedule.

    ``gain_xyz`` optionally overrides ``gain`` per axis. ``log_rate`` is the
    target logging rate; entries are written every ``round(volume_rate /
    log_rate)`` ticks. ``include_residual`` adds the measured residual shift
    to the logged estimate instead of logging the bare FOV center.
    """

    gain: float = 0.7
    gain_xyz: tuple | None = None
    motor_deadband: float = 0.075
    volume_rate: int = 831
    tracking_rate: int = 821
    viz_rate: int = 10
    log_rate: float = 83.0
    confidence_floor: float = 0.03
    lost_after: int = 83
    include_residual: bool = False
    filter: FilterParams = field(default_factory=FilterParams)

    def __post_init__(self):
        gains = self.gains
        if not all(0 < g <= 1 for g in gains):
            raise ParameterError("gain must lie in (0, 1]")
        if self.motor_deadband < 0:
            raise ParameterError("deadband must be >= 0")
        if self.tracking_rate + self.viz_rate != self.volume_rate:
            raise ParameterError("tracking_rate + viz_rate must equal volume_rate")
        if self.volume_rate < 1 or self.viz_rate < 0 or not self.log_rate > 0:
            raise ParameterError("rates must be positive")

    @property
    def gains(self) -> tuple:
        return tuple(self.gain_xyz) if self.gain_xyz is not None else (self.gain,) * 3

    @property
    def log_every(self) -> int:
        return max(1, int(round(self.volume_rate / self.log_rate)))

    def viz_slots(self) -> frozenset:
        """Tick indices within each second that feed visualization only."""
        r, v = self.volume_rate, self.viz_rate
        return frozenset(int(math.floor((k + 0.5) * r / v)) for k in range(v))


def compute_correction(shift, pitch: VoxelPitch, cfg: ControllerConfig = ControllerConfig(),
                       device: DeviceParams = DeviceParams()):
    """Voxel shift -> (galvo_x_steps, galvo_y_steps, motor_steps).

    ``command = round(gain * error / step)`` per axis; the motor command is
    zero while ``|gain * error_z|`` is below the deadband.
    """
    e = voxel_to_metric(shift, pitch)
    gx, gy, gz = cfg.gains
    step_g = device.galvo.step_mm
    step_m = device.motor.step_mm * device.motor.path_scale
    cx = int(round(gx * e.x / step_g))
    cy = int(round(gy * e.y / step_g))
    cz = gz * e.z
    cm = 0 if abs(cz) < cfg.motor_deadband else int(round(cz / step_m))
    return cx, cy, cm


@dataclass(frozen=True)
class LogEntry:
    t: float
    gt: tuple
    est: tuple
    confidence: float
    galvo_x: int
    galvo_y: int
    motor: int


@dataclass(frozen=True)
class TrackerState:
    template: Volume
    matcher: TemplateMatcher
    galvo_x: GalvoState
    galvo_y: GalvoState
    motor: MotorState
    last: MatchResult | None = None
    lost: bool = False
    low_count: int = 0

    @classmethod
    def start(cls, template: Volume, galvo_x, galvo_y, motor, fp: FilterParams = FilterParams()):
        return cls(template, TemplateMatcher(template, fp), galvo_x, galvo_y, motor)

    def advance(self, t: float) -> "TrackerState":
        return replace(self, galvo_x=advance_galvo(self.galvo_x, t), galvo_y=advance_galvo(self.galvo_y, t),
                       motor=advance_motor_to(self.motor, t))

    def pose(self, device: DeviceParams) -> FovPose:
        return fov_pose(self.galvo_x, self.galvo_y, self.motor, device.distortion)


def tracking_step(state: TrackerState, live: Volume, cfg: ControllerConfig = ControllerConfig(),
                  device: DeviceParams = DeviceParams(), gt=None):
    """Register ``live`` and issue corrections.

    ``state`` must already be advanced to the acquisition time
    ``live.timestamp``. Returns ``(state', commands, entry)``; ``commands`` is
    the ``(galvo_x, galvo_y, motor)`` correction in steps, and ``entry`` logs
    the FOV center at acquisition as the estimated target position.
    """
    if live.dims != state.template.dims:
        raise ContractError("live volume dims differ from template")
    now = live.timestamp
    pose = state.pose(device)
    est = np.asarray(pose.center, dtype=float)
    try:
        m = state.matcher.match(live)
    except DegenerateInputError:
        entry = LogEntry(now, tuple(gt) if gt is not None else tuple(est), tuple(est), 0.0,
                         state.galvo_x.position, state.galvo_y.position, state.motor.position)
        return replace(state, lost=True, last=None), (0, 0, 0), entry

    cx, cy, cm = compute_correction(m.shift, live.pitch, cfg, device)
    gx, gy, mo = state.galvo_x, state.galvo_y, state.motor
    if cx:
        gx = command_galvo(gx, gx.position + cx - gx.commanded, now)
    if cy:
        gy = command_galvo(gy, gy.position + cy - gy.commanded, now)
    if cm:
        delta = mo.position + cm - mo.commanded
        if delta:
            mo = command_motor(mo, delta, now)
    low = state.low_count + 1 if m.confidence < cfg.confidence_floor else 0
    if cfg.include_residual:
        est = est + np.asarray(voxel_to_metric(m.shift, live.pitch))
    entry = LogEntry(now, tuple(gt) if gt is not None else tuple(est), tuple(est), m.confidence,
                     state.galvo_x.position, state.galvo_y.position, state.motor.position)
    new = replace(state, galvo_x=gx, galvo_y=gy, motor=mo, last=m, low_count=low,
                  lost=state.lost or low >= cfg.lost_after)
    return new, (cx, cy, cm), entry


# --------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class SimWorld:
    """Everything the loop needs besides the controller.

    ``region`` is the sample-frame point under the FOV center at t = 0.
    ``start_mm`` is the requested initial FOV center (world mm); actuators are
    set to the nearest steps. With ``fast_path=False`` volumes are produced
    by synthesizing raw fringes and running the reconstruction pipeline.
    """

    scene: Scene
    trajectory: object
    device: DeviceParams = field(default_factory=DeviceParams)
    dims: VolumeDims = field(default_factory=VolumeDims)
    pitch: VoxelPitch = field(default_factory=VoxelPitch)
    noise_sigma: float = 0.05
    region: tuple = (0.0, 0.0, 0.6)
    start_mm: tuple = (0.0, 0.0, 200.0)
    seed: int = 0
    fast_path: bool = True
    fringe_noise: float = 0.5


@dataclass
class TrackingLog:
    t: np.ndarray
    gt: np.ndarray
    est: np.ndarray
    confidence: np.ndarray
    galvo_x: np.ndarray
    galvo_y: np.ndarray
    motor: np.ndarray
    stats: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @classmethod
    def from_entries(cls, entries, stats=None) -> "TrackingLog":
        if not entries:
            z = np.zeros((0, 3))
            return cls(np.zeros(0), z, z.copy(), np.zeros(0), *(np.zeros(0, int),) * 3, stats=stats or {})
        return cls(
            np.array([e.t for e in entries]),
            np.array([e.gt for e in entries], dtype=float),
            np.array([e.est for e in entries], dtype=float),
            np.array([e.confidence for e in entries]),
            np.array([e.galvo_x for e in entries]),
            np.array([e.galvo_y for e in entries]),
            np.array([e.motor for e in entries]),
            stats=stats or {},
        )

    def take(self, idx) -> "TrackingLog":
        return TrackingLog(self.t[idx], self.gt[idx], self.est[idx], self.confidence[idx],
                           self.galvo_x[idx], self.galvo_y[idx], self.motor[idx], dict(self.stats))

    def rows(self):
        for i in range(len(self.t)):
            yield (float(self.t[i]), *map(float, self.gt[i]), *map(float, self.est[i]),
                   float(self.confidence[i]), int(self.galvo_x[i]), int(self.galvo_y[i]), int(self.motor[i]))


def write_log_csv(path, log: TrackingLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in log.rows():
            w.writerow([repr(v) for v in row])


def read_log_csv(path) -> TrackingLog:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if tuple(header) != LOG_COLUMNS:
            raise ContractError(f"unexpected log header {header}")
        rows = [row for row in r]
    entries = [LogEntry(float(x[0]), tuple(map(float, x[1:4])), tuple(map(float, x[4:7])), float(x[7]),
                        int(x[8]), int(x[9]), int(x[10])) for x in rows]
    return TrackingLog.from_entries(entries)


def _initial_actuators(world: SimWorld):
    dev = world.device
    x, y, z = world.start_mm
    gx = GalvoState(params=dev.galvo)
    gy = GalvoState(params=dev.galvo)
    sx, sy = int(round(x / dev.galvo.step_mm)), int(round(y / dev.galvo.step_mm))
    gx = replace(gx, position=sx, commanded=sx)
    gy = replace(gy, position=sy, commanded=sy)
    dz = dev.distortion.offset(sx * dev.galvo.step_mm, sy * dev.galvo.step_mm)[2]
    m = int(round((z - dz) / (dev.motor.step_mm * dev.motor.path_scale)))
    if not 0 <= m <= dev.motor.max_steps:
        raise ParameterError("start position outside motor range")
    return gx, gy, MotorState.at(m, dev.motor)


class _Renderer:
    def __init__(self, world: SimWorld):
        self.world = world
        self.noise = NoiseStream(world.seed, world.noise_sigma)
        if not world.fast_path:
            from .recon import ReconConfig, SweepModel, build_resampling_table

            self.sweep = SweepModel()
            self.recon = ReconConfig()
            self.table = build_resampling_table(self.sweep)
            self.fringe_rng = np.random.default_rng([world.seed, 7])

    def __call__(self, sample_offset, pose: FovPose, t: float, template: bool) -> Volume:
        w = self.world
        if w.fast_path:
            return render_volume(w.scene, sample_offset, pose, w.dims, w.pitch, self.noise, t, fresh_noise=template)
        from .recon import reconstruct_volume, synthesize_volume_fringes

        raw = synthesize_volume_fringes(w.scene, sample_offset, pose, w.dims, w.pitch, self.sweep,
                                        w.fringe_noise, self.fringe_rng)
        return reconstruct_volume(raw, self.sweep, self.recon, w.pitch, t)


def run_loop(world: SimWorld, cfg: ControllerConfig = ControllerConfig(), duration: float | None = None) -> TrackingLog:
    """Simulate closed-loop tracking for ``duration`` seconds.

    Tick ``n`` happens at ``t = n / volume_rate``. Tick 0 captures the
    template; visualization ticks render a volume but issue no correction.
    Ground truth is the world position of the tracked sample point; the
    estimate is the FOV center at acquisition. If the FOV leaves the sample
    no further corrections are made and the run is marked ``lost_sample``.

    The result depends only on the world, the config and the seeds.
    """
    traj = world.trajectory
    duration = traj.duration if duration is None else duration
    if not duration > 0:
        raise ContractError("duration must be positive")
    if duration > traj.duration + 1e-12:
        raise ContractError("duration exceeds the trajectory")
    rate = cfg.volume_rate
    n_ticks = int(math.floor(duration * rate + 1e-9)) + 1
    viz = cfg.viz_slots()
    log_every = cfg.log_every
    render = _Renderer(world)
    traj_rng = np.random.default_rng([world.seed, 1])

    gx, gy, motor = _initial_actuators(world)
    origin = np.asarray(trajectory_position(traj, 0.0), dtype=float)
    c0 = np.asarray(fov_pose(gx, gy, motor, world.device.distortion).center)
    region = np.asarray(world.region, dtype=float)

    state = None
    entries = []
    counts = {"tracking_updates": 0, "viz_ticks": 0, "motor_commands": 0, "galvo_commands": 0,
              "out_of_scene_ticks": 0, "degenerate_ticks": 0}
    lost_sample = False
    lost_flag_time = None
    for n in range(n_ticks):
        t = n / rate
        if state is not None:
            state = state.advance(t)
        gt = c0 + (trajectory_position(traj, min(t, traj.duration), traj_rng) - origin)
        if state is None:
            pose = fov_pose(gx, gy, motor, world.device.distortion)
        else:
            pose = state.pose(world.device)
        try:
            vol = render(gt - region, pose, t, template=state is None)
        except OutOfSceneError:
            if state is None:
                raise
            vol = None
            lost_sample = True
            counts["out_of_scene_ticks"] += 1

        if state is None:
            state = TrackerState.start(vol, gx, gy, motor, cfg.filter)
            entry = LogEntry(t, tuple(gt), tuple(pose.center), 1.0, gx.position, gy.position, motor.position)
        elif vol is None or (n % rate) in viz:
            if vol is not None:
                counts["viz_ticks"] += 1
            entry = LogEntry(t, tuple(gt), tuple(pose.center),
                             state.last.confidence if state.last else 0.0,
                             state.galvo_x.position, state.galvo_y.position, state.motor.position)
        else:
            before_m = state.motor.commanded
            before_g = (state.galvo_x.commanded, state.galvo_y.commanded)
            state, _, entry = tracking_step(state, vol, cfg, world.device, gt)
            counts["tracking_updates"] += 1
            if state.last is None:
                counts["degenerate_ticks"] += 1
            counts["motor_commands"] += state.motor.commanded != before_m
            counts["galvo_commands"] += (state.galvo_x.commanded, state.galvo_y.commanded) != before_g
            if state.lost and lost_flag_time is None:
                lost_flag_time = t
        if n % log_every == 0:
            entries.append(entry)

    stats = dict(counts, ticks=n_ticks, lost_sample=lost_sample, lost_flag_time=lost_flag_time,
                 duration=duration, volume_rate=rate)
    return TrackingLog.from_entries(entries, stats)
