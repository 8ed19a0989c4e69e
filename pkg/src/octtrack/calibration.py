"""Robot-to-tracker calibration: grid collection, affine fit, quadratic residual map.

Tracker coordinates are raw actuator steps ``(galvo_x, galvo_y, motor)``. The
affine stage maps them to millimetres; the quadratic stage then corrects
what is left (mostly the curved scan path of the galvos) as a function of the
affine-mapped position.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .actuation import DeviceParams
from .control import ControllerConfig, SimWorld, run_loop
from .core import DegenerateGeometryError, ParameterError, TrackingLostError
from .phantom import Scene, WaypointTrajectory

QUAD_TERMS = ("1", "x", "y", "z", "x^2", "y^2", "z^2", "xy", "xz", "yz")
COND_LIMIT = 1e10
RIDGE = 1e-8
SAMPLE_COLUMNS = ("point", "t_s", "robot_x_mm", "robot_y_mm", "robot_z_mm",
                  "galvo_x_steps", "galvo_y_steps", "motor_steps")


@dataclass(frozen=True)
class CalibrationSample:
    robot: tuple  # mm
    tracker: tuple  # (galvo_x, galvo_y, motor) steps
    timestamp: float
    point: int = -1

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (*self.robot, *self.tracker, self.timestamp)):
            raise ParameterError("calibration sample must be finite")


@dataclass(frozen=True)
class GridSpec:
    """Calibration grid and dwell schedule.

    The robot visits ``n**3`` points spanning ``size`` mm around ``center`` in
    snake order at ``speed`` mm/s. At each point it waits ``settle`` seconds,
    then ``samples`` entries are taken ``interval`` seconds apart. The
    tracking loop runs at ``loop_rate`` volumes/s, which is plenty for a
    robot moving a few mm/s.
    """

    n: int = 5
    size: float = 40.0
    center: tuple = (0.0, 0.0, 200.0)
    samples: int = 20
    interval: float = 0.1
    settle: float = 0.5
    speed: float = 4.0
    loop_rate: int = 10

    def points(self) -> np.ndarray:
        axis = np.linspace(-self.size / 2, self.size / 2, self.n)
        out = []
        for k, z in enumerate(axis):
            ys = axis if k % 2 == 0 else axis[::-1]
            for j, y in enumerate(ys):
                xs = axis if (k * self.n + j) % 2 == 0 else axis[::-1]
                out.extend((x, y, z) for x in xs)
        return np.asarray(out) + np.asarray(self.center, dtype=float)

    @property
    def dwell(self) -> float:
        return self.settle + self.samples * self.interval


def _check_grid(grid: GridSpec, device: DeviceParams) -> None:
    if grid.n < 2 or grid.samples < 1 or not grid.speed > 0 or not grid.interval > 0:
        raise ParameterError("invalid grid specification")
    half = grid.size / 2
    cx, cy, cz = grid.center
    lim = device.galvo.max_range_mm
    if max(abs(cx) + half, abs(cy) + half) > lim:
        raise ParameterError("grid exceeds galvo range")
    top = device.motor.range_mm * device.motor.path_scale
    if cz - half - 5 < 0 or cz + half + 5 > top:
        raise ParameterError("grid exceeds motor range")


def collect_grid(scene: Scene, grid: GridSpec = GridSpec(), device: DeviceParams = DeviceParams(),
                 seed: int = 0, noise_sigma: float = 0.05, robot_noise: float = 0.01):
    """Drive the robot over ``grid`` with tracking active and log paired positions.

    Returns ``(samples, log)``. The robot frame coincides with the world frame
    of the simulation.

    Raises:
        TrackingLostError: the tracker lost the sample at any point.
    """
    _check_grid(grid, device)
    pts = grid.points()
    traj = WaypointTrajectory(pts, grid.speed, grid.dwell, noise=robot_noise)
    world = SimWorld(scene, traj, device, start_mm=tuple(pts[0]), seed=seed, noise_sigma=noise_sigma)
    r = grid.loop_rate
    cfg = ControllerConfig(volume_rate=r, tracking_rate=r, viz_rate=0, log_rate=float(r),
                           lost_after=max(1, r))
    log = run_loop(world, cfg)
    st = log.stats
    if st["lost_sample"] or st["lost_flag_time"] is not None:
        bad = st["lost_flag_time"]
        if bad is None:
            bad = float(log.t[np.argmax(log.confidence <= 0)]) if np.any(log.confidence <= 0) else float("nan")
        i = int(np.searchsorted(traj.arrivals, bad, side="right")) - 1
        raise TrackingLostError(f"tracking lost at t={bad:.2f} s near grid point {i} {pts[max(i, 0)].round(2).tolist()}; "
                                f"out-of-scene ticks: {st['out_of_scene_ticks']}")
    samples = []
    step = 1.0 / r / cfg.log_every
    for i, a in enumerate(traj.arrivals):
        for j in range(grid.samples):
            t = a + grid.settle + j * grid.interval
            k = int(round(t * r / cfg.log_every))
            if k >= len(log.t) or abs(log.t[k] - t) > step / 2:
                raise ParameterError("sample time not on the loop clock")
            tracker = (int(log.galvo_x[k]), int(log.galvo_y[k]), int(log.motor[k]))
            samples.append(CalibrationSample(tuple(map(float, log.gt[k])), tracker, float(log.t[k]), i))
    return samples, log


def _arrays(samples):
    robot = np.array([s.robot for s in samples], dtype=float)
    tracker = np.array([s.tracker for s in samples], dtype=float)
    return robot, tracker


def quad_basis(u: np.ndarray) -> np.ndarray:
    """Design matrix over ``QUAD_TERMS`` for points ``u`` of shape (N, 3)."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    x, y, z = u.T
    return np.column_stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, x * z, y * z])


@dataclass(frozen=True)
class CalibrationModel:
    """Tracker steps -> robot mm.

    ``matrix``/``offset`` form the affine stage ``u = M @ t + b``. ``quad`` has
    shape (3, 10); row ``i`` holds the coefficients, in ``QUAD_TERMS`` order, of
    the correction added to output axis ``i`` as a function of ``u``.
    ``bounds`` is the (2, 3) box of affine-mapped fit points; inputs outside
    it are flagged as extrapolated.
    """

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    quad: np.ndarray = field(default_factory=lambda: np.zeros((3, 10)))
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-np.inf] * 3, [np.inf] * 3]))
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        if np.linalg.matrix_rank(m) < 3:
            raise DegenerateGeometryError("affine matrix is singular")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))
        object.__setattr__(self, "quad", np.asarray(self.quad, dtype=float).reshape(3, 10))
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=float).reshape(2, 3))

    def affine(self, tracker) -> np.ndarray:
        t = np.atleast_2d(np.asarray(tracker, dtype=float))
        return t @ self.matrix.T + self.offset


def fit_affine(samples):
    """Least-squares ``(M, b)`` minimizing ``|M t + b - robot|^2``.

    ``samples`` is a list of ``CalibrationSample`` or a ``(tracker, robot)``
    pair of (N, 3) arrays.
    """
    robot, tracker = _split(samples)
    X = np.column_stack([tracker, np.ones(len(tracker))])
    if len(X) < 4 or np.linalg.matrix_rank(X) < 4:
        raise DegenerateGeometryError("calibration points are coplanar or too few")
    sol, *_ = np.linalg.lstsq(X, robot, rcond=None)
    return sol[:3].T.copy(), sol[3].copy()


def _split(samples):
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        tracker, robot = samples
        return np.asarray(robot, dtype=float), np.asarray(tracker, dtype=float)
    return _arrays(samples)


def fit_quadratic(samples, matrix, offset) -> np.ndarray:
    """Per-axis quadratic fit of ``robot - affine(tracker)``; returns (3, 10).

    A design condition number above ``COND_LIMIT`` triggers a warning and a
    ridge term of ``RIDGE`` relative to the mean diagonal of the normal matrix.
    """
    robot, tracker = _split(samples)
    u = tracker @ np.asarray(matrix).T + offset
    X = quad_basis(u)
    resid = robot - u
    cond = np.linalg.cond(X)
    if not cond <= COND_LIMIT:
        warnings.warn(f"quadratic design ill-conditioned (cond={cond:.3g}); adding ridge", RuntimeWarning, stacklevel=2)
        G = X.T @ X
        lam = RIDGE * np.trace(G) / G.shape[0]
        coef = np.linalg.solve(G + lam * np.eye(G.shape[0]), X.T @ resid)
    else:
        coef, *_ = np.linalg.lstsq(X, resid, rcond=None)
    return coef.T.copy()


def rmse(a, b) -> float:
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=-1))))


def calibrate(samples) -> CalibrationModel:
    """Fit both stages and record fit residuals in ``model.stats``."""
    robot, tracker = _split(samples)
    m, b = fit_affine((tracker, robot))
    q = fit_quadratic((tracker, robot), m, b)
    u = tracker @ m.T + b
    model = CalibrationModel(m, b, q, np.array([u.min(axis=0), u.max(axis=0)]))
    fitted, _ = apply_calibration(model, tracker)
    model.stats.update(n_samples=len(robot), affine_rmse_mm=rmse(u, robot), residual_rmse_mm=rmse(fitted, robot))
    return model


def apply_calibration(model: CalibrationModel, tracker):
    """Map tracker coordinates to robot mm.

    Returns ``(mm, extrapolated)``; both keep the leading shape of the input
    (a single point gives a (3,) array and a bool).
    """
    t = np.asarray(tracker, dtype=float)
    single = t.ndim == 1
    u = model.affine(t)
    out = u + quad_basis(u) @ model.quad.T
    lo, hi = model.bounds
    tol = 1e-9
    extra = np.any((u < lo - tol) | (u > hi + tol), axis=1)
    if single:
        return out[0], bool(extra[0])
    return out, extra


def model_to_dict(model: CalibrationModel) -> dict:
    return {
        "format": "octtrack-calibration",
        "version": 1,
        "input": ["galvo_x_steps", "galvo_y_steps", "motor_steps"],
        "affine": {"doc": "u = matrix @ steps + offset (mm)", "matrix": model.matrix.tolist(),
                   "offset": model.offset.tolist()},
        "quadratic": {"doc": "mm = u + coeffs[axis] . basis(u)", "basis": list(QUAD_TERMS),
                      "coeffs": {ax: model.quad[i].tolist() for i, ax in enumerate("xyz")}},
        "bounds_mm": {"min": model.bounds[0].tolist(), "max": model.bounds[1].tolist()},
        "stats": model.stats,
    }


def model_from_dict(d: dict) -> CalibrationModel:
    if d.get("format") != "octtrack-calibration" or d.get("version") != 1:
        raise ParameterError("not a version-1 calibration file")
    q = d["quadratic"]
    if list(q["basis"]) != list(QUAD_TERMS):
        raise ParameterError("unexpected quadratic basis order")
    return CalibrationModel(np.array(d["affine"]["matrix"]), np.array(d["affine"]["offset"]),
                            np.array([q["coeffs"][ax] for ax in "xyz"]),
                            np.array([d["bounds_mm"]["min"], d["bounds_mm"]["max"]]), dict(d.get("stats", {})))


def save_model(path, model: CalibrationModel) -> None:
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)


def load_model(path) -> CalibrationModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))


def write_samples_csv(path, samples) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SAMPLE_COLUMNS)
        for s in samples:
            w.writerow([s.point, repr(float(s.timestamp)), *(repr(float(v)) for v in s.robot), *s.tracker])


def read_samples_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        if tuple(next(r)) != SAMPLE_COLUMNS:
            raise ParameterError("unexpected calibration CSV header")
        return [CalibrationSample(tuple(map(float, row[2:5])), tuple(map(int, row[5:8])), float(row[1]), int(row[0]))
                for row in r]
