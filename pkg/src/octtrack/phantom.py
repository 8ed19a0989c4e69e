"""Virtual samples, motion trajectories and intensity-volume rendering.

Coordinates: a scene lives in its own sample frame (mm). A voxel with local
offset ``q`` from the FOV center sees the sample-frame point
``fov.center + q - sample_offset``. Positive ``z`` is deeper, so a sample
displaced by ``+z`` shows its surface at larger depth indices.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import (
    ContractError,
    OutOfSceneError,
    ParameterError,
    Volume,
    VolumeDims,
    VoxelPitch,
)

SCENE_FORMAT_VERSION = 1

PLATE_DEFAULTS = {
    "amplitude": 0.3,  # peak-to-peak height variation, mm
    "corr_length": 0.25,  # lateral feature size, mm
    "size": 60.0,  # square patch edge, mm
    "spacing": 0.05,  # heightfield grid, mm
}
TISSUE_DEFAULTS = {
    "attenuation": 0.5,  # 1/mm
    "contrast": 1.0,  # 1 = full speckle texture, near 0 = nearly featureless
    "grain": 0.8,  # speckle correlation, voxels (laterally; x2.5 axially)
    "size": 10.0,  # lateral edge, mm
    "top": -1.5,  # z extent above the surface, mm
    "depth": 4.5,  # z extent below the surface, mm
}
MAX_PLATE_AMPLITUDE = 0.4

# rendering model
BACKGROUND = 0.2
SURFACE_PEAK = 0.6
SURFACE_WIDTH_VOXELS = 3.0
TISSUE_PEAK = 0.7


@dataclass(frozen=True)
class Scene:
    """A rigid virtual sample.

    ``content`` is a 2D heightfield (mm) for plates and a 3D speckle grid in
    [0, 1] for tissue. ``origin`` is the sample-frame coordinate of
    ``content[0, 0(, 0)]`` and ``spacing`` the grid step per axis.
    """

    kind: str
    seed: int
    params: dict
    content: np.ndarray = field(repr=False)
    origin: tuple
    spacing: tuple

    @property
    def extent(self):
        """((xmin, xmax), (ymin, ymax), (zmin, zmax)) in mm."""
        ext = []
        for o, s, n in zip(self.origin, self.spacing, self.content.shape):
            ext.append((o, o + s * (n - 1)))
        if self.kind == "plate":
            a = self.params["amplitude"]
            ext.append((-a / 2, a / 2))
        return tuple(ext)


@dataclass(frozen=True)
class FovPose:
    center: tuple = (0.0, 0.0, 0.0)


def _check_bounds(name, value, lo, hi, lo_open=True):
    ok = (value > lo if lo_open else value >= lo) and value <= hi
    if not (ok and math.isfinite(value)):
        raise ParameterError(f"{name}={value} outside ({lo}, {hi}]")


def make_scene(kind: str, seed: int, **params) -> Scene:
    """Generate a plate or tissue sample, deterministic in ``seed``.

    Plate: white noise on a regular grid, Gaussian-filtered to the feature
    size and rescaled to the requested peak-to-peak amplitude.

    Tissue: speckle intensity (squared magnitude of a filtered complex Gaussian
    field), mixed toward its mean by ``1 - contrast`` and attenuated
    exponentially below the surface at ``z = 0``. Above the surface the grid
    is zero.
    """
    rng = np.random.default_rng(seed)
    if kind == "plate":
        p = {**PLATE_DEFAULTS, **params}
        _check_bounds("amplitude", p["amplitude"], 0.0, MAX_PLATE_AMPLITUDE)
        _check_bounds("corr_length", p["corr_length"], 0.0, 10.0)
        _check_bounds("spacing", p["spacing"], 0.0, 1.0)
        _check_bounds("size", p["size"], 10 * p["spacing"], 500.0)
        n = int(round(p["size"] / p["spacing"])) + 1
        h = ndimage.gaussian_filter(rng.standard_normal((n, n)), p["corr_length"] / p["spacing"],
                                    mode="wrap")
        h = (h - h.min()) / (h.max() - h.min()) * p["amplitude"] - p["amplitude"] / 2
        half = p["spacing"] * (n - 1) / 2
        return Scene("plate", seed, p, h, (-half, -half), (p["spacing"], p["spacing"]))
    if kind == "tissue":
        p = {**TISSUE_DEFAULTS, **params}
        _check_bounds("attenuation", p["attenuation"], 0.0, 10.0, lo_open=False)
        _check_bounds("contrast", p["contrast"], 0.0, 1.0)
        _check_bounds("grain", p["grain"], 0.0, 10.0)
        _check_bounds("size", p["size"], 1.0, 40.0)
        _check_bounds("depth", p["depth"], 0.5, 10.0)
        if not -10.0 <= p["top"] <= 0.0:
            raise ParameterError("top must be within [-10, 0] mm")
        pitch = VoxelPitch()
        spacing = (pitch.dx, pitch.dy, pitch.dz)
        nl = int(round(p["size"] / pitch.dx))
        k0 = int(math.floor(p["top"] / pitch.dz))
        nz = int(math.ceil(p["depth"] / pitch.dz)) - k0 + 1
        shape = (nl, nl, nz)
        sig = (p["grain"], p["grain"], 2.5 * p["grain"])
        re = ndimage.gaussian_filter(rng.standard_normal(shape, dtype=np.float32), sig, mode="wrap")
        im = ndimage.gaussian_filter(rng.standard_normal(shape, dtype=np.float32), sig, mode="wrap")
        speckle = re * re
        speckle += im * im
        speckle /= speckle.mean()
        # exponential speckle statistics mapped into [0, 1)
        speckle = 1.0 - np.exp(-0.5 * speckle)
        speckle = (1.0 - p["contrast"]) * float(speckle.mean()) + p["contrast"] * speckle
        z = (k0 + np.arange(nz)) * pitch.dz
        depth_gain = np.where(z >= 0, np.exp(-p["attenuation"] * np.clip(z, 0, None)), 0.0)
        speckle *= depth_gain.astype(np.float32)
        origin = (-(nl // 2) * pitch.dx, -(nl // 2) * pitch.dy, k0 * pitch.dz)
        return Scene("tissue", seed, p, speckle.astype(np.float32), origin, spacing)
    raise ParameterError(f"unknown scene kind {kind!r}")


def save_scene(path, scene: Scene) -> None:
    """Persist as ``.npz``: content grid plus a JSON header with parameters."""
    header = {
        "version": SCENE_FORMAT_VERSION,
        "kind": scene.kind,
        "seed": scene.seed,
        "params": scene.params,
        "origin": list(scene.origin),
        "spacing": list(scene.spacing),
    }
    np.savez(path, content=scene.content, header=np.array(json.dumps(header)))


def load_scene(path) -> Scene:
    with np.load(path) as data:
        header = json.loads(str(data["header"]))
        content = data["content"]
    if header["version"] != SCENE_FORMAT_VERSION:
        raise ContractError(f"unsupported scene version {header['version']}")
    return Scene(header["kind"], header["seed"], header["params"], content,
                 tuple(header["origin"]), tuple(header["spacing"]))


def midplane_csv(scene: Scene) -> str:
    """Central slice of the scene as CSV (heightfield row for plates, xz plane for tissue)."""
    buf = io.StringIO()
    c = scene.content
    sl = c if scene.kind == "plate" else c[:, c.shape[1] // 2, :]
    np.savetxt(buf, sl, delimiter=",", fmt="%.6g")
    return buf.getvalue()


# --------------------------------------------------------------------------
# trajectories

_DIRECTIONS = {
    "lateral-diagonal": np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0),
    "axial": np.array([0.0, 0.0, 1.0]),
    "3d-diagonal": np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0),
    "static": np.zeros(3),
    "axial-sine": np.array([0.0, 0.0, 1.0]),
}
MOTION_KINDS = tuple(_DIRECTIONS)


@dataclass(frozen=True)
class MotionTrajectory:
    """Back-and-forth linear motion of the sample, in robot/world mm.

    ``kind`` selects the direction; the sample starts at ``start`` and moves
    ``span`` mm along it and back at constant ``velocity`` (path speed).
    ``axial-sine`` instead oscillates as ``(span/2) sin(2 pi t / period)``
    along z, with ``period`` in seconds. ``noise`` is the per-sample robot
    repeatability (Gaussian sigma, mm).
    """

    kind: str = "static"
    velocity: float = 0.0
    span: float = 30.0
    duration: float = 60.0
    noise: float = 0.01
    start: tuple = (0.0, 0.0, 0.0)
    period: float = 1.0

    def __post_init__(self):
        if self.kind not in _DIRECTIONS:
            raise ParameterError(f"unknown motion kind {self.kind!r}")
        if not self.span > 0:
            raise ParameterError("span must be positive")
        if self.velocity < 0 or self.noise < 0 or not self.duration > 0:
            raise ParameterError("velocity and noise must be >= 0, duration > 0")

    @property
    def direction(self) -> np.ndarray:
        return _DIRECTIONS[self.kind]

    def displacement(self, t: float) -> float:
        """Signed distance along the motion direction at time ``t``."""
        if self.kind == "static" or (self.velocity == 0 and self.kind != "axial-sine"):
            return 0.0
        if self.kind == "axial-sine":
            return 0.5 * self.span * math.sin(2 * math.pi * t / self.period)
        leg = self.span / self.velocity
        phase = math.fmod(t, 2 * leg)
        return self.velocity * phase if phase <= leg else self.velocity * (2 * leg - phase)


def sample_position(traj: MotionTrajectory, t: float, rng: np.random.Generator | None = None):
    """World position (mm) of the sample at time ``t``.

    Diagonal profiles move along a unit vector, so the per-axis speed is the
    path speed divided by sqrt(2) or sqrt(3). When ``rng`` is given, isotropic
    Gaussian noise with sigma ``traj.noise`` is added.
    """
    if not 0.0 <= t <= traj.duration:
        raise ContractError(f"t={t} outside [0, {traj.duration}]")
    pos = np.asarray(traj.start, dtype=float) + traj.direction * traj.displacement(t)
    if rng is not None and traj.noise > 0:
        pos = pos + rng.normal(0.0, traj.noise, 3)
    return pos


@dataclass(frozen=True)
class WaypointTrajectory:
    """Piecewise-linear path through waypoints with a dwell at each.

    Used for calibration: the robot moves at ``speed`` between points and
    rests ``dwell`` seconds at each one (including the first).
    """

    points: np.ndarray
    speed: float
    dwell: float
    noise: float = 0.01

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        legs = np.linalg.norm(np.diff(pts, axis=0), axis=1) / self.speed
        starts = np.zeros(len(pts))
        starts[1:] = np.cumsum(legs + self.dwell)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_legs", legs)
        object.__setattr__(self, "arrivals", starts)

    @property
    def duration(self) -> float:
        return float(self.arrivals[-1] + self.dwell)

    def displacement_vector(self, t: float) -> np.ndarray:
        i = int(np.searchsorted(self.arrivals, t, side="right")) - 1
        i = max(i, 0)
        rest = t - self.arrivals[i]
        if i == len(self.points) - 1 or rest <= self.dwell:
            return self.points[i]
        frac = min((rest - self.dwell) / self._legs[i], 1.0)
        return self.points[i] + frac * (self.points[i + 1] - self.points[i])


def trajectory_position(traj, t: float, rng=None) -> np.ndarray:
    if isinstance(traj, MotionTrajectory):
        return sample_position(traj, t, rng)
    pos = traj.displacement_vector(t)
    if rng is not None and traj.noise > 0:
        pos = pos + rng.normal(0.0, traj.noise, 3)
    return pos


# --------------------------------------------------------------------------
# noise and rendering


class NoiseStream:
    """Seeded additive Gaussian intensity noise.

    Drawing half a million Gaussian variates per volume dominates the loop
    cost, so live volumes take a random window out of a pre-generated pool.
    ``fresh=True`` draws new independent variates (used for templates, so the
    template noise never correlates with a pool window).
    """

    def __init__(self, seed: int, sigma: float = 0.05, pool_size: int = 1 << 22):
        if sigma < 0:
            raise ParameterError("noise sigma must be >= 0")
        self.sigma = float(sigma)
        self.rng = np.random.default_rng(seed)
        self._pool = None
        self._pool_size = pool_size

    def draw(self, shape, fresh: bool = False) -> np.ndarray:
        n = int(np.prod(shape))
        if fresh or n * 4 > self._pool_size:
            return (self.rng.standard_normal(n, dtype=np.float32) * np.float32(self.sigma)).reshape(shape)
        if self._pool is None:
            self._pool = self.rng.standard_normal(self._pool_size, dtype=np.float32)
            self._pool *= np.float32(self.sigma)
        off = int(self.rng.integers(0, self._pool_size - n))
        return self._pool[off:off + n].reshape(shape)


def _voxel_axes(dims: VolumeDims, pitch: VoxelPitch):
    return (
        (np.arange(dims.nx) - dims.nx // 2) * pitch.dx,
        (np.arange(dims.ny) - dims.ny // 2) * pitch.dy,
        (np.arange(dims.nz) - dims.nz // 2) * pitch.dz,
    )


def _bilinear(grid, origin, spacing, xs, ys):
    """Bilinear samples of ``grid`` on the outer product ``xs x ys``; NaN outside."""
    fx = (xs - origin[0]) / spacing[0]
    fy = (ys - origin[1]) / spacing[1]
    nx, ny = grid.shape
    ix = np.floor(fx).astype(int)
    iy = np.floor(fy).astype(int)
    vx = (ix >= 0) & (ix < nx - 1)
    vy = (iy >= 0) & (iy < ny - 1)
    ix = np.clip(ix, 0, nx - 2)
    iy = np.clip(iy, 0, ny - 2)
    wx = (fx - ix)[:, None]
    wy = (fy - iy)[None, :]
    g00 = grid[ix[:, None], iy[None, :]]
    g10 = grid[ix[:, None] + 1, iy[None, :]]
    g01 = grid[ix[:, None], iy[None, :] + 1]
    g11 = grid[ix[:, None] + 1, iy[None, :] + 1]
    out = (1 - wx) * ((1 - wy) * g00 + wy * g01) + wx * ((1 - wy) * g10 + wy * g11)
    out[~(vx[:, None] & vy[None, :])] = np.nan
    return out


def surface_depths(scene: Scene, sample_offset, fov: FovPose, dims: VolumeDims, pitch: VoxelPitch):
    """Plate surface position per A-scan as a fractional depth index (NaN off-plate)."""
    if scene.kind != "plate":
        raise ContractError("surface depths are defined for plate scenes only")
    u = np.asarray(fov.center, dtype=float) - np.asarray(sample_offset, dtype=float)
    qx, qy, _ = _voxel_axes(dims, pitch)
    h = _bilinear(scene.content, scene.origin, scene.spacing, u[0] + qx, u[1] + qy)
    return dims.nz // 2 + (h - u[2]) / pitch.dz


def _render_plate(scene, sample_offset, fov, dims, pitch, out):
    kstar = surface_depths(scene, sample_offset, fov, dims, pitch)
    if np.all(np.isnan(kstar)):
        raise OutOfSceneError("FOV lies laterally outside the plate")
    w = SURFACE_WIDTH_VOXELS
    reach = 5.0 * w
    lo = int(math.floor(np.nanmin(kstar) - reach))
    hi = int(math.ceil(np.nanmax(kstar) + reach)) + 1
    lo, hi = max(lo, 0), min(hi, dims.nz)
    if lo >= hi:
        raise OutOfSceneError("plate surface outside the FOV depth range")
    k = np.arange(lo, hi, dtype=np.float32)
    d = (k[None, None, :] - kstar[:, :, None].astype(np.float32)) / np.float32(w)
    band = np.float32(SURFACE_PEAK) * np.exp(np.float32(-0.5) * d * d)
    np.nan_to_num(band, copy=False, nan=0.0)
    out[:, :, lo:hi] += band


def _render_tissue(scene, sample_offset, fov, dims, pitch, out):
    u = np.asarray(fov.center, dtype=float) - np.asarray(sample_offset, dtype=float)
    axes = _voxel_axes(dims, pitch)
    grid = scene.content
    pos = [(u[a] + axes[a][0] - scene.origin[a]) / scene.spacing[a] for a in range(3)]
    same_pitch = all(math.isclose(s, p, rel_tol=1e-12) for s, p in
                     zip(scene.spacing, (pitch.dx, pitch.dy, pitch.dz)))
    if same_pitch:
        # regular grid with a constant fractional offset: separable lerp on a block
        starts = [int(math.floor(p)) for p in pos]
        fracs = [p - s for p, s in zip(pos, starts)]
        block = np.zeros(tuple(n + 1 for n in dims.shape), dtype=np.float32)
        src, dst = [], []
        for a, (s, n) in enumerate(zip(starts, dims.shape)):
            a0, a1 = max(s, 0), min(s + n + 1, grid.shape[a])
            if a0 >= a1:
                raise OutOfSceneError("FOV lies outside the tissue block")
            src.append(slice(a0, a1))
            dst.append(slice(a0 - s, a1 - s))
        block[tuple(dst)] = grid[tuple(src)]
        v = block
        for a, f in enumerate(fracs):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a] = slice(0, -1)
            hi[a] = slice(1, None)
            v = v[tuple(lo)] * np.float32(1 - f) + v[tuple(hi)] * np.float32(f)
    else:
        mesh = np.meshgrid(*[pos[a] + np.arange(dims.shape[a]) * (axes[a][1] - axes[a][0]) / scene.spacing[a]
                             for a in range(3)], indexing="ij")
        if any(m.max() < 0 or m.min() > grid.shape[a] - 1 for a, m in enumerate(mesh)):
            raise OutOfSceneError("FOV lies outside the tissue block")
        v = ndimage.map_coordinates(grid, mesh, order=1, mode="constant", cval=0.0).astype(np.float32)
    out += np.float32(TISSUE_PEAK) * v


def render_volume(scene: Scene, sample_offset, fov: FovPose, dims: VolumeDims = VolumeDims(),
                  pitch: VoxelPitch = VoxelPitch(), noise: NoiseStream | None = None,
                  timestamp: float = 0.0, fresh_noise: bool = False) -> Volume:
    """Render an instantaneous intensity C-scan.

    Plate: a Gaussian depth response (width ``3 * dz``) centered on the
    surface height under each A-scan. Tissue: trilinear samples of the speckle
    grid. Both sit on a constant background; noise is additive and the result
    is clipped to [0, 1].

    Raises:
        OutOfSceneError: the FOV does not intersect the sample.
    """
    out = np.full(dims.shape, BACKGROUND, dtype=np.float32)
    if scene.kind == "plate":
        _render_plate(scene, sample_offset, fov, dims, pitch, out)
    else:
        _render_tissue(scene, sample_offset, fov, dims, pitch, out)
    if noise is not None and noise.sigma > 0:
        out += noise.draw(dims.shape, fresh=fresh_noise)
    np.clip(out, 0.0, 1.0, out=out)
    return Volume(dims, pitch, out, timestamp)
