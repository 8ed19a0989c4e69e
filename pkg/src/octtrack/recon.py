"""Swept-source fringe forward model and A-scan reconstruction.

Depth calibration: with ``N`` raw samples spanning ``[k_min, k_max]``
uniformly, FFT bin ``b`` of ``cos(2 k z)`` sits at ``z = pi * b / (N * dk)``.
The default k-range is chosen so that the 480 positive-frequency bins cover
exactly the 3.5 mm depth of the default volume, i.e. bin pitch == ``dz``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import ContractError, ParameterError, Volume, VolumeDims, VoxelPitch

WAVELENGTH_MM = 1.315e-3


def _default_k_range(n: int = 960, depth_mm: float = 3.5, nz: int = 480):
    dk = math.pi * nz / (n * depth_mm)
    k0 = 2 * math.pi / WAVELENGTH_MM
    span = dk * (n - 1)
    return (k0 - span / 2, k0 + span / 2)


def _default_background(n: int = 960) -> np.ndarray:
    u = np.linspace(-1.0, 1.0, n)
    return 50.0 * np.exp(-0.5 * (u / 0.6) ** 2) + 5.0


@dataclass(frozen=True)
class SweepModel:
    """Laser sweep: sample index -> wavenumber (1/mm), plus detector baseline.

    The nonlinearity is ``k(u) = k_min + (k_max - k_min) * (u + a * (u**2 - u))``
    for ``u = i / (N - 1)``; it is strictly monotone for ``|a| < 1``.
    """

    samples_per_ascan: int = 960
    k_range: tuple = field(default_factory=_default_k_range)
    nonlinearity: float = 0.1
    background: np.ndarray = field(default_factory=_default_background, repr=False)

    def __post_init__(self):
        bg = np.asarray(self.background, dtype=float)
        if bg.shape != (self.samples_per_ascan,):
            raise ParameterError("background length must equal samples_per_ascan")
        if self.samples_per_ascan % 2:
            raise ParameterError("samples_per_ascan must be even")
        if not self.k_range[1] > self.k_range[0] > 0:
            raise ParameterError("k_range must be increasing and positive")
        object.__setattr__(self, "background", bg)

    @property
    def nz(self) -> int:
        return self.samples_per_ascan // 2

    def uniform_k(self) -> np.ndarray:
        u = np.arange(self.samples_per_ascan) / (self.samples_per_ascan - 1)
        return self.k_range[0] + (self.k_range[1] - self.k_range[0]) * u

    def k_samples(self) -> np.ndarray:
        u = np.arange(self.samples_per_ascan) / (self.samples_per_ascan - 1)
        g = u + self.nonlinearity * (u * u - u)
        return self.k_range[0] + (self.k_range[1] - self.k_range[0]) * g

    @property
    def bin_depth(self) -> float:
        """Depth (mm) per FFT bin."""
        dk = (self.k_range[1] - self.k_range[0]) / (self.samples_per_ascan - 1)
        return math.pi / (self.samples_per_ascan * dk)

    @property
    def max_depth(self) -> float:
        return self.bin_depth * self.nz


@dataclass(frozen=True)
class ReconConfig:
    """``full_scale`` is the spectral magnitude mapped to intensity 1."""

    window: str = "hann"
    epsilon: float = 1e-4
    full_scale: float = 1000.0

    def __post_init__(self):
        if self.window not in ("hann", "rectangular"):
            raise ParameterError(f"unknown window {self.window!r}")
        if not self.epsilon > 0 or not self.full_scale > 0:
            raise ParameterError("epsilon and full_scale must be positive")


@dataclass(frozen=True)
class ResamplingTable:
    index: np.ndarray  # left source sample per uniform-k target
    weights: np.ndarray  # (N, 2) weights for index and index + 1

    def apply(self, raw: np.ndarray) -> np.ndarray:
        """Resample along the last axis."""
        return raw[..., self.index] * self.weights[:, 0] + raw[..., self.index + 1] * self.weights[:, 1]


def synthesize_fringes(reflectors, sweep: SweepModel = SweepModel(), noise: float = 0.0,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Raw detector samples for point reflectors ``[(depth_mm, amplitude), ...]``.

    ``sample_i = background_i + sum_j a_j cos(2 k_i z_j) + N(0, noise)``.
    """
    k = sweep.k_samples()
    out = sweep.background.copy()
    for z, a in reflectors:
        if not 0.0 <= z < sweep.max_depth:
            raise ParameterError(f"depth {z} mm outside [0, {sweep.max_depth:.3f})")
        out += a * np.cos(2.0 * k * z)
    if noise > 0:
        rng = rng or np.random.default_rng()
        out += rng.normal(0.0, noise, out.shape)
    return out


def synthesize_fringes_grid(amplitudes: np.ndarray, sweep: SweepModel = SweepModel(),
                            depth_origin: float = 0.0) -> np.ndarray:
    """Fringes for reflectors on the depth-bin grid, vectorised over A-scans.

    ``amplitudes[..., j]`` is the reflectivity at depth ``depth_origin + j *
    bin_depth``. Returns background + fringes with shape ``amplitudes.shape[:-1]
    + (N,)``.
    """
    amplitudes = np.asarray(amplitudes, dtype=float)
    z = depth_origin + np.arange(amplitudes.shape[-1]) * sweep.bin_depth
    basis = np.cos(2.0 * np.outer(z, sweep.k_samples()))
    return amplitudes @ basis + sweep.background


def build_resampling_table(sweep: SweepModel) -> ResamplingTable:
    """Linear-interpolation table from the raw sweep onto uniform k."""
    ks = sweep.k_samples()
    if np.any(np.diff(ks) <= 0):
        raise ParameterError("sweep k mapping is not strictly monotone")
    pos = np.interp(sweep.uniform_k(), ks, np.arange(ks.size, dtype=float))
    idx = np.minimum(np.floor(pos).astype(int), ks.size - 2)
    frac = pos - idx
    return ResamplingTable(idx, np.column_stack([1.0 - frac, frac]))


def _window(n: int, kind: str) -> np.ndarray:
    if kind == "rectangular":
        return np.ones(n)
    return np.hanning(n)


def ascan_spectrum(raw: np.ndarray, sweep: SweepModel = SweepModel(), cfg: ReconConfig = ReconConfig(),
                   table: ResamplingTable | None = None, background=None) -> np.ndarray:
    """Complex depth spectrum (before compression), shape ``raw.shape[:-1] + (nz,)``.

    Steps: subtract background, resample to uniform k, window, FFT, keep the
    first ``nz`` positive-frequency bins. ``background`` defaults to the
    sweep's baseline.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != sweep.samples_per_ascan:
        raise ContractError(f"raw length {raw.shape[-1]} != {sweep.samples_per_ascan}")
    table = table or build_resampling_table(sweep)
    bg = sweep.background if background is None else background
    x = table.apply(raw - bg)
    x *= _window(sweep.samples_per_ascan, cfg.window)
    return np.fft.rfft(x, axis=-1)[..., : sweep.nz]


def compress(magnitude: np.ndarray, cfg: ReconConfig = ReconConfig()) -> np.ndarray:
    """``log(1 + |X| / eps) / log(1 + full_scale / eps)``, clipped to [0, 1]."""
    out = np.log1p(magnitude / cfg.epsilon) / math.log1p(cfg.full_scale / cfg.epsilon)
    return np.clip(out, 0.0, 1.0)


def reconstruct_ascan(raw, sweep: SweepModel = SweepModel(), cfg: ReconConfig = ReconConfig(),
                      table: ResamplingTable | None = None) -> np.ndarray:
    return compress(np.abs(ascan_spectrum(raw, sweep, cfg, table)), cfg)


def reconstruct_volume(raw: np.ndarray, sweep: SweepModel = SweepModel(), cfg: ReconConfig = ReconConfig(),
                       pitch: VoxelPitch = VoxelPitch(), timestamp: float = 0.0, workers: int = 1,
                       estimate_background: bool = False) -> Volume:
    """Reconstruct ``raw`` of shape ``(nx, ny, N)`` into a ``Volume``.

    With ``estimate_background`` the mean raw spectrum over all A-scans is
    subtracted instead of the sweep baseline. The output does not depend on
    ``workers``: each A-scan goes through the same row-wise transform.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 3:
        raise ContractError("raw volume must have shape (nx, ny, samples)")
    nx, ny, n = raw.shape
    table = build_resampling_table(sweep)
    bg = raw.reshape(-1, n).mean(axis=0) if estimate_background else None
    flat = raw.reshape(-1, n)
    if workers <= 1:
        spec = ascan_spectrum(flat, sweep, cfg, table, bg)
    else:
        chunks = np.array_split(np.arange(flat.shape[0]), workers)
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda ix: ascan_spectrum(flat[ix], sweep, cfg, table, bg), chunks))
        spec = np.concatenate(parts, axis=0)
    out = compress(np.abs(spec), cfg).reshape(nx, ny, sweep.nz).astype(np.float32)
    return Volume(VolumeDims(nx, ny, sweep.nz), pitch, out, timestamp)


def synthesize_volume_fringes(scene, sample_offset, fov, dims: VolumeDims = VolumeDims(),
                              pitch: VoxelPitch = VoxelPitch(), sweep: SweepModel = SweepModel(),
                              noise: float = 0.0, rng: np.random.Generator | None = None,
                              amplitude: float = 2.0) -> np.ndarray:
    """Raw fringes ``(nx, ny, N)`` for a scene seen through ``fov``.

    Plates contribute one reflector per A-scan at the surface depth; tissue
    contributes a reflector per depth bin weighted by the speckle grid.
    Depth zero is the top of the FOV.
    """
    from .phantom import BACKGROUND, render_volume, surface_depths

    if sweep.nz != dims.nz or not math.isclose(sweep.bin_depth, pitch.dz, rel_tol=1e-9):
        raise ContractError("sweep depth sampling must match the volume depth pitch")
    k = sweep.k_samples()
    if scene.kind == "plate":
        kstar = surface_depths(scene, sample_offset, fov, dims, pitch)
        z = kstar * pitch.dz
        ok = np.isfinite(z) & (z >= 0) & (z < sweep.max_depth)
        amp = np.where(ok, amplitude, 0.0)
        z = np.where(ok, z, 0.0)
        raw = amp[..., None] * np.cos(2.0 * z[..., None] * k) + sweep.background
    else:
        ref = render_volume(scene, sample_offset, fov, dims, pitch).intensity - BACKGROUND
        raw = synthesize_fringes_grid(amplitude * np.clip(ref, 0, None), sweep)
    if noise > 0:
        rng = rng or np.random.default_rng()
        raw = raw + rng.normal(0.0, noise, raw.shape)
    return raw
