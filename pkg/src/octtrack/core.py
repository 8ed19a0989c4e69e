"""Shared geometry and volume types.

Axis convention used throughout the package: arrays are indexed ``[x, y, z]``
with ``x`` the lateral fast axis, ``y`` the lateral slow axis and ``z`` depth.
Positive ``z`` points away from the lens (deeper).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

VOLUME_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4I")


class ContractError(ValueError):
    """An operation was called with arguments that violate its precondition."""


class ParameterError(ValueError):
    """A model parameter is outside its documented bounds."""


class DegenerateInputError(ValueError):
    """Input carries no usable structure (e.g. a constant volume)."""

    confidence = 0.0


class OutOfSceneError(RuntimeError):
    """The field of view does not intersect the virtual sample."""


class InsufficientDataError(ValueError):
    """Not enough overlapping samples to compute a statistic."""


class DegenerateGeometryError(ValueError):
    """Calibration points do not span three dimensions."""


class TrackingLostError(RuntimeError):
    """The tracker lost the sample during a run that requires continuous lock."""


@dataclass(frozen=True)
class VolumeDims:
    nx: int = 32
    ny: int = 32
    nz: int = 480

    def __post_init__(self):
        for name in ("nx", "ny", "nz"):
            if int(getattr(self, name)) < 2:
                raise ParameterError(f"{name} must be >= 2")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def size(self) -> int:
        return self.nx * self.ny * self.nz


@dataclass(frozen=True)
class VoxelPitch:
    """Voxel size in mm. Defaults give a 2.5 x 2.5 x 3.5 mm field of view."""

    dx: float = 2.5 / 32
    dy: float = 2.5 / 32
    dz: float = 3.5 / 480

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise ParameterError("voxel pitch must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])


class VoxelShift(NamedTuple):
    sx: int
    sy: int
    sz: int


class MetricDisplacement(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class Volume:
    """Reconstructed intensity C-scan with values in [0, 1].

    The intensity array is made read-only on construction.
    """

    dims: VolumeDims
    pitch: VoxelPitch
    intensity: np.ndarray = field(repr=False)
    timestamp: float = 0.0

    def __post_init__(self):
        a = np.asarray(self.intensity)
        if a.shape != self.dims.shape:
            raise ContractError(f"intensity shape {a.shape} != dims {self.dims.shape}")
        lo, hi = a.min(), a.max()
        # NaN makes both comparisons false
        if not (lo >= 0.0 and hi <= 1.0):
            raise ContractError("intensities must be finite and within [0, 1]")
        a.flags.writeable = False
        object.__setattr__(self, "intensity", a)


def wrap_shift(raw_index, dims: VolumeDims) -> VoxelShift:
    """Map a cyclic peak index to a signed shift.

    Index ``c`` on an axis of length ``d`` maps to ``c`` if ``c <= d/2`` and to
    ``c - d`` otherwise, so the half-point tie resolves to ``+d/2``.
    """
    out = []
    for c, d in zip(raw_index, dims.shape):
        c = int(c)
        if not 0 <= c < d:
            raise ContractError(f"index {c} outside [0, {d})")
        out.append(c if 2 * c <= d else c - d)
    return VoxelShift(*out)


def voxel_to_metric(shift, pitch: VoxelPitch) -> MetricDisplacement:
    sx, sy, sz = shift
    return MetricDisplacement(sx * pitch.dx, sy * pitch.dy, sz * pitch.dz)


def write_volume(path, volume: Volume) -> None:
    """Write ``volume`` as a 16-byte header plus little-endian float32 data.

    Data order is z fastest, then x, then y.
    """
    d = volume.dims
    data = np.ascontiguousarray(volume.intensity.transpose(1, 0, 2), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(d.nx, d.ny, d.nz, VOLUME_FORMAT_VERSION))
        fh.write(data.tobytes())


def read_volume(path, pitch: VoxelPitch | None = None, timestamp: float = 0.0) -> Volume:
    raw = Path(path).read_bytes()
    nx, ny, nz, version = _HEADER.unpack_from(raw)
    if version != VOLUME_FORMAT_VERSION:
        raise ContractError(f"unsupported volume format version {version}")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    if data.size != nx * ny * nz:
        raise ContractError("truncated volume file")
    arr = data.reshape(ny, nx, nz).transpose(1, 0, 2).astype(np.float32)
    return Volume(VolumeDims(nx, ny, nz), pitch or VoxelPitch(), arr, timestamp)
