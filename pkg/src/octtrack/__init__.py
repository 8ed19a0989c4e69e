"""Simulated volumetric OCT motion tracking.

Phase-correlation registration of OCT volumes drives a galvo/motor actuator
model in a closed loop against a virtual moving sample; the harness measures
tracking error, latency and throughput.
"""

from .core import (
    ContractError,
    DegenerateGeometryError,
    DegenerateInputError,
    InsufficientDataError,
    OutOfSceneError,
    ParameterError,
    TrackingLostError,
    Volume,
    VolumeDims,
    VoxelPitch,
    VoxelShift,
    voxel_to_metric,
    wrap_shift,
)
from .registration import FilterParams, MatchResult, TemplateMatcher, phase_correlate

__version__ = "0.1.0"
