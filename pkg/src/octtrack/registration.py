"""Integer 3D translation estimation by phase correlation.

Shift convention: the live volume satisfies ``live(x) = template(x - shift)``,
i.e. ``shift`` is how far the sample content moved from the template.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft

from .core import ContractError, DegenerateInputError, Volume, VoxelShift, VolumeDims, wrap_shift


@dataclass(frozen=True)
class FilterParams:
    """Cross-spectrum filter settings.

    ``sigma`` is the Gaussian low-pass standard deviation as a fraction of the
    Nyquist frequency on each axis; ``eps`` guards the magnitude normalization.
    """

    sigma: float = 0.5
    eps: float = 1e-9

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractError("low-pass sigma must be positive")
        if self.eps < 0:
            raise ContractError("eps must be non-negative")


@dataclass(frozen=True)
class MatchResult:
    shift: VoxelShift
    confidence: float


def _axis_weights(n: int, sigma: float, half: bool) -> np.ndarray:
    f = np.fft.rfftfreq(n) if half else np.fft.fftfreq(n)
    if math.isinf(sigma):
        return np.ones_like(f)
    s = sigma * 0.5
    return np.exp(-0.5 * (f / s) ** 2)


@lru_cache(maxsize=32)
def _lowpass(shape: tuple, sigma: float, half: bool):
    """Separable Gaussian weights and their mean over the full spectrum."""
    axes = [_axis_weights(n, sigma, half and i == len(shape) - 1) for i, n in enumerate(shape)]
    w = axes[0]
    for a in axes[1:]:
        w = np.multiply.outer(w, a)
    full_mean = float(np.prod([_axis_weights(n, sigma, False).mean() for n in shape]))
    w = w.astype(np.float32)
    w.flags.writeable = False
    return w, full_mean


def lowpass_weights(shape, fp: FilterParams, half: bool = False) -> np.ndarray:
    """Gaussian low-pass in FFT layout (``half=True`` for rfft layout)."""
    return _lowpass(tuple(shape), float(fp.sigma), half)[0]


def apply_lowpass(spectrum: np.ndarray, fp: FilterParams, half: bool = False) -> np.ndarray:
    """Multiply a full (or rfft-half) spectrum by the Gaussian low-pass.

    For a half spectrum pass the *spatial* shape via ``half=True``; the last
    axis length is then recovered as ``2 * (m - 1)``.
    """
    shape = spectrum.shape
    if half:
        shape = shape[:-1] + (2 * (shape[-1] - 1),)
    w = lowpass_weights(shape, fp, half)
    if w.shape != spectrum.shape:
        raise ContractError("spectrum shape does not match filter layout")
    return spectrum * w


def find_peak(corr: np.ndarray, workers: int = 1):
    """Global argmax of ``corr``; ties go to the smallest linear index.

    With ``workers > 1`` the flat array is reduced in chunks on a thread pool
    and the partial maxima merged, which yields the same answer as a
    sequential scan.
    """
    flat = np.asarray(corr).reshape(-1)
    if flat.size == 0:
        raise ContractError("empty correlation grid")
    if workers <= 1 or flat.size < 2 * workers:
        i = int(np.argmax(flat))
    else:
        bounds = np.linspace(0, flat.size, workers + 1).astype(int)

        def part(k):
            lo, hi = bounds[k], bounds[k + 1]
            j = int(np.argmax(flat[lo:hi]))
            return flat[lo + j], lo + j

        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(part, range(workers)))
        best_v, i = parts[0]
        for v, j in parts[1:]:
            if v > best_v:  # strict: earlier chunk wins ties
                best_v, i = v, j
    idx = np.unravel_index(i, np.shape(corr))
    return tuple(int(k) for k in idx), flat[i].item()


def _check_structure(a: np.ndarray) -> None:
    if a.max() == a.min():
        raise DegenerateInputError("volume is constant; no spectral energy outside DC")


class TemplateMatcher:
    """Phase correlator with the template spectrum computed once.

    The control loop registers hundreds of volumes per second against one
    template, so the forward transform of the template is cached here.
    """

    def __init__(self, template: Volume | np.ndarray, fp: FilterParams = FilterParams()):
        arr = template.intensity if isinstance(template, Volume) else np.asarray(template)
        _check_structure(arr)
        self.shape = arr.shape
        self.dims = VolumeDims(*self.shape)
        self.fp = fp
        self._conj_t = np.conj(scipy.fft.rfftn(arr.astype(np.float32, copy=False)))
        self._w, self._w_mean = _lowpass(self.shape, float(fp.sigma), True)
        self._eps = np.float32(fp.eps)

    def correlation_surface(self, live: Volume | np.ndarray) -> np.ndarray:
        arr = live.intensity if isinstance(live, Volume) else np.asarray(live)
        if arr.shape != self.shape:
            raise ContractError(f"live shape {arr.shape} != template shape {self.shape}")
        _check_structure(arr)
        r = scipy.fft.rfftn(arr.astype(np.float32, copy=False))
        r *= self._conj_t
        mag = np.abs(r)
        mag += self._eps
        np.divide(self._w, mag, out=mag)
        r *= mag
        return scipy.fft.irfftn(r, s=self.shape)

    def match(self, live: Volume | np.ndarray, workers: int = 1) -> MatchResult:
        corr = self.correlation_surface(live)
        idx, value = find_peak(corr, workers)
        return MatchResult(wrap_shift(idx, self.dims), float(value) / self._w_mean)


def phase_correlate(template, live, fp: FilterParams = FilterParams()) -> MatchResult:
    """Estimate the integer translation from ``template`` to ``live``.

    Args:
        template: reference volume (``Volume`` or 3D array).
        live: volume to register, same shape as ``template``.
        fp: low-pass and normalization settings.

    Returns:
        MatchResult whose ``shift`` satisfies ``live(x) ~ template(x - shift)``
        and whose ``confidence`` is the correlation peak scaled so identical
        inputs give 1.

    Raises:
        ContractError: shapes differ.
        DegenerateInputError: either input is constant.
    """
    t = template.intensity if isinstance(template, Volume) else np.asarray(template)
    l = live.intensity if isinstance(live, Volume) else np.asarray(live)
    if t.shape != l.shape:
        raise ContractError(f"shape mismatch {t.shape} vs {l.shape}")
    return TemplateMatcher(t, fp).match(l)
