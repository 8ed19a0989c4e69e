import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf

from conftest import smooth_volume
from oracles import brute_shift, sequential_argmax
from octtrack.core import ContractError, DegenerateInputError, Volume, VolumeDims, VoxelPitch
from octtrack.registration import FilterParams, TemplateMatcher, apply_lowpass, find_peak, lowpass_weights, phase_correlate

SHAPE = (16, 16, 64)


@pytest.fixture(scope="module")
def template():
    return smooth_volume(np.random.default_rng(5), SHAPE)


def test_identity(template):
    m = phase_correlate(template, template)
    assert m.shift == (0, 0, 0)
    # bins where |T|^2 falls to the eps guard contribute less than their full weight
    assert m.confidence == pytest.approx(1.0, abs=0.05)
    noisy = np.random.default_rng(0).random(SHAPE)
    assert phase_correlate(noisy, noisy).confidence == pytest.approx(1.0, abs=1e-4)


def test_known_shift(template):
    live = np.roll(template, (3, -2, 10), axis=(0, 1, 2))
    assert phase_correlate(template, live).shift == (3, -2, 10)


def test_accepts_volume_objects(template):
    v = Volume(VolumeDims(*SHAPE), VoxelPitch(), template.astype(np.float32))
    assert phase_correlate(v, v).shift == (0, 0, 0)


def test_shape_mismatch(template):
    with pytest.raises(ContractError):
        phase_correlate(template, template[:, :, :32])


def test_constant_input(template):
    with pytest.raises(DegenerateInputError) as e:
        phase_correlate(template, np.full(SHAPE, 0.3))
    assert e.value.confidence == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(-7, 7), st.integers(-7, 7), st.integers(-31, 31))
def test_equivariance(d0, d1, d2):
    t = smooth_volume(np.random.default_rng(11), SHAPE)
    live = np.roll(t, (d0, d1, d2), axis=(0, 1, 2))
    assert phase_correlate(t, live).shift == (d0, d1, d2)


@settings(max_examples=25, deadline=None)
@given(st.integers(-6, 6), st.integers(-6, 6), st.integers(-30, 30))
def test_antisymmetry(d0, d1, d2):
    t = smooth_volume(np.random.default_rng(12), SHAPE)
    live = np.roll(t, (d0, d1, d2), axis=(0, 1, 2))
    assert phase_correlate(live, t).shift == (-d0, -d1, -d2)


def test_agrees_with_brute_force():
    rng = np.random.default_rng(21)
    hits = 0
    for _ in range(25):
        t = smooth_volume(rng, SHAPE)
        d = tuple(int(rng.integers(-n // 2 + 1, n // 2)) for n in SHAPE)
        live = np.clip(np.roll(t, d, axis=(0, 1, 2)) + rng.normal(0, 0.1, SHAPE), 0, 1)
        hits += phase_correlate(t, live).shift == brute_shift(t, live)
    assert hits >= 24


def test_confidence_decreases_with_noise():
    rng = np.random.default_rng(3)
    pairs = [smooth_volume(rng, SHAPE) for _ in range(8)]
    means = []
    for sigma in (0.0, 0.05, 0.1, 0.2):
        r = np.random.default_rng(4)
        c = [phase_correlate(t, np.clip(t + r.normal(0, sigma, SHAPE), 0, 1)).confidence for t in pairs]
        means.append(np.mean(c))
    assert all(a > b for a, b in zip(means, means[1:]))


def test_workers_do_not_change_result(template):
    live = np.clip(np.roll(template, (2, 5, -9), axis=(0, 1, 2)) + np.random.default_rng(1).normal(0, 0.1, SHAPE), 0, 1)
    tm = TemplateMatcher(template)
    ref = tm.match(live, workers=1)
    for w in (2, 3, 7):
        assert tm.match(live, workers=w) == ref


def test_find_peak_delta():
    g = np.zeros((8, 9, 10))
    g[5, 6, 7] = 1.0
    assert find_peak(g) == ((5, 6, 7), 1.0)


def test_find_peak_tie():
    g = np.full((4, 4, 4), 2.5)
    assert find_peak(g) == ((0, 0, 0), 2.5)
    assert find_peak(g, workers=3) == ((0, 0, 0), 2.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_find_peak_matches_sequential(seed, workers):
    g = np.random.default_rng(seed).integers(0, 20, (5, 6, 7)).astype(float)  # many ties
    idx, val = sequential_argmax(g)
    assert find_peak(g, workers) == (tuple(int(i) for i in idx), val)


def test_lowpass_sigma_infinite_is_identity():
    spec = np.random.default_rng(0).standard_normal((6, 6, 8)) + 0j
    assert np.array_equal(apply_lowpass(spec, FilterParams(sigma=math.inf)), spec)


def test_lowpass_dc_unity():
    w = lowpass_weights((16, 16, 64), FilterParams())
    assert w[0, 0, 0] == 1.0
    wh = lowpass_weights((16, 16, 64), FilterParams(), half=True)
    assert wh.shape == (16, 16, 33) and wh[0, 0, 0] == 1.0


def test_lowpass_energy_matches_gaussian_integral():
    shape = (32, 32, 128)
    fp = FilterParams(sigma=0.5)
    spec = np.fft.fftn(np.random.default_rng(2).standard_normal(shape))
    ratio = np.sum(np.abs(apply_lowpass(spec, fp)) ** 2) / np.sum(np.abs(spec) ** 2)
    # |W|^2 is Gaussian with std s / sqrt(2), s = sigma * Nyquist = 0.25 cycles/sample
    s = fp.sigma * 0.5 / math.sqrt(2)
    per_axis = s * math.sqrt(2 * math.pi) * erf(0.5 / (s * math.sqrt(2)))
    assert ratio == pytest.approx(per_axis ** 3, rel=0.05)


def test_filter_params_validation():
    with pytest.raises(ContractError):
        FilterParams(sigma=0)
    with pytest.raises(ContractError):
        FilterParams(eps=-1)
