import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octtrack.actuation import DeviceParams, pose_from_steps
from octtrack.calibration import (
    CalibrationModel,
    CalibrationSample,
    GridSpec,
    apply_calibration,
    calibrate,
    collect_grid,
    fit_affine,
    fit_quadratic,
    load_model,
    read_samples_csv,
    rmse,
    save_model,
    write_samples_csv,
)
from octtrack.core import DegenerateGeometryError, ParameterError, TrackingLostError
from octtrack.phantom import make_scene

DEV = DeviceParams()


def grid_points(n=5, size=40.0, center=(0, 0, 200)):
    ax = np.linspace(-size / 2, size / 2, n)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    return g + center


def device_steps(robot, device=DEV):
    """Exact step coordinates at which the distorted FOV center hits ``robot``.

    Solved by fixed-point iteration on the (small) distortion terms.
    """
    g, m = device.galvo.step_mm, device.motor.step_mm * device.motor.path_scale
    out = []
    for p in robot:
        x, y = p[0], p[1]
        for _ in range(30):
            dx, dy, dz = device.distortion.offset(x, y)
            x, y = p[0] - dx, p[1] - dy
        out.append((x / g, y / g, (p[2] - dz) / m))
    return np.array(out)


def test_identity_affine():
    r = grid_points(3)
    m, b = fit_affine((r.copy(), r))
    assert np.allclose(m, np.eye(3), atol=1e-9) and np.allclose(b, 0, atol=1e-9)


def test_scaled_affine():
    r = grid_points(3)
    t = 2 * r + [1, 2, 3]
    m, b = fit_affine((t, r))
    assert np.allclose(m, 0.5 * np.eye(3), atol=1e-9)
    assert np.allclose(b, -m @ [1, 2, 3], atol=1e-9)


def test_noisy_linear_residual_near_noise():
    rng = np.random.default_rng(0)
    r = np.repeat(grid_points(), 4, axis=0)
    t = r / 0.0025 + rng.normal(0, 0.01 / 0.0025, r.shape)
    model = calibrate((t, r))
    expected = 0.01 * np.sqrt(3)
    assert model.stats["affine_rmse_mm"] == pytest.approx(expected, rel=0.1)
    assert model.stats["residual_rmse_mm"] <= model.stats["affine_rmse_mm"]


def test_coplanar_rejected():
    r = grid_points(3)
    r[:, 2] = 200.0
    with pytest.raises(DegenerateGeometryError):
        fit_affine((r.copy(), r))
    with pytest.raises(DegenerateGeometryError):
        fit_affine((r[:3], r[:3]))


def test_pure_affine_has_zero_quadratic():
    r = grid_points()
    t = r @ np.array([[2.0, 0.1, 0], [0, 3.0, 0], [0.2, 0, 1.5]]).T + [5, -4, 1]
    m, b = fit_affine((t, r))
    q = fit_quadratic((t, r), m, b)
    assert np.max(np.abs(q)) < 1e-8


def test_spherical_distortion_removed():
    r = grid_points()
    t = device_steps(r)
    model = calibrate((t, r))
    aff, res = model.stats["affine_rmse_mm"], model.stats["residual_rmse_mm"]
    assert aff > 0.3
    assert res <= 0.15 and aff >= 2 * res


def test_cubic_distortion_only_reduced():
    r = grid_points()
    t = r.copy()
    t[:, 2] += 1e-4 * (r[:, 0] ** 3)
    model = calibrate((t, r))
    aff, res = model.stats["affine_rmse_mm"], model.stats["residual_rmse_mm"]
    assert res < aff and res > 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_quadratic_never_worse(seed, warp):
    rng = np.random.default_rng(seed)
    r = grid_points(3) + rng.normal(0, 0.5, (27, 3))
    t = r + warp * rng.normal(0, 1, r.shape) + 1e-3 * r ** 2
    model = calibrate((t, r))
    assert model.stats["residual_rmse_mm"] <= model.stats["affine_rmse_mm"] + 1e-9


@given(st.tuples(*[st.floats(-50, 50)] * 3))
def test_affine_translation_equivariant(v):
    r = grid_points(3)
    t = r @ np.array([[1.1, 0.1, 0], [0, 0.9, 0.05], [0, 0, 1.2]]).T
    m0, b0 = fit_affine((t, r))
    m1, b1 = fit_affine((t, r + v))
    assert np.allclose(m0, m1, atol=1e-8)
    assert np.allclose(b1 - b0, v, atol=1e-7)


def test_ill_conditioned_warns():
    rng = np.random.default_rng(1)
    r = grid_points(3)
    r[:, 2] = 200 + 1e-5 * rng.normal(size=27)
    r[:, 2] += np.arange(27) * 1e-4  # barely non-coplanar
    with pytest.warns(RuntimeWarning, match="ill-conditioned"):
        fit_quadratic((r.copy(), r), np.eye(3), np.zeros(3))


def test_apply_identity_and_extrapolation():
    model = CalibrationModel(bounds=np.array([[-20, -20, 180], [20, 20, 220.0]]))
    mm, extra = apply_calibration(model, (1.0, 2.0, 200.0))
    assert mm.tolist() == [1.0, 2.0, 200.0] and extra is False
    _, extra = apply_calibration(model, (30.0, 0.0, 200.0))
    assert extra is True
    mm, flags = apply_calibration(model, np.array([[0, 0, 200.0], [0, 0, 231.0]]))
    assert mm.shape == (2, 3) and flags.tolist() == [False, True]


def test_fitted_samples_map_within_residual():
    r = grid_points()
    t = device_steps(r)
    model = calibrate((t, r))
    out, extra = apply_calibration(model, t)
    assert rmse(out, r) == pytest.approx(model.stats["residual_rmse_mm"])
    assert not extra.any()


def test_singular_model_rejected():
    with pytest.raises(DegenerateGeometryError):
        CalibrationModel(matrix=np.zeros((3, 3)))


def test_model_json_roundtrip(tmp_path):
    r = grid_points()
    model = calibrate((device_steps(r), r))
    path = tmp_path / "model.json"
    save_model(path, model)
    back = load_model(path)
    assert np.array_equal(back.matrix, model.matrix) and np.array_equal(back.quad, model.quad)
    assert back.stats == model.stats
    text = path.read_text()
    assert '"basis"' in text and '"x^2"' in text


def test_sample_validation():
    with pytest.raises(ParameterError):
        CalibrationSample((0, 0, float("nan")), (0, 0, 0), 0.0)


@pytest.fixture(scope="module")
def small_grid():
    scene = make_scene("plate", 4)
    grid = GridSpec(n=2, size=4.0, samples=3, settle=0.3)
    return grid, *collect_grid(scene, grid, seed=2)


def test_collect_small_grid(small_grid, tmp_path):
    grid, samples, log = small_grid
    assert len(samples) == 8 * 3
    robots = {tuple(np.round(p, 6)) for p in grid.points()}
    assert len(robots) == 8
    per_point = np.bincount([s.point for s in samples])
    assert per_point.tolist() == [3] * 8
    # robot positions sit on the commanded grid points up to the robot noise
    pts = grid.points()
    for s in samples:
        assert np.linalg.norm(np.array(s.robot) - pts[s.point]) < 0.1
    path = tmp_path / "s.csv"
    write_samples_csv(path, samples)
    assert read_samples_csv(path) == samples


def test_grid_snake_order():
    pts = GridSpec().points()
    assert len(pts) == 125
    steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    assert np.allclose(steps, 10.0)


def test_grid_range_checked():
    with pytest.raises(ParameterError):
        collect_grid(make_scene("plate", 0), GridSpec(center=(20.0, 0, 200)))


def test_collect_aborts_when_lost():
    grid = GridSpec(n=2, size=20.0, samples=2, settle=0.1, speed=200.0)
    with pytest.raises(TrackingLostError, match="grid point"):
        collect_grid(make_scene("plate", 4), grid, seed=1)
