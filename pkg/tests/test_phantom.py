import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octtrack.core import ContractError, OutOfSceneError, ParameterError, VolumeDims, VoxelPitch
from octtrack.phantom import (
    FovPose,
    MotionTrajectory,
    NoiseStream,
    WaypointTrajectory,
    load_scene,
    make_scene,
    midplane_csv,
    render_volume,
    sample_position,
    save_scene,
    trajectory_position,
)

P = VoxelPitch()
FOV = FovPose((0.0, 0.0, 0.0))


@pytest.fixture(scope="module")
def plate():
    return make_scene("plate", 7, amplitude=0.3)


@pytest.fixture(scope="module")
def tissue():
    return make_scene("tissue", 9, attenuation=0.5)


def ncc(a, b):
    a = a - a.mean()
    b = b - b.mean()
    return float((a * b).sum() / math.sqrt((a * a).sum() * (b * b).sum()))


def test_plate_amplitude(plate):
    assert np.ptp(plate.content) <= 0.3 + 1e-12
    with pytest.raises(ParameterError):
        make_scene("plate", 1, amplitude=0.5)


def test_scene_determinism(plate):
    again = make_scene("plate", 7, amplitude=0.3)
    assert np.array_equal(again.content, plate.content)
    assert not np.array_equal(make_scene("plate", 8).content, plate.content)


def test_tissue_attenuation(tissue):
    c = tissue.content
    assert c.min() >= 0 and c.max() <= 1
    k_surface = int(round(-tissue.origin[2] / tissue.spacing[2]))
    k2 = k_surface + int(round(2.0 / tissue.spacing[2]))
    ratio = c[:, :, k2].mean() / c[:, :, k_surface].mean()
    assert ratio == pytest.approx(math.exp(-1.0), rel=0.2)
    # nothing above the surface
    assert c[:, :, : k_surface - 1].max() == 0


def test_unknown_kind():
    with pytest.raises(ParameterError):
        make_scene("glass", 0)


def test_scene_roundtrip(tmp_path, tissue):
    path = tmp_path / "s.npz"
    save_scene(path, tissue)
    back = load_scene(path)
    assert back.kind == "tissue" and back.params == tissue.params
    assert np.array_equal(back.content, tissue.content)
    csv = midplane_csv(tissue).splitlines()
    assert len(csv) == tissue.content.shape[0]


def test_static_trajectory():
    tr = MotionTrajectory("static")
    for t in (0.0, 1.3, 59.9):
        assert np.array_equal(sample_position(tr, t), np.zeros(3))


def test_axial_triangle():
    tr = MotionTrajectory("axial", 25.0, noise=0.0)
    assert sample_position(tr, 0.6) == pytest.approx([0, 0, 15.0])
    assert sample_position(tr, 1.2) == pytest.approx([0, 0, 30.0])
    assert sample_position(tr, 2.4) == pytest.approx([0, 0, 0.0], abs=1e-9)


def test_lateral_diagonal_axis_speed():
    tr = MotionTrajectory("lateral-diagonal", 10.0, noise=0.0)
    d = sample_position(tr, 1.0) - sample_position(tr, 0.5)
    assert d / 0.5 == pytest.approx([10 / math.sqrt(2), 10 / math.sqrt(2), 0.0])


def test_trajectory_bounds():
    tr = MotionTrajectory("axial", 5.0, duration=2.0)
    with pytest.raises(ContractError):
        sample_position(tr, 2.5)
    with pytest.raises(ParameterError):
        MotionTrajectory("spiral")


def test_trajectory_noise_seeded():
    tr = MotionTrajectory("axial", 5.0, noise=0.01)
    a = sample_position(tr, 1.0, np.random.default_rng(3))
    b = sample_position(tr, 1.0, np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert np.linalg.norm(a - sample_position(tr, 1.0)) < 0.1


def test_waypoints():
    pts = [(0, 0, 0), (10, 0, 0), (10, 5, 0)]
    tr = WaypointTrajectory(pts, speed=5.0, dwell=1.0, noise=0.0)
    assert tr.arrivals.tolist() == [0.0, 3.0, 5.0]
    assert tr.duration == 6.0
    assert trajectory_position(tr, 0.5).tolist() == [0, 0, 0]
    assert trajectory_position(tr, 2.0) == pytest.approx([5, 0, 0])
    assert trajectory_position(tr, 5.5).tolist() == [10, 5, 0]


def test_noise_stream_deterministic():
    a = NoiseStream(4, 0.05, pool_size=1 << 16).draw((8, 8, 8))
    b = NoiseStream(4, 0.05, pool_size=1 << 16).draw((8, 8, 8))
    assert np.array_equal(a, b)
    f = NoiseStream(4, 0.05).draw((64, 64, 64), fresh=True)
    assert f.std() == pytest.approx(0.05, rel=0.02)


def test_render_repeatable(plate):
    a = render_volume(plate, (0, 0, -0.6), FOV)
    b = render_volume(plate, (0, 0, -0.6), FOV)
    assert np.array_equal(a.intensity, b.intensity)
    assert a.intensity.min() >= 0 and a.intensity.max() <= 1


def test_render_noise_seeded(plate):
    a = render_volume(plate, (0, 0, -0.6), FOV, noise=NoiseStream(1))
    b = render_volume(plate, (0, 0, -0.6), FOV, noise=NoiseStream(1))
    assert np.array_equal(a.intensity, b.intensity)


@pytest.mark.parametrize("kind", ["plate", "tissue"])
def test_render_lateral_shift(kind, plate, tissue):
    scene = plate if kind == "plate" else tissue
    off = np.array([0.3, -0.2, -0.6 if kind == "plate" else 0.8])
    a = render_volume(scene, off, FOV).intensity
    b = render_volume(scene, off + [P.dx, 0, 0], FOV).intensity
    # sample moved +x by one voxel: content appears one voxel further along +x
    assert ncc(np.roll(a, 1, axis=0)[1:-1], b[1:-1]) > 0.99


@settings(max_examples=10, deadline=None)
@given(st.integers(-3, 3), st.integers(-3, 3), st.integers(-20, 20))
def test_render_integer_shift_property(tissue, i, j, k):
    scene = tissue
    off = np.array([0.1, 0.2, 0.8])
    a = render_volume(scene, off, FOV).intensity
    b = render_volume(scene, off + np.array([i, j, k]) * P.as_array(), FOV).intensity
    m = 4
    core = (slice(m, -m), slice(m, -m), slice(25, -25))
    assert ncc(np.roll(a, (i, j, k), axis=(0, 1, 2))[core], b[core]) > 0.99


def test_axial_offset_moves_surface(plate):
    def peak(v):
        return int(np.argmax(v.intensity.mean(axis=(0, 1))))

    base = peak(render_volume(plate, (0, 0, -0.6), FOV))
    moved = peak(render_volume(plate, (0, 0, -0.6 + 10 * P.dz), FOV))
    # +z sample motion pushes the surface 10 voxels deeper (larger index)
    assert moved - base == 10


def test_out_of_scene(plate):
    with pytest.raises(OutOfSceneError):
        render_volume(plate, (0, 0, 0), FovPose((100.0, 0.0, 0.0)))
    with pytest.raises(OutOfSceneError):
        render_volume(plate, (0, 0, 10.0), FOV)


def test_small_dims(plate):
    v = render_volume(plate, (0, 0, -0.1), FOV, VolumeDims(8, 8, 64))
    assert v.intensity.shape == (8, 8, 64)
