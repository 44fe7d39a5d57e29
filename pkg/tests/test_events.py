import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evgrasp.events import (Box, CameraModel, Event, EventStream, Pose, ProjectionError, Scene,
                            Trajectory, backproject_pixels, look_down_pose, project_point,
                            project_points, rot_z, wrap90, wrap180)
from evgrasp.simulator import background_noise, filter_noise, generate_events, inject_noise

import oracles


def small_scene():
    return Scene([Box.on_table(0.0, 0.0, (0.15, 0.10, 0.12), 20.0)], side_shading=-0.7)


def scan(x0=-0.02, x1=0.03, n=20, dur=20_000, height=1.0):
    return Trajectory.linear(look_down_pose(x0, 0.0, height), look_down_pose(x1, 0.01, height), dur, n)


# ------------------------------------------------------------- projection

def test_project_on_axis_hits_principal_point():
    cam = CameraModel.pinhole(300.0)
    u, v, z = project_point([0.0, 0.0, 2.5], cam, Pose.identity())
    assert (u, v, z) == pytest.approx((cam.cx, cam.cy, 2.5))


def test_project_unit_focal():
    cam = CameraModel.pinhole(1.0, cx=10.0, cy=5.0, width=20, height=10)
    u, v, _ = project_point([1.0, 0.0, 1.0], cam, Pose.identity())
    assert (u, v) == pytest.approx((11.0, 5.0))


def test_point_behind_camera_rejected():
    with pytest.raises(ProjectionError):
        project_point([0.0, 0.0, -1.0], CameraModel.pinhole(), Pose.identity())


def random_pose(rng):
    from scipy.spatial.transform import Rotation
    R = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
    return Pose(R, rng.uniform(-1, 1, 3))


def test_projection_matches_homogeneous_oracle(rng):
    cam = CameraModel.pinhole(320.0, cx=170.0, cy=128.0)
    for _ in range(50):
        pose = random_pose(rng)
        T = np.eye(4)
        T[:3, :3], T[:3, 3] = pose.R, pose.t
        P = rng.uniform(-2, 2, 3)
        Xc = (T @ np.append(P, 1.0))[:3]
        if Xc[2] <= 0.1:
            continue
        uvw = cam.K @ Xc
        u, v, z = project_point(P, cam, pose)
        assert (u, v, z) == pytest.approx((uvw[0] / uvw[2], uvw[1] / uvw[2], Xc[2]), abs=1e-9)


def test_backproject_inverts_projection(rng):
    cam = CameraModel.pinhole()
    pose = look_down_pose(0.1, -0.2, 1.0, 33.0)
    P = np.column_stack([rng.uniform(-0.3, 0.3, (20, 2)), rng.uniform(0, 0.2, 20)])
    uv, z = project_points(P, cam, pose)
    assert np.allclose(backproject_pixels(uv, z, cam, pose), P, atol=1e-12)


def test_camera_model_invariants():
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), contrast_threshold=0.0)
    with pytest.raises(ValueError):
        CameraModel(np.diag([-1.0, 1.0, 1.0]))
    K = np.eye(3)
    K[1, 0] = 0.5
    with pytest.raises(ValueError):
        CameraModel(K)


def test_pose_is_proper_rotation():
    p = look_down_pose(0.0, 0.0, 1.0, 45.0)
    assert p.is_valid()
    assert np.isclose(np.linalg.det(p.R), 1.0)
    assert not Pose(np.diag([1.0, 1.0, -1.0])).is_valid()


@given(st.floats(-1e4, 1e4, allow_nan=False))
def test_wrap_ranges(a):
    assert -180.0 < float(wrap180(a)) <= 180.0
    assert -90.0 < float(wrap90(a)) <= 90.0
    assert math.isclose(math.cos(math.radians(2 * float(wrap90(a)))), math.cos(math.radians(2 * a)),
                        abs_tol=1e-9)


def test_trajectory_invariants():
    P = Pose.identity()
    with pytest.raises(ValueError):
        Trajectory([0], [P])
    with pytest.raises(ValueError):
        Trajectory([0, 0], [P, P])
    with pytest.raises(ValueError):
        Trajectory([5, 3], [P, P])


def test_trajectory_interpolates_linearly():
    tr = Trajectory.linear(look_down_pose(0, 0, 1, 0), look_down_pose(0.2, 0, 1, 40), 1000, 2)
    mid = tr.interpolate(500)
    c = -mid.R.T @ mid.t
    assert np.allclose(c, [0.1, 0.0, 1.0])
    assert np.allclose(mid.R, look_down_pose(0.1, 0.0, 1.0, 20.0).R, atol=1e-12)
    with pytest.raises(ValueError):
        tr.interpolate(2000)


def test_scene_rejects_overlap_and_bad_dims():
    with pytest.raises(ValueError):
        Scene([Box.on_table(0, 0, (0.1, 0.1, 0.1)), Box.on_table(0.05, 0, (0.1, 0.1, 0.1))])
    with pytest.raises(ValueError):
        Box.on_table(0, 0, (0.1, 0.0, 0.1))


# -------------------------------------------------------------- simulator

def test_static_camera_static_scene_is_silent():
    P = look_down_pose(0.0, 0.0, 1.0)
    ev = generate_events(small_scene(), Trajectory([0, 10_000], [P, P]), CameraModel.pinhole(), 1000)
    assert len(ev) == 0


def test_single_pixel_step_of_exactly_C_gives_one_event():
    # the camera slides so that one pixel changes from background to a
    # top face whose level is exactly +C above the background
    cam = CameraModel.pinhole(100.0, width=3, height=3, contrast_threshold=0.15)
    scene = Scene([Box.on_table(0.0, 0.0, (0.2, 0.2, 0.1), 0.0, 0.15)], background=0.0)
    # pixel (1, 1) sees the box; start with the camera far away sideways
    P0 = look_down_pose(1.0, 0.0, 1.0)
    P1 = look_down_pose(0.0, 0.0, 1.0)
    ev = generate_events(scene, Trajectory([0, 1000], [P0, P1]), cam, 1000)
    centre = ev.subset((ev.x == 1) & (ev.y == 1))
    assert len(centre) == 1 and centre[0].p == 1


def test_empty_trajectory_rejected():
    with pytest.raises(ValueError):
        Trajectory([], [])


def test_nonpositive_dt_rejected():
    with pytest.raises(ValueError):
        generate_events(small_scene(), scan(), CameraModel.pinhole(), 0)


def test_small_sensor_matches_brute_force_simulator():
    cam = CameraModel.pinhole(20.0, width=8, height=8, contrast_threshold=0.15)
    scene = Scene([Box.on_table(0.0, 0.0, (0.15, 0.10, 0.12), 25.0, 0.6)], side_shading=-0.7)
    traj = Trajectory.linear(look_down_pose(-0.06, 0.02, 1.0, 0.0), look_down_pose(0.08, -0.03, 1.0, 10.0),
                             2000, 3)
    ev = generate_events(scene, traj, cam, 1000)
    ref = oracles.brute_events(scene, traj, cam, 1000)
    assert len(ref) > 0
    got = list(zip(ev.t.tolist(), ev.x.tolist(), ev.y.tolist(), ev.p.tolist()))
    assert got == ref


def test_generation_is_deterministic_and_valid():
    cam = CameraModel.pinhole()
    a = generate_events(small_scene(), scan(), cam, 1000, seed=4, noise_rate_hz=20.0)
    b = generate_events(small_scene(), scan(), cam, 1000, seed=4, noise_rate_hz=20.0)
    assert a.equals(b) and np.array_equal(a.labels, b.labels)
    a.validate()
    assert np.all(np.diff(a.t) >= 0)
    assert a.x.min() >= 0 and a.x.max() < cam.width and a.y.min() >= 0 and a.y.max() < cam.height


def test_stream_order_is_t_then_y_then_x():
    ev = generate_events(small_scene(), scan(), CameraModel.pinhole(), 1000)
    key = ev.t * 10**8 + ev.y * 10**4 + ev.x
    assert np.all(np.diff(key) >= 0)


@pytest.mark.parametrize("C", [0.05, 0.1, 0.15, 0.3])
def test_doubling_threshold_never_adds_events(C):
    n1 = len(generate_events(small_scene(), scan(), CameraModel.pinhole(contrast_threshold=C), 1000))
    n2 = len(generate_events(small_scene(), scan(), CameraModel.pinhole(contrast_threshold=2 * C), 1000))
    assert n2 <= n1


def test_labels_mark_objects_and_noise():
    scene = Scene([Box.on_table(-0.15, 0.0, (0.1, 0.07, 0.08)), Box.on_table(0.15, 0.0, (0.15, 0.1, 0.1))])
    ev = generate_events(scene, scan(), CameraModel.pinhole(), 1000, seed=1, noise_rate_hz=5.0)
    assert set(np.unique(ev.labels)) == {-1, 0, 1}


def test_background_noise_rate():
    n = len(background_noise(346, 260, 0, 1_000_000, 2.0, seed=3))
    expect = 2.0 * 346 * 260
    assert abs(n - expect) < 5 * math.sqrt(expect)


# ---------------------------------------------------------------- filter

def test_isolated_event_removed():
    ev = EventStream.from_events([Event(10, 10, 100, 1)])
    assert len(filter_noise(ev)) == 0


def test_filter_rejects_nonpositive_window():
    with pytest.raises(ValueError):
        filter_noise(EventStream.empty(), 0)


def test_filter_on_clean_edge_sweep_matches_all_pairs_oracle():
    ev = generate_events(small_scene(), scan(), CameraModel.pinhole(), 1000)
    ev = ev.subset(np.arange(min(len(ev), 1500)))
    got = filter_noise(ev, 5000, 1)
    keep = oracles.brute_filter(ev.t.tolist(), ev.x.tolist(), ev.y.tolist(), 5000, 1)
    assert got.equals(ev.subset(keep))
    # the clean sweep loses only the first event of each locality
    assert keep.mean() > 0.9


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(100, 5000))
def test_filter_matches_oracle_on_random_streams(seed, r, window):
    rng = np.random.default_rng(seed)
    n = 150
    t = np.sort(rng.integers(0, 20_000, n))
    x = rng.integers(0, 12, n)
    y = rng.integers(0, 10, n)
    ev = EventStream(t, x, y, np.ones(n), 12, 10)
    got = filter_noise(ev, window, r)
    keep = oracles.brute_filter(t.tolist(), x.tolist(), y.tolist(), window, r)
    assert got.equals(ev.subset(keep))
    # subsequence of the input
    assert len(got) <= len(ev)


def test_filter_removes_injected_noise():
    clean = generate_events(small_scene(), scan(dur=100_000), CameraModel.pinhole(), 1000)
    noisy = inject_noise(clean, 2.0, seed=9)  # the low-light level used by the pipelines
    out = filter_noise(noisy, 5000, 1)
    n_noise_in = int((noisy.labels == -1).sum())
    n_noise_out = int((out.labels == -1).sum())
    assert n_noise_in > 500
    assert 1 - n_noise_out / n_noise_in >= 0.9


def test_merge_restores_order():
    a = EventStream([5, 9], [1, 2], [0, 0], [1, 1], 4, 4)
    b = EventStream([5, 7], [0, 3], [0, 1], [-1, 1], 4, 4)
    m = EventStream.merge([a, b])
    assert m.t.tolist() == [5, 5, 7, 9] and m.x.tolist() == [0, 1, 3, 2]
