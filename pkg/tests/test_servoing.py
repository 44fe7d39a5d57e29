import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evgrasp.events import (Box, CameraModel, EventStream, Pose, Scene, Trajectory, look_down_pose,
                            project_points)
from evgrasp.servoing import (KinematicPlant, Phase, ServoGains, ServoState, TargetLostError,
                              VelocityCommand, evs_step, harris_corner_events, harris_response,
                              image_motion, mask_to_object, measure_target, pbvs_target,
                              phases_well_ordered, robust_centroid, servo_closed_loop, trace_row)
from evgrasp.simulator import generate_events

import oracles

W = H = 80


def raster_stream(img, last=None):
    """One event per set pixel of ``img`` in raster order, ``last`` moved to the end."""
    ys, xs = np.nonzero(img)
    pix = list(zip(xs.tolist(), ys.tolist()))
    if last is not None:
        pix.remove(last)
        pix.append(last)
    xs, ys = np.array(pix).T
    return EventStream(np.arange(len(pix)), xs, ys, np.ones(len(pix)), W, H)


# ----------------------------------------------------------------- harris

def test_straight_edge_has_no_corners():
    ev = EventStream(np.arange(60), np.arange(10, 70), np.full(60, 40), np.ones(60), W, H)
    assert len(harris_corner_events(ev)) == 0


def test_sweeping_edge_emits_corners_only_at_sensor_border():
    rows = np.arange(20, 60)
    ev = EventStream(np.repeat(rows - 20, W) * 1000, np.tile(np.arange(W), len(rows)),
                     np.repeat(rows, W), np.ones(len(rows) * W), W, H)
    c = harris_corner_events(ev)
    assert np.all((c.x < 6) | (c.x >= W - 6))  # where the edge meets the unset outside


def test_complete_edge_response_nonpositive():
    img = np.zeros((H, W), dtype=bool)
    img[40:, :] = True
    for x in (10, 40, 70):
        for y in (40, 41, 43):
            assert harris_response(raster_stream(img, last=(x, y)))[-1] <= 1e-15


L_IMG = np.zeros((H, W), dtype=bool)
L_IMG[20:60, 20:60] = True


@pytest.fixture(scope="module")
def dense_l():
    return oracles.dense_harris(L_IMG)


@pytest.mark.parametrize("p", [(20, 20), (21, 20), (25, 20), (40, 40), (59, 59), (30, 22)])
def test_response_matches_dense_oracle(dense_l, p):
    ev = raster_stream(L_IMG, last=p)
    assert harris_response(ev)[-1] == pytest.approx(dense_l[p[1], p[0]], abs=1e-12)


def test_l_junction_corner_at_junction(dense_l):
    ev = raster_stream(L_IMG, last=(20, 20))
    region = dense_l[15:26, 15:26]
    r, c = np.unravel_index(np.argmax(region), region.shape)
    peak = np.array([15 + c, 15 + r])
    assert np.abs(peak - [20, 20]).max() <= 1
    corners = harris_corner_events(ev)
    d = np.abs(np.column_stack([corners.x, corners.y]) - peak).max(axis=1)
    assert np.any(d <= 1)


def test_corner_events_are_input_events():
    cam = CameraModel.pinhole()
    scene = Scene([Box.on_table(0, 0, (0.12, 0.12, 0.12), 10.0)])
    traj = Trajectory.linear(look_down_pose(0, 0, 1.0), look_down_pose(0.03, 0.01, 1.0), 50_000, 10)
    ev = generate_events(scene, traj, cam, 1000)
    c = harris_corner_events(ev)
    key = set(zip(ev.t.tolist(), ev.x.tolist(), ev.y.tolist(), ev.p.tolist()))
    assert len(c) > 0 and all(e in key for e in zip(c.t.tolist(), c.x.tolist(), c.y.tolist(), c.p.tolist()))


def test_rotating_square_gives_four_tracks():
    cam = CameraModel.pinhole()
    box = Box.on_table(0, 0, (0.12, 0.12, 0.12), 0.0)
    traj = Trajectory.linear(look_down_pose(0, 0, 1.0, 0), look_down_pose(0, 0, 1.0, 60), 200_000, 20)
    c = harris_corner_events(generate_events(Scene([box]), traj, cam, 1000))
    top = box.corners()[box.corners()[:, 2] > box.center[2]]
    for t0 in range(0, 200_000, 40_000):
        sel = (c.t >= t0) & (c.t < t0 + 40_000)
        uv, _ = project_points(top, cam, traj.interpolate(t0 + 20_000))
        xy = np.column_stack([c.x[sel], c.y[sel]])
        d = np.linalg.norm(xy[:, None] - uv[None], axis=2)
        assert all((d[:, k] <= 3).sum() >= 5 for k in range(4))


@pytest.mark.parametrize("patch", [1, 4, 6])
def test_patch_validation(patch):
    with pytest.raises(ValueError):
        harris_response(EventStream([0], [1], [1], [1]), patch=patch)


# ---------------------------------------------------------------- masking

def two_object_corners():
    a = EventStream([0, 1, 2], [10, 12, 14], [10, 10, 11], [1, 1, 1])
    b = EventStream([0, 1], [100, 101], [50, 52], [1, 1])
    return a, b, EventStream.merge([a, b])


def test_mask_keeps_all_target_corners():
    a, _, _ = two_object_corners()
    assert mask_to_object(a, np.column_stack([a.x, a.y])).equals(a)


def test_mask_drops_other_object():
    a, _, both = two_object_corners()
    members = np.array([[11, 10], [13, 11]])
    assert mask_to_object(both, members).equals(a)


def test_mask_empty_safe():
    assert len(mask_to_object(EventStream.empty(), np.array([[1.0, 1.0]]))) == 0


# --------------------------------------------------------------- centroid

def peaks_stream(points, reps=10, t=1000):
    xs = np.repeat([p[0] for p in points], reps)
    ys = np.repeat([p[1] for p in points], reps)
    return EventStream(np.full(len(xs), t), xs, ys, np.ones(len(xs)))


def test_square_peaks_give_centre():
    res = robust_centroid(peaks_stream([(50, 50), (70, 50), (50, 70), (70, 70)]))
    assert np.allclose(res.point, [60, 60])


def test_single_peak():
    assert np.allclose(robust_centroid(peaks_stream([(33, 44)])).point, [33, 44])


def test_noisy_peaks_close_to_noiseless(rng):
    corners = [(50, 50), (80, 52), (48, 90), (82, 88)]
    base = robust_centroid(peaks_stream(corners, 20)).point
    pts = np.repeat(corners, 20, axis=0) + np.round(rng.normal(0, 1.0, (80, 2))).astype(int)
    noise = rng.integers(0, 200, (15, 2))
    allp = np.vstack([pts, noise])
    ev = EventStream(np.full(len(allp), 1000), allp[:, 0], allp[:, 1], np.ones(len(allp)))
    assert np.linalg.norm(robust_centroid(ev).point - base) <= 2.0


def test_save_inside_peak_hull(rng):
    for _ in range(10):
        pts = rng.integers(20, 200, (6, 2))
        res = robust_centroid(peaks_stream(pts.tolist(), 5))
        lo, hi = res.peaks.min(axis=0), res.peaks.max(axis=0)
        assert np.all(res.point >= lo - 1e-9) and np.all(res.point <= hi + 1e-9)


def test_empty_window_is_target_lost():
    with pytest.raises(TargetLostError):
        robust_centroid(EventStream.empty())
    with pytest.raises(TargetLostError):
        robust_centroid(peaks_stream([(5, 5)], t=0), decay=10.0, t_now=10_000)


# ---------------------------------------------------------------- control

def state(ep=(0.0, 0.0), eth=0.0, depth=0.8, phase=Phase.TRANSLATE):
    return ServoState(np.array([100.0, 100.0]), np.array([100.0, 100.0]) - ep, eth, 0.0, depth, phase)


def test_zero_error_is_aligned():
    cmd, st_ = evs_step(state(), ServoGains(), 0.1)
    assert cmd.is_zero() and st_.phase is Phase.ALIGNED


def test_error_definitions():
    s = ServoState([10.0, 20.0], [4.0, 30.0], 80.0, -60.0, 1.0)
    assert np.array_equal(s.e_p, [6.0, -10.0]) and s.e_theta == pytest.approx(-40.0)


def test_rotation_clamp():
    cmd, st_ = evs_step(state(eth=30.0), ServoGains(w_max=10.0), 0.1)
    assert st_.phase is Phase.ROTATE and cmd.v_r == 10.0 and cmd.v_f == cmd.v_l == 0.0


def test_translation_scaled_by_depth():
    g = ServoGains(k_p=2.0, focal=300.0, v_max=10.0)
    cmd, _ = evs_step(state(ep=(30.0, -15.0), depth=0.6), g, 0.1)
    assert cmd.v_l == pytest.approx(-2.0 * 0.6 / 300 * 30) and cmd.v_f == pytest.approx(2.0 * 0.6 / 300 * -15)
    fast, _ = evs_step(state(ep=(3000.0, 0.0)), ServoGains(v_max=0.05), 0.1)
    assert math.hypot(fast.v_f, fast.v_l) == pytest.approx(0.05)


def test_rotate_not_entered_before_position_tolerance():
    _, st_ = evs_step(state(ep=(5.0, 0.0), eth=30.0), ServoGains(pos_tol=3.0), 0.1)
    assert st_.phase is Phase.TRANSLATE


def test_invalid_inputs():
    with pytest.raises(ValueError):
        evs_step(state(), ServoGains(), 0.0)
    with pytest.raises(ValueError):
        ServoGains(k_p=0.0)
    with pytest.raises(ValueError):
        state(depth=0.0)


CAM = CameraModel.pinhole()


def run_loop(dx, dy, yaw0, target_yaw, gains=None, dt=0.1, steps=500):
    target = np.array([0.05, -0.03, 0.12])
    plant = KinematicPlant(target[0] + dx, target[1] + dy, 1.0, yaw0)
    return servo_closed_loop(plant, target, target_yaw, CAM, gains or ServoGains(), dt, steps), plant


def test_ten_pixel_offset_converges_monotonically():
    # 10 px at 0.88 m depth with focal 300; gain * dt = 0.5
    rows, _ = run_loop(-10 * 0.88 / 300, 0.0, 0.0, 0.0, ServoGains(k_p=5.0), dt=0.1, steps=100)
    e = [math.hypot(r.e_px, r.e_py) for r in rows if r.phase is Phase.TRANSLATE]
    assert e[0] == pytest.approx(10.0, abs=1e-6)
    assert all(b < a for a, b in zip(e, e[1:]))
    assert rows[-1].phase is Phase.ALIGNED and len(rows) <= 100


def test_unclamped_decay_is_geometric():
    g = ServoGains(k_p=4.0, v_max=100.0)
    rows, _ = run_loop(0.06, -0.04, 15.0, 15.0, g, dt=0.1)
    e = [math.hypot(r.e_px, r.e_py) for r in rows if r.phase is Phase.TRANSLATE]
    ratios = np.array(e[1:]) / np.array(e[:-1])
    assert np.allclose(ratios, 1 - g.k_p * 0.1, atol=1e-9)


@settings(max_examples=20)
@given(st.floats(-0.1, 0.1), st.floats(-0.1, 0.1), st.floats(-80, 80), st.floats(-89, 89))
def test_closed_loop_phases_and_convergence(dx, dy, yaw0, tyaw):
    rows, plant = run_loop(dx, dy, yaw0, tyaw)
    assert phases_well_ordered(rows)
    assert rows[-1].phase is Phase.ALIGNED
    uv, ang = measure_target(plant, [0.05, -0.03, 0.12], tyaw, CAM)
    assert np.linalg.norm(uv - CAM.principal_point) < ServoGains().pos_tol + 0.5


def test_phases_well_ordered_detects_regression():
    cmd = VelocityCommand()
    rows = [trace_row(0, 0, state(phase=Phase.ROTATE), cmd), trace_row(1, 1, state(phase=Phase.TRANSLATE), cmd)]
    assert not phases_well_ordered(rows)


def test_plant_latency_and_motion():
    p = KinematicPlant(0.0, 0.0, 1.0, 90.0, latency=1)
    p.apply(VelocityCommand(v_f=0.0, v_l=1.0), 0.5)
    assert (p.x, p.y) == (0.0, 0.0)
    p.apply(VelocityCommand(), 0.5)
    assert p.x == pytest.approx(0.0, abs=1e-12) and p.y == pytest.approx(0.5)


def test_image_motion_matches_projection():
    pose0 = look_down_pose(0.02, 0.01, 1.0, 25.0)
    P = np.array([[0.05, -0.04, 0.12], [-0.03, 0.02, 0.12]])
    uv0, z = project_points(P, CAM, pose0)
    pose1 = look_down_pose(0.02 + 0.01, 0.01 - 0.02, 1.0, 25.0 + 7.0)
    uv1, _ = project_points(P, CAM, pose1)
    u, v = image_motion(uv0[:, 0], uv0[:, 1], 0.01, -0.02, 7.0, float(z[0]), CAM.fx, CAM.cx, CAM.cy, 25.0)
    assert np.allclose(np.column_stack([u, v]), uv1, atol=1e-9)


# ------------------------------------------------------------------- PBVS

def test_pbvs_identity():
    T = pbvs_target(Pose.identity(), 0.2)
    assert np.allclose(T.position, [0, 0, 0.2]) and np.allclose(T.R, np.eye(3))


def test_pbvs_yaw():
    assert pbvs_target(Pose.from_xyz_yaw(0.1, 0.2, 0.05, 30.0)).yaw_deg == pytest.approx(30.0)


def test_pbvs_offset_composition(rng):
    for _ in range(20):
        obj = Pose.from_xyz_yaw(*rng.uniform(-0.5, 0.5, 3), rng.uniform(-180, 180))
        off = float(rng.uniform(0.05, 0.4))
        T = pbvs_target(obj, off)
        rel = obj.inverse() @ T
        assert np.allclose(rel.R, np.eye(3), atol=1e-12) and np.allclose(rel.t, [0, 0, off], atol=1e-12)
