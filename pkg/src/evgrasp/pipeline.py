"""End-to-end grasping runs on the simulator.

``run_model_based``: scan, corner events, multi-view depth, point-cloud
clustering, cube registration, direct pose goal, grasp.

``run_model_free``: scan for a frozen depth map, mean-shift segmentation of
a short burst, then per object a translate/rotate servo on corner evidence
and a principal-axis grasp.

Both return one metrics row per ground-truth object (in scene order) plus
per-stage error records, and optionally write every artifact to a directory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from evgrasp import io
from evgrasp.emvs import build_dsi, extract_depth, to_point_cloud
from evgrasp.events import (CameraModel, EventStream, Pose, Scene, Trajectory, backproject_pixels,
                            look_down_pose, rot_z, wrap90)
from evgrasp.evaluation import (GraspMetrics, Limits, evaluate_grasp, failed_metrics, grasp_quality,
                                report_rows, success_sign, axis_difference)
from evgrasp.grasp import (GripperModel, OrientationUndefinedError, extent_along, plan_grasp,
                           principal_axis, robust_orientation)
from evgrasp.mems import EmptyStreamError, segment
from evgrasp.pointcloud import (RegistrationError, euclidean_cluster, merge_nearby, register_model,
                                remove_outliers)
from evgrasp.scenario import Scenario
from evgrasp.servoing import (KinematicPlant, Phase, ServoState, TargetLostError, TRACE_HEADER,
                              TraceRow, evs_step, harris_corner_events, image_motion, mask_to_object,
                              pbvs_target, robust_centroid, trace_row)
from evgrasp.simulator import filter_noise, generate_events, inject_noise


GRASP_HEADER = ["object_id", "cx", "cy", "theta_deg", "depth_m", "feasible"]


class PipelineError(RuntimeError):
    """A stage failed for one object."""


@dataclass
class StageError:
    stage: str
    item: str
    message: str


@dataclass
class PickOutcome:
    object_id: int
    metrics: GraspMetrics
    grip: Pose


@dataclass
class RunResult:
    scenario: Scenario
    rows: list = field(default_factory=list)  # GraspMetrics per ground-truth object
    errors: list = field(default_factory=list)
    # (cluster, cx, cy, closing heading deg, descent below the camera m, feasible)
    grasps: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    n_clusters: int = 0

    @property
    def failed(self) -> bool:
        return bool(self.errors) or any(r.error for r in self.rows)

    def success_rate(self) -> float:
        return float(np.mean([r.SS for r in self.rows])) if self.rows else float("nan")


class Artifacts:
    """Writes named artifacts under ``out`` (no-op when ``out`` is None)."""

    def __init__(self, out):
        self.out = Path(out) if out is not None else None
        self.written: list[str] = []
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path | None:
        if self.out is None:
            return None
        self.written.append(name)
        return self.out / name


# ------------------------------------------------------------ simulation

def simulate_pick(scene: Scene, remaining: list[int], grip_xy, grip_yaw: float, grip_z: float,
                  feasible: bool, lim: Limits) -> PickOutcome | None:
    """Close the gripper at ``grip_xy`` on the remaining object under it.

    Returns None when the grasp centre lies outside every remaining
    footprint.  Contact model: the fingers push the object along the
    closing axis until its centre is between them and turn its long axis
    onto the pad axis.  A grasp the aperture cannot take leaves the object
    untouched and fails.
    """
    grip_xy = np.asarray(grip_xy, dtype=float)
    dist = [float(np.hypot(*(scene.boxes[i].center[:2] - grip_xy))) for i in remaining]
    hits = [(d, i) for d, i in zip(dist, remaining) if d <= scene.boxes[i].footprint_radius()]
    if not hits:
        return None
    oid = min(hits)[1]
    box = scene.boxes[oid]
    P_obj = Pose.from_xyz_yaw(*box.center, box.long_axis_yaw)
    P_grip = Pose.from_xyz_yaw(grip_xy[0], grip_xy[1], grip_z, grip_yaw)
    if not feasible:
        m = evaluate_grasp(P_grip, P_obj, P_obj, lim)
        nan = float("nan")
        return PickOutcome(oid, GraspMetrics(m.e_gp, m.e_gr, 0, nan, nan, 0.0,
                                             "grasp infeasible for the gripper aperture"), P_grip)
    n = np.array([math.cos(math.radians(grip_yaw + 90.0)), math.sin(math.radians(grip_yaw + 90.0))])
    along = float((box.center[:2] - grip_xy) @ n)
    moved = box.center.copy()
    moved[:2] -= along * n
    turn = float(wrap90(grip_yaw - box.long_axis_yaw))
    P_after = Pose.from_xyz_yaw(*moved, box.long_axis_yaw + turn)
    return PickOutcome(oid, evaluate_grasp(P_grip, P_obj, P_after, lim), P_grip)


def replay_grasps(scene: Scene, grasps, camera_z: float, lim: Limits = Limits()) -> list[GraspMetrics]:
    """Execute recorded grasps in order on ``scene``; one metrics row per object.

    Each grasp is ``(id, cx, cy, theta_deg, depth_m, feasible)`` with ``theta_deg``
    the closing heading and ``depth_m`` the descent below a camera at ``camera_z``.
    """
    remaining = list(range(len(scene.boxes)))
    rows: dict[int, GraspMetrics] = {}
    for g in grasps:
        _, cx, cy, theta, depth, feasible = (float(v) for v in g)
        pick = simulate_pick(scene, remaining, (cx, cy), float(wrap90(theta - 90.0)), camera_z - depth,
                             bool(feasible), lim)
        if pick is None:
            continue
        rows[pick.object_id] = pick.metrics
        remaining.remove(pick.object_id)
    return [rows.get(i, failed_metrics("object not grasped")) for i in range(len(scene.boxes))]


def in_workspace(xy, bounds) -> bool:
    x0, x1, y0, y1 = bounds
    return x0 <= xy[0] <= x1 and y0 <= xy[1] <= y1


def scan_events(sc: Scenario, scene: Scene, cam: CameraModel, traj: Trajectory) -> EventStream:
    ev = generate_events(scene, traj, cam, dt=sc.scan.dt_us, seed=sc.seed)
    return _denoise(sc, ev, sc.seed)


def _denoise(sc: Scenario, ev: EventStream, seed: int) -> EventStream:
    if sc.noise.rate_hz > 0:
        ev = inject_noise(ev, sc.noise.rate_hz, seed)
        ev = filter_noise(ev, sc.noise.filter_window_us, sc.noise.filter_radius)
    return ev


def depth_stage(sc: Scenario, ev: EventStream, traj: Trajectory, cam: CameraModel, art: Artifacts):
    h = sc.harris
    safe = harris_corner_events(ev, h.window_us, h.patch, h.k, h.threshold)
    e = sc.emvs
    dsi = build_dsi(safe, traj, cam, e.z_min, e.z_max, e.n_z)
    dm = extract_depth(dsi, None, e.relative, e.nms_radius, e.local_radius, e.floor)
    cloud = to_point_cloud(dm, cam, dsi.ref_pose)
    if (p := art.path("scan_events.csv")) is not None:
        io.write_events(ev, p)
        io.write_events(safe, art.path("corner_events.csv"))
        io.write_depth_map(dm.depth, dm.confidence, art.path("depth_map.csv"))
        io.write_cloud(cloud, art.path("cloud.csv"))
    return safe, dsi, dm, cloud


def _finish(res: RunResult, art: Artifacts, outcomes: dict, scene: Scene) -> RunResult:
    n = len(scene.boxes)
    res.rows = [outcomes[i].metrics if i in outcomes else failed_metrics("object not grasped")
                for i in range(n)]
    if (p := art.path("metrics.csv")) is not None:
        io.write_rows(p, ["scenario", "object_id", "e_gp_cm", "e_gr_deg", "SS", "D_P_cm", "D_R_deg",
                          "Q_G"], report_rows(res.scenario.name, res.rows))
        io.write_rows(art.path("grasps.csv"), GRASP_HEADER, res.grasps, exact=True)
        io.write_rows(art.path("errors.csv"), ["stage", "item", "message"],
                      [[e.stage, e.item, e.message] for e in res.errors])
        for k, rows in res.traces.items():
            io.write_rows(art.path(f"servo_trace_{k}.csv"), TRACE_HEADER, [r.as_list() for r in rows])
    return res


# ------------------------------------------------------------ model-based

def run_model_based(sc: Scenario, out=None) -> RunResult:
    art = Artifacts(out if out is not None else sc.output)
    res = RunResult(sc)
    scene = sc.build_scene()
    cam = sc.camera.build()
    traj = sc.scan_trajectory()
    lim = sc.grasp.limits
    ev = scan_events(sc, scene, cam, traj)
    _, _, _, cloud = depth_stage(sc, ev, traj, cam, art)
    c = sc.cloud
    z0, z1 = c.z_range
    cloud = cloud[(cloud[:, 2] >= z0) & (cloud[:, 2] <= z1)]
    kept = remove_outliers(cloud, c.outlier_k, c.outlier_max_dist).points
    clusters = euclidean_cluster(kept, c.cluster_radius, c.min_points) if len(kept) else []
    res.n_clusters = len(clusters)
    if (p := art.path("object_clusters.csv")) is not None:
        io.write_rows(p, ["cluster", "x", "y", "z"],
                      [[k, *pt] for k, cl in enumerate(clusters) for pt in cl])
    remaining = list(range(len(scene.boxes)))
    outcomes: dict[int, PickOutcome] = {}
    home = traj.interpolate(traj.t_start)
    plant = KinematicPlant(*home_xyz_yaw(home))
    for k, cl in enumerate(clusters):
        if not remaining:
            res.errors.append(StageError("association", f"cluster {k}", "no ground-truth object left"))
            continue
        try:
            corners = merge_nearby(cl, c.corner_merge)
            reg = register_model(corners)
            if (p := art.path(f"transform_{k}.csv")) is not None:
                T = reg.transform
                io.write_transform(T.R, T.t, T.c, T.mse, p)
            if not in_workspace(reg.centroid, sc.grasp.workspace):
                msg = f"object at ({reg.centroid[0]:.3f}, {reg.centroid[1]:.3f}) outside the workspace"
                nearest = _nearest(scene, remaining, reg.centroid[:2])
                if nearest is not None:
                    outcomes[nearest] = PickOutcome(nearest, failed_metrics(msg), Pose.identity())
                    remaining.remove(nearest)
                raise PipelineError(msg)
            target = pbvs_target(reg.object_pose(), sc.grasp.grasp_offset)
            plant.move_to(target)
            closing = reg.yaw + 90.0
            extent = extent_along(corners[:, :2], closing)
            top = float(corners[:, 2].max())
            grasp = plan_grasp((plant.x, plant.y), reg.yaw, plant.z - top, extent, sc.grasp.gripper)
            res.grasps.append([k, plant.x, plant.y, float(wrap90(closing)), grasp.depth, int(grasp.feasible)])
            pick = simulate_pick(scene, remaining, (plant.x, plant.y), plant.yaw, plant.z - grasp.depth,
                                 grasp.feasible, lim)
            if pick is None:
                raise PipelineError("grasp closed on no object")
        except (RegistrationError, PipelineError) as exc:
            res.errors.append(StageError("register" if isinstance(exc, RegistrationError) else "grasp",
                                         f"cluster {k}", str(exc)))
            plant.move_to(home_pose(home))
            continue
        outcomes[pick.object_id] = pick
        remaining.remove(pick.object_id)
        plant.move_to(home_pose(home))
    return _finish(res, art, outcomes, scene)


def _nearest(scene: Scene, remaining: list[int], xy) -> int | None:
    if not remaining:
        return None
    d = [np.hypot(*(scene.boxes[i].center[:2] - xy)) for i in remaining]
    k = int(np.argmin(d))
    return remaining[k] if d[k] <= scene.boxes[remaining[k]].footprint_radius() + 0.05 else None


def home_xyz_yaw(pose: Pose) -> tuple[float, float, float, float]:
    c = pose.inverse().t
    yaw = math.degrees(math.atan2(pose.R.T[1, 0], pose.R.T[0, 0]))
    return float(c[0]), float(c[1]), float(c[2]), yaw


def home_pose(pose: Pose) -> Pose:
    x, y, z, yaw = home_xyz_yaw(pose)
    return Pose.from_xyz_yaw(x, y, z, yaw)


# ------------------------------------------------------------- model-free

def camera_pose(plant: KinematicPlant) -> Pose:
    return look_down_pose(plant.x, plant.y, plant.z, plant.yaw)


def burst(scene: Scene, cam: CameraModel, plant: KinematicPlant, distance: float, duration: int,
          samples: int, t0: int, seed: int, phase: float = 45.0) -> EventStream:
    """Events from a small closed square camera motion centred on the plant pose.

    The path is the same at every call so any direction bias in the events
    is constant from one observation to the next.
    """
    a = np.radians(plant.yaw + phase)
    u = distance * np.array([math.cos(a), math.sin(a)])
    v = distance * np.array([-math.sin(a), math.cos(a)])
    base = np.array([plant.x, plant.y])
    pts = [base + (su * u + sv * v) / 2 for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1), (-1, -1))]
    poses = [look_down_pose(p[0], p[1], plant.z, plant.yaw) for p in pts]
    times = [t0 + (duration * i) // 4 for i in range(5)]
    return generate_events(scene, Trajectory(times, poses), cam, dt=max(1, duration // samples), seed=seed)


def object_depth(dm, members: np.ndarray, fallback: float, radius: float = 8.0) -> float:
    """Median frozen depth of valid depth-map pixels near the object's members."""
    px = dm.pixels()
    if len(px) == 0:
        return fallback
    d, _ = cKDTree(members).query(px.astype(float), k=1)
    near = px[d <= radius]
    vals = dm.depth[near[:, 1], near[:, 0]] if len(near) else dm.depth[px[:, 1], px[:, 0]]
    return float(np.median(vals))


def segmentation_stream(sc: Scenario, max_events: int = 0) -> EventStream:
    """Labelled burst seen from the scan's start pose, optionally cut to its earliest events."""
    scene, cam, traj = sc.build_scene(), sc.camera.build(), sc.scan_trajectory()
    x, y, z, yaw = home_xyz_yaw(traj.interpolate(traj.t_start))
    m = sc.mems
    ev = burst(scene, cam, KinematicPlant(x, y, z, yaw), m.burst_distance, m.burst_duration_us, 5, 0,
               sc.seed)
    ev = _denoise(sc, ev, sc.seed + 1)
    if max_events and len(ev) > max_events:
        ev = ev.subset(np.arange(max_events))
    return ev


@dataclass
class Observation:
    events: EventStream
    target_xy: np.ndarray
    centroid: np.ndarray
    theta: float


def observe(sc: Scenario, scene: Scene, cam: CameraModel, plant: KinematicPlant, mask: np.ndarray,
            t0: int, seed: int) -> Observation:
    s = sc.servo
    ev = burst(scene, cam, plant, s.dither_distance, s.dither_duration_us, s.dither_samples, t0, seed)
    ev = _denoise(sc, ev, seed)
    if len(ev) == 0:
        raise TargetLostError("no events observed")
    xy = np.column_stack([ev.x, ev.y]).astype(float)
    d, _ = cKDTree(mask).query(xy, k=1)
    on_target = d <= s.mask_radius
    if not on_target.any():
        raise TargetLostError("target left the mask")
    target = np.unique(xy[on_target], axis=0)
    h = sc.harris
    # responses only depend on events inside the Sobel-extended patch, so this crop is exact
    near = ev.subset(d <= s.mask_radius + s.corner_radius + h.patch // 2 + 1)
    safe = harris_corner_events(near, h.window_us, h.patch, h.k, h.threshold)
    sale = mask_to_object(safe, target, s.corner_radius)
    save = robust_centroid(sale, s.decay_us, s.top_k, t_now=int(ev.t[-1]))
    try:
        theta = principal_axis(target)
    except OrientationUndefinedError as exc:
        raise TargetLostError(str(exc)) from None
    return Observation(ev, target, save.point, theta)


def orientation_samples(target_events: EventStream, chunks: int) -> list[float]:
    out = []
    for part in np.array_split(np.arange(len(target_events)), chunks):
        if len(part) >= 3:
            try:
                out.append(principal_axis(np.column_stack([target_events.x[part], target_events.y[part]])))
            except OrientationUndefinedError:
                pass
    return out


def servo_to_object(sc: Scenario, scene: Scene, cam: CameraModel, plant: KinematicPlant,
                    mask: np.ndarray, depth: float, seed: int):
    """Run the translate/rotate loop; returns the final observation and the trace."""
    s = sc.servo
    gains = s.gains
    P_d = np.array([cam.cx, cam.cy])
    trace: list[TraceRow] = []
    prev = (plant.x, plant.y, plant.yaw)
    state = None
    obs = None
    for step in range(s.max_steps):
        t_us = int(round(step * s.dt * 1e6))
        dx, dy, dyaw = plant.x - prev[0], plant.y - prev[1], plant.yaw - prev[2]
        u, v = image_motion(mask[:, 0], mask[:, 1], dx, dy, dyaw, depth, cam.fx, cam.cx, cam.cy, prev[2])
        mask = np.column_stack([u, v])
        prev = (plant.x, plant.y, plant.yaw)
        obs = observe(sc, scene, cam, plant, mask, t_us, seed * 7919 + step)
        mask = obs.target_xy
        phase = state.phase if state is not None else Phase.TRANSLATE
        state = ServoState(P_d, obs.centroid, 0.0, obs.theta, depth, phase)
        cmd, state = evs_step(state, gains, s.dt)
        trace.append(trace_row(step, t_us, state, cmd))
        if state.phase is Phase.ALIGNED:
            return obs, trace, mask
        plant.apply(cmd, s.dt)
    raise PipelineError(f"servo did not align within {s.max_steps} steps")


def run_model_free(sc: Scenario, out=None) -> RunResult:
    art = Artifacts(out if out is not None else sc.output)
    res = RunResult(sc)
    scene = sc.build_scene()
    cam = sc.camera.build()
    traj = sc.scan_trajectory()
    lim = sc.grasp.limits
    ev = scan_events(sc, scene, cam, traj)
    _, dsi, dm, _ = depth_stage(sc, ev, traj, cam, art)
    home = home_pose(dsi.ref_pose)
    hx, hy, hz, hyaw = home_xyz_yaw(dsi.ref_pose)
    plant = KinematicPlant(hx, hy, hz, hyaw, latency=sc.servo.latency)
    m = sc.mems
    seg_events = segmentation_stream(sc)
    outcomes: dict[int, PickOutcome] = {}
    if len(seg_events) == 0:
        # nothing moves in front of the camera: an empty scene, not a failure
        return _finish(res, art, outcomes, scene)
    try:
        clusters = segment(seg_events, m.config(len(seg_events)), sc.seed)
    except EmptyStreamError as exc:
        res.errors.append(StageError("segment", "scene", str(exc)))
        return _finish(res, art, outcomes, scene)
    res.n_clusters = clusters.N
    if (p := art.path("clusters.csv")) is not None:
        io.write_events(seg_events, art.path("segment_events.csv"))
        io.write_clusters(clusters.labels, clusters.centroids, clusters.counts, p, clusters.indices)
    fallback = float(np.nanmedian(dm.depth)) if dm.valid.any() else hz
    remaining = list(range(len(scene.boxes)))
    work = Scene([b for b in scene.boxes], scene.background, scene.side_shading)
    picked: set[int] = set()
    for k in range(clusters.N):
        members = clusters.members(k)
        if not remaining:
            res.errors.append(StageError("association", f"cluster {k}", "no ground-truth object left"))
            continue
        depth = object_depth(dm, members, fallback)
        result = None
        err = None
        for attempt in range(2):
            plant.move_to(home)
            try:
                result = servo_to_object(sc, work, cam, plant, members, depth, sc.seed * 31 + k * 2 + attempt)
                break
            except TargetLostError as exc:
                err = StageError("servo", f"cluster {k}", f"target lost (attempt {attempt + 1}): {exc}")
            except PipelineError as exc:
                err = StageError("servo", f"cluster {k}", str(exc))
                break
        res.traces[k] = result[1] if result else []
        if result is None:
            res.errors.append(err)
            nearest = _nearest(scene, remaining, _members_world(members, depth, cam, home))
            if nearest is not None:
                outcomes[nearest] = PickOutcome(nearest, failed_metrics(err.message), Pose.identity())
                remaining.remove(nearest)
            continue
        obs, trace, mask = result
        cpose = camera_pose(plant)
        center = backproject_pixels(obs.centroid[None], [depth], cam, cpose)[0]
        samples = orientation_samples(_target_events(obs, mask, sc.servo.mask_radius),
                                      sc.servo.orientation_chunks) or [obs.theta]
        theta_star = robust_orientation(samples)
        extent = extent_along(mask, theta_star + 90.0) * depth / cam.fx
        grasp = plan_grasp(obs.centroid, theta_star, depth, extent, sc.grasp.gripper, center)
        # image angle a corresponds to world heading yaw - a; the pads run along the principal axis
        grip_yaw = float(wrap90(plant.yaw - theta_star))
        if not in_workspace(center[:2], sc.grasp.workspace):
            msg = f"object at ({center[0]:.3f}, {center[1]:.3f}) outside the workspace"
            res.errors.append(StageError("navigate", f"cluster {k}", msg))
            nearest = _nearest(scene, remaining, center[:2])
            if nearest is not None:
                outcomes[nearest] = PickOutcome(nearest, failed_metrics(msg), Pose.identity())
                remaining.remove(nearest)
            continue
        res.grasps.append([k, float(center[0]), float(center[1]), float(wrap90(grip_yaw + 90.0)),
                           grasp.depth, int(grasp.feasible)])
        pick = simulate_pick(scene, remaining, center[:2], grip_yaw, hz - grasp.depth, grasp.feasible, lim)
        if pick is None:
            res.errors.append(StageError("grasp", f"cluster {k}", "grasp closed on no object"))
            continue
        if pick.metrics.error:
            res.errors.append(StageError("grasp", f"cluster {k}", pick.metrics.error))
        outcomes[pick.object_id] = pick
        remaining.remove(pick.object_id)
        picked.add(pick.object_id)
        work = Scene([b for i, b in enumerate(scene.boxes) if i not in picked],
                     scene.background, scene.side_shading)
    plant.move_to(home)
    return _finish(res, art, outcomes, scene)


def _target_events(obs: Observation, mask: np.ndarray, radius: float) -> EventStream:
    xy = np.column_stack([obs.events.x, obs.events.y]).astype(float)
    d, _ = cKDTree(mask).query(xy, k=1)
    return obs.events.subset(d <= radius)


def _members_world(members: np.ndarray, depth: float, cam: CameraModel, pose: Pose) -> np.ndarray:
    c = members.mean(axis=0)
    return backproject_pixels(c[None], [depth], cam, pose)[0][:2]


def run(sc: Scenario, out=None) -> RunResult:
    return run_model_based(sc, out) if sc.pipeline == "model-based" else run_model_free(sc, out)
