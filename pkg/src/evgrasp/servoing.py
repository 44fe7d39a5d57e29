"""Event surfaces, e-Harris corners, robust centroid and the velocity servo.

The model-free path watches four event surfaces: all events (SAE), corner
events (SAFE), corner events of the target object (SALE) and a single
virtual robust-centroid event (SAVE).  A proportional controller drives the
eye-in-hand camera first in translation until the centroid sits at the
desired pixel, then in rotation until the object's principal axis matches
the desired angle.  The model-based path instead computes a pre-grasp pose
directly from the registered object pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.ndimage import gaussian_filter, maximum_filter
from scipy.spatial import cKDTree

from evgrasp.events import EventStream, Pose, rot_z, wrap90
from evgrasp.simulator import PixelHistory

# ---------------------------------------------------------------- e-Harris

HARRIS_WINDOW_US = 20_000
HARRIS_PATCH = 7
HARRIS_K = 0.04
HARRIS_THRESHOLD = 0.5


def _sobel_operators(patch: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Linear maps from a flattened (patch+2)^2 surface to patch^2 Sobel gradients.

    Gradients are scaled so a unit step edge has magnitude 1.
    """
    n = patch + 2
    sx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float) / 4.0
    sy = sx.T
    Gx = np.zeros((n * n, patch * patch))
    Gy = np.zeros((n * n, patch * patch))
    for r in range(patch):
        for c in range(patch):
            col = r * patch + c
            for dr in range(3):
                for dc in range(3):
                    row = (r + dr) * n + (c + dc)
                    Gx[row, col] += sx[dr, dc]
                    Gy[row, col] += sy[dr, dc]
    return Gx, Gy, n


def _gaussian_window(patch: int, sigma: float | None = None) -> np.ndarray:
    sigma = patch / 6.0 if sigma is None else sigma
    r = np.arange(patch) - patch // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g).ravel()
    return w / w.sum()


def recency_patches(stream: EventStream, window: int, size: int,
                    history: PixelHistory | None = None) -> np.ndarray:
    """Binary surface around each event: (N, size*size) bool.

    A pixel is set when it holds an event of this stream, no later in stream
    order than the current one, whose timestamp lies in ``(t_i - window, t_i]``.
    Pixels outside the sensor read as unset.
    """
    n = len(stream)
    W, H = stream.width, stream.height
    pix = stream.y * W + stream.x
    hist = history if history is not None else PixelHistory(pix)
    # querying in (pixel, index) order keeps every probe array sorted, which
    # makes the binary searches cache friendly
    idx = np.lexsort((np.arange(n), pix))
    x, y, t = stream.x[idx], stream.y[idx], stream.t[idx]
    r = size // 2
    out = np.zeros((n, size * size), dtype=bool)
    col = 0
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            qx, qy = x + dx, y + dy
            ok = (qx >= 0) & (qx < W) & (qy >= 0) & (qy < H)
            sel = np.flatnonzero(ok)
            j = hist.latest(qy[sel] * W + qx[sel], idx[sel], inclusive=True)
            jj = np.maximum(j, 0)
            out[idx[sel], col] = (j >= 0) & (stream.t[jj] > t[sel] - window)
            col += 1
    return out


def harris_response(stream: EventStream, window: int = HARRIS_WINDOW_US, patch: int = HARRIS_PATCH,
                    k: float = HARRIS_K, chunk: int = 8192) -> np.ndarray:
    """Harris score ``det(M) - k tr(M)^2`` of the recency surface at every event."""
    if patch < 3 or patch % 2 == 0:
        raise ValueError("patch must be odd and >= 3")
    n = len(stream)
    if n == 0:
        return np.zeros(0)
    Gx, Gy, size = _sobel_operators(patch)
    w = _gaussian_window(patch)
    surf = recency_patches(stream, window, size)
    out = np.empty(n)
    for s in range(0, n, chunk):
        S = surf[s:s + chunk].astype(float)
        gx = S @ Gx
        gy = S @ Gy
        a = (gx * gx) @ w
        b = (gy * gy) @ w
        c = (gx * gy) @ w
        out[s:s + chunk] = a * b - c * c - k * (a + b) ** 2
    return out


def harris_corner_events(stream: EventStream, window: int = HARRIS_WINDOW_US,
                         patch: int = HARRIS_PATCH, k: float = HARRIS_K,
                         threshold: float = HARRIS_THRESHOLD) -> EventStream:
    """SAFE: the events whose Harris response exceeds ``threshold``."""
    if len(stream) == 0:
        return stream
    score = harris_response(stream, window, patch, k)
    return stream.subset(score > threshold * _response_scale(patch))


def _response_scale(patch: int) -> float:
    """Response of an ideal right-angle corner, so thresholds are patch-independent."""
    size = patch + 2
    surf = np.zeros((size, size), dtype=bool)
    surf[size // 2:, size // 2:] = True
    Gx, Gy, _ = _sobel_operators(patch)
    w = _gaussian_window(patch)
    S = surf.ravel().astype(float)
    gx, gy = S @ Gx, S @ Gy
    a, b, c = (gx * gx) @ w, (gy * gy) @ w, (gx * gy) @ w
    return float(a * b - c * c - HARRIS_K * (a + b) ** 2)


# ----------------------------------------------------- masking and centroid

class TargetLostError(RuntimeError):
    """No target corner evidence left in the decay window."""


def mask_to_object(safe: EventStream, members_xy: np.ndarray, radius: float = 4.0) -> EventStream:
    """SALE: corner events within ``radius`` px of some member of the target mask."""
    members_xy = np.asarray(members_xy, dtype=float).reshape(-1, 2)
    if len(safe) == 0 or len(members_xy) == 0:
        return safe.subset(np.zeros(len(safe), dtype=bool))
    tree = cKDTree(members_xy)
    d, _ = tree.query(np.column_stack([safe.x, safe.y]).astype(float), k=1)
    return safe.subset(d <= radius)


def cluster_mask(clusters, target_id: int) -> np.ndarray:
    """Member pixel coordinates of one MEMS cluster."""
    if not 0 <= target_id < clusters.N:
        raise ValueError(f"target {target_id} out of range (N = {clusters.N})")
    return clusters.members(target_id)


@dataclass
class CentroidResult:
    point: np.ndarray
    peaks: np.ndarray
    heat: np.ndarray = field(repr=False)


def robust_centroid(sale: EventStream, decay: float = 50_000.0, top_k: int = 4,
                    t_now: int | None = None, blur: float = 1.5, min_separation: int = 5,
                    horizon: float = 5.0) -> CentroidResult:
    """SAVE: unweighted mean of the ``top_k`` strongest peaks of a decaying heatmap.

    Each corner event adds ``exp(-(t_now - t) / decay)`` at its pixel; the
    map is blurred and local maxima at least ``min_separation`` px apart are
    ranked by height.  Events older than ``horizon * decay`` are ignored.
    """
    if len(sale) == 0:
        raise TargetLostError("no target corner events")
    t_now = int(sale.t[-1]) if t_now is None else t_now
    age = t_now - sale.t
    live = age <= horizon * decay
    if not live.any():
        raise TargetLostError("no target corner events in the decay window")
    heat = np.zeros((sale.height, sale.width))
    np.add.at(heat, (sale.y[live], sale.x[live]), np.exp(-age[live] / decay))
    if blur > 0:
        heat = gaussian_filter(heat, blur, mode="constant")
    peaks_mask = (heat == maximum_filter(heat, size=2 * min_separation + 1, mode="constant")) & (heat > 0)
    ys, xs = np.nonzero(peaks_mask)
    vals = heat[ys, xs]
    order = np.lexsort((xs, ys, -vals))[:top_k]
    peaks = np.column_stack([xs[order], ys[order]]).astype(float)
    return CentroidResult(peaks.mean(axis=0), peaks, heat)


# ----------------------------------------------------------------- control

class Phase(str, Enum):
    TRANSLATE = "TRANSLATE"
    ROTATE = "ROTATE"
    ALIGNED = "ALIGNED"


@dataclass
class ServoGains:
    """Proportional gains (1/s), clamps and tolerances."""

    k_p: float = 5.0
    k_r: float = 5.0
    v_max: float = 0.5  # m/s
    w_max: float = 60.0  # deg/s
    pos_tol: float = 3.0  # px
    ang_tol: float = 2.0  # deg
    focal: float = 300.0  # px

    def __post_init__(self):
        if self.k_p <= 0 or self.k_r <= 0:
            raise ValueError("gains must be positive")
        if self.pos_tol <= 0 or self.ang_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class VelocityCommand:
    """Camera-frame forward (image up), lateral (image right) and yaw rate."""

    v_f: float = 0.0
    v_l: float = 0.0
    v_r: float = 0.0

    @property
    def v_p(self) -> np.ndarray:
        return np.array([self.v_l, self.v_f])

    def is_zero(self) -> bool:
        return self.v_f == 0.0 and self.v_l == 0.0 and self.v_r == 0.0


@dataclass
class ServoState:
    P_d: np.ndarray
    P_a: np.ndarray
    theta_d: float
    theta_a: float
    depth: float
    phase: Phase = Phase.TRANSLATE

    def __post_init__(self):
        self.P_d = np.asarray(self.P_d, dtype=float)
        self.P_a = np.asarray(self.P_a, dtype=float)
        if self.depth <= 0:
            raise ValueError("depth must be positive")

    @property
    def e_p(self) -> np.ndarray:
        return self.P_d - self.P_a

    @property
    def e_theta(self) -> float:
        return float(wrap90(self.theta_d - self.theta_a))


def _clamp(v: float, lim: float) -> float:
    return max(-lim, min(lim, v))


def evs_step(state: ServoState, gains: ServoGains, dt: float) -> tuple[VelocityCommand, ServoState]:
    """One control tick of the translate-then-rotate servo.

    Phase switches happen first: TRANSLATE becomes ROTATE once ``|e_p|`` is
    below tolerance, ROTATE becomes ALIGNED once ``|e_theta|`` is.  The
    command then follows the new phase.  Pixel errors become metric via the
    pinhole relation ``dx = e * depth / f``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    phase = state.phase
    if phase is Phase.TRANSLATE and np.linalg.norm(state.e_p) < gains.pos_tol:
        phase = Phase.ROTATE
    if phase is Phase.ROTATE and abs(state.e_theta) < gains.ang_tol:
        phase = Phase.ALIGNED
    cmd = VelocityCommand()
    if phase is Phase.TRANSLATE:
        scale = gains.k_p * state.depth / gains.focal
        v_l = -scale * state.e_p[0]
        v_f = scale * state.e_p[1]
        speed = math.hypot(v_l, v_f)
        if speed > gains.v_max:
            v_l, v_f = v_l * gains.v_max / speed, v_f * gains.v_max / speed
        cmd = VelocityCommand(v_f=float(v_f), v_l=float(v_l))
    elif phase is Phase.ROTATE:
        cmd = VelocityCommand(v_r=_clamp(gains.k_r * state.e_theta, gains.w_max))
    return cmd, replace(state, phase=phase)


@dataclass
class KinematicPlant:
    """First-order integrator of velocity commands for a downward-looking camera.

    ``latency`` delays each command by that many ticks.  The camera's image
    x axis points along world heading ``yaw`` and image up along ``yaw + 90``.
    """

    x: float
    y: float
    z: float
    yaw: float = 0.0
    latency: int = 0
    _queue: list = field(default_factory=list, repr=False)

    def apply(self, cmd: VelocityCommand, dt: float) -> None:
        self._queue.append(cmd)
        if len(self._queue) <= self.latency:
            return
        c = self._queue.pop(0)
        v = rot_z(self.yaw)[:2, :2] @ np.array([c.v_l, c.v_f])
        self.x += float(v[0]) * dt
        self.y += float(v[1]) * dt
        self.yaw += c.v_r * dt

    def move_to(self, pose: Pose) -> None:
        """Direct pose goal; joint-space planning is out of scope."""
        self.x, self.y, self.z = (float(v) for v in pose.position)
        self.yaw = pose.yaw_deg
        self._queue.clear()


def image_motion(u: np.ndarray, v: np.ndarray, dx: float, dy: float, dyaw: float, depth: float,
                 focal: float, cx: float, cy: float, yaw: float) -> tuple[np.ndarray, np.ndarray]:
    """Predicted pixel positions after a camera motion over a plane at ``depth``.

    ``dx, dy`` are world displacements, ``dyaw`` the yaw change (deg) and
    ``yaw`` the heading before the move.
    """
    c, s = math.cos(math.radians(yaw)), math.sin(math.radians(yaw))
    # world displacement in the old camera frame (image x right, image y down)
    du = -(c * dx + s * dy) * focal / depth
    dv = (-s * dx + c * dy) * focal / depth
    u1, v1 = u + du - cx, v + dv - cy
    # positive yaw turns the camera counter-clockwise seen from above, so
    # the image content rotates by +dyaw in the (x right, y down) frame
    a = math.radians(dyaw)
    ca, sa = math.cos(a), math.sin(a)
    return cx + ca * u1 - sa * v1, cy + sa * u1 + ca * v1


def pbvs_target(obj_pose: Pose, grasp_offset: float = 0.2) -> Pose:
    """Pre-grasp gripper pose: above the object centroid, yaw aligned with it."""
    p = obj_pose.position
    return Pose.from_xyz_yaw(float(p[0]), float(p[1]), float(p[2]) + grasp_offset, obj_pose.yaw_deg)


# ------------------------------------------------------------------ traces

TRACE_HEADER = ["step", "t_us", "phase", "e_px", "e_py", "e_theta_deg", "v_f", "v_l", "v_r"]


@dataclass
class TraceRow:
    step: int
    t_us: int
    phase: Phase
    e_px: float
    e_py: float
    e_theta_deg: float
    v_f: float
    v_l: float
    v_r: float

    def as_list(self) -> list:
        return [self.step, self.t_us, self.phase.value, self.e_px, self.e_py, self.e_theta_deg,
                self.v_f, self.v_l, self.v_r]


def trace_row(step: int, t_us: int, state: ServoState, cmd: VelocityCommand) -> TraceRow:
    return TraceRow(step, t_us, state.phase, float(state.e_p[0]), float(state.e_p[1]),
                    float(state.e_theta), float(cmd.v_f), float(cmd.v_l), float(cmd.v_r))


def phases_well_ordered(rows: list[TraceRow]) -> bool:
    """Phases only ever advance TRANSLATE -> ROTATE -> ALIGNED."""
    rank = {Phase.TRANSLATE: 0, Phase.ROTATE: 1, Phase.ALIGNED: 2}
    seq = [rank[r.phase] for r in rows]
    return all(a <= b for a, b in zip(seq, seq[1:]))


def measure_target(plant: KinematicPlant, target_xyz, target_yaw: float, cam) -> tuple[np.ndarray, float]:
    """Exact image centroid and image axis angle of a planar target seen by the plant camera."""
    from evgrasp.events import look_down_pose, project_points
    pose = look_down_pose(plant.x, plant.y, plant.z, plant.yaw)
    p = np.asarray(target_xyz, dtype=float)
    d = np.array([math.cos(math.radians(target_yaw)), math.sin(math.radians(target_yaw)), 0.0]) * 0.05
    uv, _ = project_points(np.stack([p, p + d]), cam, pose)
    du, dv = uv[1] - uv[0]
    return uv[0], float(wrap90(math.degrees(math.atan2(dv, du))))


def servo_closed_loop(plant: KinematicPlant, target_xyz, target_yaw: float, cam, gains: ServoGains,
                      dt: float, max_steps: int = 500) -> list[TraceRow]:
    """Noiseless servo loop on exact measurements; stops once ALIGNED."""
    P_d = np.array([cam.cx, cam.cy])
    depth = plant.z - float(target_xyz[2])
    phase = Phase.TRANSLATE
    rows: list[TraceRow] = []
    for step in range(max_steps):
        P_a, theta_a = measure_target(plant, target_xyz, target_yaw, cam)
        state = ServoState(P_d, P_a, 0.0, theta_a, depth, phase)
        cmd, state = evs_step(state, gains, dt)
        rows.append(trace_row(step, int(round(step * dt * 1e6)), state, cmd))
        if state.phase is Phase.ALIGNED:
            break
        phase = state.phase
        plant.apply(cmd, dt)
    return rows
