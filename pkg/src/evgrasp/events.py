"""Core domain types: events, camera, poses, trajectories and box scenes.

Conventions
-----------
* World frame: table plane is ``z = 0``, ``z`` points up, metres.
* Camera frame: ``x`` right, ``y`` down, ``z`` along the optical axis.
* A camera pose in a :class:`Trajectory` is the world-to-camera extrinsic
  ``X_cam = R @ X_world + t``.  Object and gripper poses use the same
  :class:`Pose` type but mean object-to-world (``R`` is the orientation and
  ``t`` the position).
* Timestamps are integer microseconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

DEFAULT_WIDTH = 346
DEFAULT_HEIGHT = 260
DEFAULT_CONTRAST = 0.15
NOISE_LABEL = -1


class ProjectionError(ValueError):
    """Raised when a point cannot be projected (behind the camera)."""


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Column-oriented event store.

    Events are kept as parallel numpy arrays rather than a list of
    :class:`Event` objects; ``stream[i]`` still returns an :class:`Event`.
    ``labels`` is optional simulator ground truth (object id per event,
    ``-1`` for noise) and is never written to event files.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.int64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int8)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns differ in length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != n:
                raise ValueError("labels length differs from event count")

    @classmethod
    def empty(cls, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height)

    @classmethod
    def from_events(
        cls, events: Iterable[Event], width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT
    ) -> "EventStream":
        evs = list(events)
        return cls(
            [e.t for e in evs], [e.x for e in evs], [e.y for e in evs], [e.p for e in evs],
            width, height,
        )

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    @property
    def events(self) -> list[Event]:
        return [self[i] for i in range(len(self))]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def duration(self) -> int:
        return int(self.t[-1] - self.t[0]) if len(self) else 0

    def subset(self, idx) -> "EventStream":
        """Events selected by a boolean mask or an index array (order kept)."""
        labels = None if self.labels is None else self.labels[idx]
        return EventStream(self.t[idx], self.x[idx], self.y[idx], self.p[idx],
                           self.width, self.height, labels)

    def shifted(self, dx: int = 0, dy: int = 0, dt: int = 0) -> "EventStream":
        return EventStream(self.t + dt, self.x + dx, self.y + dy, self.p,
                           self.width, self.height, self.labels)

    def validate(self) -> None:
        if len(self) == 0:
            return
        if np.any(np.diff(self.t) < 0):
            raise ValueError("timestamps must be non-decreasing")
        if self.x.min() < 0 or self.x.max() >= self.width or self.y.min() < 0 or self.y.max() >= self.height:
            raise ValueError("pixel outside sensor resolution")
        if not np.all(np.abs(self.p) == 1):
            raise ValueError("polarity must be +1 or -1")

    def equals(self, other: "EventStream") -> bool:
        return (
            self.width == other.width and self.height == other.height
            and np.array_equal(self.t, other.t) and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y) and np.array_equal(self.p, other.p)
        )

    @staticmethod
    def merge(streams: Sequence["EventStream"]) -> "EventStream":
        """Concatenate streams and restore (t, y, x) order."""
        if not streams:
            return EventStream.empty()
        w, h = streams[0].width, streams[0].height
        t = np.concatenate([s.t for s in streams])
        x = np.concatenate([s.x for s in streams])
        y = np.concatenate([s.y for s in streams])
        p = np.concatenate([s.p for s in streams])
        labels = None
        if all(s.labels is not None for s in streams):
            labels = np.concatenate([s.labels for s in streams])
        order = np.lexsort((x, y, t))
        return EventStream(t[order], x[order], y[order], p[order], w, h,
                           None if labels is None else labels[order])


@dataclass
class CameraModel:
    K: np.ndarray
    contrast_threshold: float = DEFAULT_CONTRAST
    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=float)
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.K.shape != (3, 3) or self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("K must be 3x3 with positive focal lengths")
        if abs(self.K[1, 0]) + abs(self.K[2, 0]) + abs(self.K[2, 1]) > 0:
            raise ValueError("K must be upper triangular")

    @classmethod
    def pinhole(cls, f: float = 300.0, cx: float | None = None, cy: float | None = None,
                width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT,
                contrast_threshold: float = DEFAULT_CONTRAST) -> "CameraModel":
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        K = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
        return cls(K, contrast_threshold, width, height)

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.cx, self.cy])


def rot_z(deg: float) -> np.ndarray:
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap180(deg):
    """Wrap angles to (-180, 180]."""
    return 180.0 - np.mod(180.0 - np.asarray(deg, dtype=float), 360.0)


def wrap90(deg):
    """Wrap axis angles (period 180) to (-90, 90]."""
    return 90.0 - np.mod(90.0 - np.asarray(deg, dtype=float), 180.0)


@dataclass
class Pose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_xyz_yaw(cls, x: float, y: float, z: float, yaw_deg: float = 0.0) -> "Pose":
        return cls(rot_z(yaw_deg), [x, y, z])

    def is_valid(self, tol: float = 1e-9) -> bool:
        return (np.allclose(self.R.T @ self.R, np.eye(3), atol=tol)
                and abs(np.linalg.det(self.R) - 1.0) < tol)

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.t

    @property
    def position(self) -> np.ndarray:
        return self.t

    @property
    def yaw_deg(self) -> float:
        """Heading of the body x axis about world z, degrees in (-180, 180]."""
        return float(wrap180(np.degrees(np.arctan2(self.R[1, 0], self.R[0, 0]))))


def look_down_pose(x: float, y: float, height: float, yaw_deg: float = 0.0) -> Pose:
    """World-to-camera pose of a downward-looking camera centred at (x, y, height).

    At zero yaw the image ``u`` axis is world ``+x`` and image ``v`` is world ``-y``.
    """
    R_cw = rot_z(yaw_deg) @ np.diag([1.0, -1.0, -1.0])
    c = np.array([x, y, height], dtype=float)
    return Pose(R_cw.T, -R_cw.T @ c)


def camera_center(pose: Pose) -> np.ndarray:
    return -pose.R.T @ pose.t


class Trajectory:
    """Timestamped camera poses with linear/slerp interpolation of the camera centre."""

    def __init__(self, times: Sequence[int], poses: Sequence[Pose]):
        times = np.asarray(times, dtype=np.int64)
        if len(times) < 2 or len(times) != len(poses):
            raise ValueError("trajectory needs at least two timestamped poses")
        if np.any(np.diff(times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        self.times = times
        self.poses = list(poses)
        self._centers = np.array([camera_center(p) for p in self.poses])
        self._slerp = Slerp(times.astype(float), Rotation.from_matrix([p.R for p in self.poses]))

    def __len__(self) -> int:
        return len(self.times)

    @property
    def t_start(self) -> int:
        return int(self.times[0])

    @property
    def t_end(self) -> int:
        return int(self.times[-1])

    def covers(self, t) -> np.ndarray:
        t = np.asarray(t)
        return (t >= self.t_start) & (t <= self.t_end)

    def interpolate_many(self, t) -> tuple[np.ndarray, np.ndarray]:
        """World-to-camera rotations (N,3,3) and translations (N,3) at times ``t``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(t < self.t_start) or np.any(t > self.t_end):
            raise ValueError("time outside trajectory span")
        R = self._slerp(t).as_matrix()
        c = np.column_stack([np.interp(t, self.times, self._centers[:, k]) for k in range(3)])
        tr = -np.einsum("nij,nj->ni", R, c)
        return R, tr

    def interpolate(self, t) -> Pose:
        R, tr = self.interpolate_many([t])
        return Pose(R[0], tr[0])

    @classmethod
    def linear(cls, start: Pose, end: Pose, duration_us: int, n_samples: int = 20,
               t0: int = 0) -> "Trajectory":
        """Straight camera-centre path from ``start`` to ``end`` with slerped rotation."""
        times = t0 + np.round(np.linspace(0, duration_us, n_samples)).astype(np.int64)
        key = Slerp([0.0, 1.0], Rotation.from_matrix([start.R, end.R]))
        c0, c1 = camera_center(start), camera_center(end)
        poses = []
        for s in np.linspace(0.0, 1.0, n_samples):
            R = key([s]).as_matrix()[0]
            c = (1 - s) * c0 + s * c1
            poses.append(Pose(R, -R @ c))
        return cls(times, poses)


@dataclass
class Box:
    """Axis-aligned box in its own frame, rotated by ``yaw`` about world z."""

    center: np.ndarray
    dims: np.ndarray
    yaw: float = 0.0
    intensity: float = 0.6

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(3)
        self.dims = np.asarray(self.dims, dtype=float).reshape(3)
        if np.any(self.dims <= 0):
            raise ValueError("box dimensions must be positive")

    @classmethod
    def on_table(cls, x: float, y: float, dims, yaw: float = 0.0, intensity: float = 0.6) -> "Box":
        dims = np.asarray(dims, dtype=float)
        return cls([x, y, dims[2] / 2.0], dims, yaw, intensity)

    @property
    def pose(self) -> Pose:
        return Pose(rot_z(self.yaw), self.center)

    def corners(self) -> np.ndarray:
        """The 8 corners in world coordinates."""
        s = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return self.pose.apply(s * self.dims / 2.0)

    @property
    def long_axis_yaw(self) -> float:
        """Heading of the longer horizontal side, wrapped to (-90, 90]."""
        yaw = self.yaw if self.dims[0] >= self.dims[1] else self.yaw + 90.0
        return float(wrap90(yaw))

    def footprint_radius(self) -> float:
        return float(np.hypot(self.dims[0], self.dims[1]) / 2.0)


@dataclass
class Scene:
    boxes: list[Box] = field(default_factory=list)
    background: float = 0.0
    side_shading: float = -0.7

    def __post_init__(self):
        for i, a in enumerate(self.boxes):
            for b in self.boxes[i + 1:]:
                gap = np.linalg.norm(a.center[:2] - b.center[:2])
                if gap < a.footprint_radius() + b.footprint_radius():
                    raise ValueError("scene objects overlap")

    def without(self, index: int) -> "Scene":
        return Scene([b for i, b in enumerate(self.boxes) if i != index], self.background,
                     self.side_shading)


def project_points(P, cam: CameraModel, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Continuous pixel coordinates (N,2) and camera depths (N,) of world points."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    Xc = P @ pose.R.T + pose.t
    z = Xc[:, 2]
    if np.any(z <= 0):
        raise ProjectionError("point behind the camera")
    uvw = Xc @ cam.K.T
    return uvw[:, :2] / uvw[:, 2:3], z


def project_point(P, cam: CameraModel, pose: Pose) -> tuple[float, float, float]:
    uv, z = project_points(P, cam, pose)
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def backproject_pixels(uv, depth, cam: CameraModel, pose: Pose) -> np.ndarray:
    """World points seen at pixels ``uv`` (N,2) with camera depths ``depth`` (N,)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    depth = np.asarray(depth, dtype=float).reshape(-1)
    rays = np.column_stack([uv, np.ones(len(uv))]) @ cam.K_inv.T
    Xc = rays * depth[:, None]
    return (Xc - pose.t) @ pose.R
