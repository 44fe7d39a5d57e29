"""Event-based multi-view stereo: ray voting into a DSI over a reference view.

Every event is back-projected as a viewing ray and intersected with a stack
of fronto-parallel depth planes of the reference camera.  Each intersection
votes for the voxel containing it.  Voxels where many rays meet correspond
to scene points, giving a semi-dense depth map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from evgrasp.events import CameraModel, EventStream, Pose, Trajectory, backproject_pixels

W_EPS = 1e-12


@dataclass
class DsiVolume:
    """Vote counts ``scores[v, u, i]`` over reference pixels and depth planes."""

    scores: np.ndarray
    depth_planes: np.ndarray
    ref_pose: Pose
    cam: CameraModel
    skipped: int = 0

    @property
    def total_votes(self) -> int:
        return int(self.scores.sum())

    @property
    def n_z(self) -> int:
        return len(self.depth_planes)


@dataclass
class DepthMap:
    """Per-pixel optimal depth (NaN where empty) and its vote count."""

    depth: np.ndarray
    confidence: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    def pixels(self) -> np.ndarray:
        """(u, v) of every non-empty pixel, row-major order."""
        v, u = np.nonzero(self.valid)
        return np.column_stack([u, v])


def depth_planes(z_min: float = 0.3, z_max: float = 1.5, n_z: int = 64) -> np.ndarray:
    """Depths uniformly spaced in inverse depth, increasing."""
    if n_z < 2:
        raise ValueError("need at least two depth planes")
    if not 0 < z_min < z_max:
        raise ValueError("require 0 < z_min < z_max")
    inv = np.linspace(1.0 / z_max, 1.0 / z_min, n_z)
    z = 1.0 / inv[::-1]
    z[0], z[-1] = z_min, z_max
    return z


def homography_at_depth(R, t, Z: float) -> np.ndarray:
    """Plane-induced homography ``R + t e3^T / Z`` for the plane at depth ``Z``."""
    if Z <= 0:
        raise ValueError("depth must be positive")
    H = np.array(R, dtype=float, copy=True)
    H[:, 2] += np.asarray(t, dtype=float) / Z
    return H


def back_project(pixel, H_Z0, H_Zi) -> np.ndarray | None:
    """Transfer a pixel from plane ``Z0`` to plane ``Zi``: ``H_Zi H_Z0^-1``.

    Returns ``None`` when the point maps to the plane at infinity.
    """
    u, v = pixel
    w = H_Zi @ np.linalg.solve(H_Z0, np.array([u, v, 1.0]))
    if abs(w[2]) < W_EPS:
        return None
    return w[:2] / w[2]


def relative_motion(ref_pose: Pose, R_e: np.ndarray, t_e: np.ndarray):
    """Reference-camera to event-camera motion for batched event poses."""
    R_er = R_e @ ref_pose.R.T
    t_er = t_e - np.einsum("nij,j->ni", R_er, ref_pose.t)
    return R_er, t_er


def plane_hits(uv: np.ndarray, R_er: np.ndarray, t_er: np.ndarray, cam: CameraModel,
               planes: np.ndarray):
    """Reference-view pixel where each event ray crosses each plane.

    With ``a = R^T x_e`` and ``b = R^T t`` the ray from the event camera in
    reference coordinates is ``s a - b``; it meets ``z = Z`` at
    ``s = (Z + b_z) / a_z``.  This is the closed form of ``H_Z^-1`` applied
    to the normalised event pixel.  Returns ``(u, v)`` of shape (N, Nz) and
    a mask of intersections lying in front of the event camera.
    """
    xn = np.column_stack([uv, np.ones(len(uv))]) @ cam.K_inv.T
    a = np.einsum("nji,nj->ni", R_er, xn)
    b = np.einsum("nji,nj->ni", R_er, t_er)
    Z = planes[None, :]
    az = a[:, 2:3]
    s_num = Z + b[:, 2:3]
    ok = np.abs(az) > W_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        s = s_num / az
        xr = (s * a[:, 0:1] - b[:, 0:1]) / Z
        yr = (s * a[:, 1:2] - b[:, 1:2]) / Z
    front = ok & (s > 0)
    u = cam.fx * xr + cam.K[0, 1] * yr + cam.cx
    v = cam.fy * yr + cam.cy
    return u, v, front


def build_dsi(stream: EventStream, traj: Trajectory, cam: CameraModel, z_min: float = 0.3,
              z_max: float = 1.5, n_z: int = 64, ref_pose: Pose | None = None,
              batch: int = 4096) -> DsiVolume:
    """Vote every event's ray into the reference-view DSI.

    Intersections are rounded to the nearest pixel; those outside the sensor
    or behind the event camera cast no vote at that plane.  Events outside
    the trajectory's time span are counted in ``skipped``.
    """
    planes = depth_planes(z_min, z_max, n_z)
    ref = ref_pose if ref_pose is not None else traj.interpolate(traj.t_start)
    H, W = cam.height, cam.width
    votes = []
    inside = traj.covers(stream.t) if len(stream) else np.zeros(0, bool)
    skipped = int((~inside).sum())
    idx = np.flatnonzero(inside)
    plane_ids = np.arange(n_z)[None, :]
    for s in range(0, idx.size, batch):
        sel = idx[s:s + batch]
        R_e, t_e = traj.interpolate_many(stream.t[sel])
        R_er, t_er = relative_motion(ref, R_e, t_e)
        uv = np.column_stack([stream.x[sel], stream.y[sel]]).astype(float)
        u, v, front = plane_hits(uv, R_er, t_er, cam, planes)
        with np.errstate(invalid="ignore"):
            ui = np.floor(u + 0.5)
            vi = np.floor(v + 0.5)
        ok = front & (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
        lin = (vi[ok].astype(np.int64) * W + ui[ok].astype(np.int64)) * n_z + \
            np.broadcast_to(plane_ids, ok.shape)[ok]
        votes.append(lin)
    lin = np.concatenate(votes) if votes else np.zeros(0, np.int64)
    flat = np.bincount(lin, minlength=H * W * n_z)
    return DsiVolume(flat.reshape(H, W, n_z), planes, ref, cam, skipped)


def extract_depth(dsi: DsiVolume, confidence_threshold: float | None = None,
                  relative: float = 0.6, nms_radius: int = 0, local_radius: int = 0,
                  floor: float = 0.0) -> DepthMap:
    """Per-pixel argmax depth, kept where its vote count reaches the threshold.

    ``confidence_threshold`` is an absolute vote count; when omitted it is
    ``relative`` times the global maximum.  With ``local_radius > 0`` the
    relative threshold is taken against the maximum within that many pixels
    instead, and ``floor`` (a fraction of the global maximum) rejects weak
    isolated responses.  ``nms_radius > 0`` additionally keeps only pixels
    whose confidence is a local maximum of the map.
    """
    best = dsi.scores.argmax(axis=2)
    conf = np.take_along_axis(dsi.scores, best[..., None], axis=2)[..., 0]
    peak = float(conf.max(initial=0))
    if confidence_threshold is None:
        if local_radius > 0:
            local = maximum_filter(conf, size=2 * local_radius + 1, mode="constant")
            confidence_threshold = np.maximum(relative * local, max(1.0, floor * peak))
        else:
            confidence_threshold = max(1.0, relative * peak)
    elif confidence_threshold < 1:
        raise ValueError("confidence threshold must be >= 1")
    keep = conf >= confidence_threshold
    if nms_radius > 0 and keep.any():
        keep &= conf == maximum_filter(conf, size=2 * nms_radius + 1, mode="constant")
    depth = np.where(keep, dsi.depth_planes[best], np.nan)
    return DepthMap(depth, np.where(keep, conf, 0))


def to_point_cloud(dm: DepthMap, cam: CameraModel, ref_pose: Pose) -> np.ndarray:
    """World points of every non-empty pixel, shape (N, 3)."""
    px = dm.pixels()
    if len(px) == 0:
        return np.zeros((0, 3))
    return backproject_pixels(px.astype(float), dm.depth[px[:, 1], px[:, 0]], cam, ref_pose)


def corner_depth_tolerance(planes: np.ndarray, z: float) -> float:
    """Spacing of the plane interval containing ``z``; one-plane tolerance."""
    i = int(np.clip(np.searchsorted(planes, z), 1, len(planes) - 1))
    return float(planes[i] - planes[i - 1])
