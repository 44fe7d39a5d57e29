"""Flat-shaded ray casting of box scenes into per-pixel log intensity."""

from __future__ import annotations

import numpy as np

from evgrasp.events import CameraModel, Pose, Scene, camera_center


class PixelRays:
    """Cached camera-frame ray directions for every pixel centre."""

    def __init__(self, cam: CameraModel):
        self.cam = cam
        v, u = np.mgrid[0:cam.height, 0:cam.width]
        pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1).astype(float)
        self.dirs = pix @ cam.K_inv.T  # (H*W, 3), z component 1


_RAY_CACHE: dict[tuple, PixelRays] = {}


def pixel_rays(cam: CameraModel) -> PixelRays:
    key = (cam.width, cam.height, *cam.K.ravel().tolist())
    if key not in _RAY_CACHE:
        _RAY_CACHE.clear()
        _RAY_CACHE[key] = PixelRays(cam)
    return _RAY_CACHE[key]


def _roi(box, cam: CameraModel, pose: Pose):
    """Pixel bounding box of a box's projection, or None for the full frame."""
    Xc = box.corners() @ pose.R.T + pose.t
    if np.any(Xc[:, 2] <= 1e-6):
        return None
    uv = (Xc @ cam.K.T)[:, :2] / Xc[:, 2:3]
    u0 = int(np.floor(uv[:, 0].min())) - 1
    u1 = int(np.ceil(uv[:, 0].max())) + 2
    v0 = int(np.floor(uv[:, 1].min())) - 1
    v1 = int(np.ceil(uv[:, 1].max())) + 2
    u0, u1 = max(u0, 0), min(u1, cam.width)
    v0, v1 = max(v0, 0), min(v1, cam.height)
    if u0 >= u1 or v0 >= v1:
        return ()
    return u0, u1, v0, v1


def render(scene: Scene, cam: CameraModel, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Log intensity (H, W) and visible object id (H, W, -1 for background).

    Each face carries a constant value: the box intensity on the top face and
    ``intensity + scene.side_shading`` on the vertical faces.
    """
    H, W = cam.height, cam.width
    L = np.full((H, W), scene.background, dtype=float)
    ids = np.full((H, W), -1, dtype=np.int64)
    if not scene.boxes:
        return L, ids
    zbuf = np.full((H, W), np.inf)
    rays = pixel_rays(cam).dirs.reshape(H, W, 3)
    origin = camera_center(pose)
    for k, box in enumerate(scene.boxes):
        roi = _roi(box, cam, pose)
        if roi == ():
            continue
        u0, u1, v0, v1 = roi if roi is not None else (0, W, 0, H)
        d_cam = rays[v0:v1, u0:u1].reshape(-1, 3)
        # camera -> world -> box frame
        Rb = box.pose.R
        M = Rb.T @ pose.R.T
        d = d_cam @ M.T
        o = Rb.T @ (origin - box.center)
        half = box.dims / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-half - o) * inv
            t2 = (half - o) * inv
        tlo = np.minimum(t1, t2)
        thi = np.maximum(t1, t2)
        # rays parallel to a slab: inside -> unbounded, outside -> miss
        par = d == 0
        inside = np.abs(o) <= half
        tlo = np.where(par, np.where(inside, -np.inf, np.inf), tlo)
        thi = np.where(par, np.where(inside, np.inf, -np.inf), thi)
        axis = np.argmax(tlo, axis=1)
        tnear = tlo[np.arange(len(tlo)), axis]
        tfar = thi.min(axis=1)
        hit = (tfar >= tnear) & (tnear > 0)
        depth = np.where(hit, tnear, np.inf).reshape(v1 - v0, u1 - u0)
        face_val = np.where(axis == 2, box.intensity, box.intensity + scene.side_shading)
        face_val = face_val.reshape(v1 - v0, u1 - u0)
        zb = zbuf[v0:v1, u0:u1]
        closer = depth < zb
        zb[closer] = depth[closer]
        L[v0:v1, u0:u1][closer] = face_val[closer]
        ids[v0:v1, u0:u1][closer] = k
    return L, ids
