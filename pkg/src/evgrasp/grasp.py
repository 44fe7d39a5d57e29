"""Principal-axis grasp planning for a two-finger gripper.

Angles are image-plane degrees measured from the +x (column) axis towards
+y (row), wrapped to (-90, 90].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from evgrasp.events import wrap90

N_BINS = 61
BIN_WIDTH = 3.0
BIN_CENTERS = -90.0 + BIN_WIDTH * np.arange(N_BINS)
ISOTROPY_TOL = 1e-12


class OrientationUndefinedError(ValueError):
    """The point set has no dominant direction."""


def covariance_2d(points) -> np.ndarray:
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(P) < 2:
        raise OrientationUndefinedError("need at least two points")
    C = P - P.mean(axis=0)
    return C.T @ C / len(P)


def principal_axis(points) -> float:
    """Angle of the leading covariance eigenvector, closed-form 2x2 solution."""
    cov = covariance_2d(points)
    sxx, syy, sxy = cov[0, 0], cov[1, 1], cov[0, 1]
    gap = math.hypot(sxx - syy, 2.0 * sxy)
    if gap <= ISOTROPY_TOL * max(sxx + syy, 1e-300):
        raise OrientationUndefinedError("isotropic covariance")
    return float(wrap90(0.5 * math.degrees(math.atan2(2.0 * sxy, sxx - syy))))


def eigen_2x2(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and unit eigenvectors (columns) of a symmetric 2x2."""
    sxx, syy, sxy = cov[0, 0], cov[1, 1], cov[0, 1]
    mean = 0.5 * (sxx + syy)
    r = math.hypot(0.5 * (sxx - syy), sxy)
    a = 0.5 * math.atan2(2.0 * sxy, sxx - syy)
    u1 = np.array([math.cos(a), math.sin(a)])
    u2 = np.array([-u1[1], u1[0]])
    return np.array([mean + r, mean - r]), np.column_stack([u1, u2])


@dataclass
class OrientationHistogram:
    counts: np.ndarray
    total: int

    @classmethod
    def of(cls, samples) -> "OrientationHistogram":
        s = np.asarray(samples, dtype=float).ravel()
        if s.size == 0:
            raise ValueError("need at least one sample")
        return cls(np.bincount(bin_index(s), minlength=N_BINS), int(s.size))

    def argmax(self) -> float:
        best = self.counts.max()
        cands = BIN_CENTERS[self.counts == best]
        # ties towards the smaller |theta|, then the lower centre
        return float(cands[np.lexsort((cands, np.abs(cands)))[0]])


def wrap_closed(deg) -> np.ndarray:
    """Wrap to [-90, 90] keeping +90 as +90."""
    d = np.asarray(deg, dtype=float)
    w = np.mod(d + 90.0, 180.0) - 90.0
    return np.where((w == -90.0) & (np.mod(d - 90.0, 360.0) == 0.0), 90.0, w)


def bin_index(samples) -> np.ndarray:
    """Nearest of the 61 centres; half-way samples go to the lower bin."""
    s = wrap_closed(samples)
    return np.clip(np.ceil((s + 90.0) / BIN_WIDTH - 0.5), 0, N_BINS - 1).astype(np.int64)


def robust_orientation(samples) -> float:
    """Centre of the fullest 3-degree bin."""
    return OrientationHistogram.of(samples).argmax()


@dataclass
class GripperModel:
    finger_span: float = 0.20
    min_span: float = 0.03
    descend_offset: float = 0.02

    def __post_init__(self):
        if not 0 < self.min_span < self.finger_span:
            raise ValueError("require 0 < min_span < finger_span")

    def fits(self, extent: float) -> bool:
        return self.min_span < extent < self.finger_span


@dataclass
class GraspPose:
    center_px: np.ndarray
    center_m: np.ndarray | None
    theta: float
    depth: float
    feasible: bool
    extent: float = float("nan")


def plan_grasp(centroid_px, theta_star: float, depth: float, object_extent: float,
               gripper: GripperModel, center_m=None) -> GraspPose:
    """Grasp at the centroid, closing perpendicular to the principal axis.

    ``object_extent`` is the object's width measured along the closing direction.
    The grasp height is ``depth`` plus the gripper's descend offset.
    """
    if depth <= 0:
        raise ValueError("depth must be positive")
    theta = float(wrap90(theta_star + 90.0))
    return GraspPose(np.asarray(centroid_px, dtype=float),
                     None if center_m is None else np.asarray(center_m, dtype=float),
                     theta, depth + gripper.descend_offset, gripper.fits(object_extent),
                     float(object_extent))


def extent_along(points, theta_deg: float) -> float:
    """Spread of ``points`` projected on the direction ``theta_deg``."""
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    d = np.array([math.cos(math.radians(theta_deg)), math.sin(math.radians(theta_deg))])
    proj = P @ d
    return float(proj.max() - proj.min()) if len(P) else 0.0
