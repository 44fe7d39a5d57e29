"""Grasp evaluation metrics.

A grasp succeeds (``SS = 1``) when both the centre error and the axis error
are within the limits; the success rate is the mean of ``SS``.  Quality
``Q_G`` penalises how far the object was pushed while being grasped and is
zero once either deviation exceeds its limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from evgrasp.events import Pose, wrap180

REPORT_HEADER = ["scenario", "object_id", "e_gp_cm", "e_gr_deg", "SS", "D_P_cm", "D_R_deg", "Q_G"]


@dataclass(frozen=True)
class Limits:
    L_P: float = 2.0  # cm
    L_R: float = 15.0  # deg

    def __post_init__(self):
        if self.L_P <= 0 or self.L_R <= 0:
            raise ValueError("limits must be positive")


@dataclass
class GraspMetrics:
    e_gp: float
    e_gr: float
    SS: int
    D_P: float
    D_R: float
    Q_G: float
    error: str = ""


def axis_difference(a_deg: float, b_deg: float) -> float:
    """Angle between two undirected axes, in [0, 90]."""
    d = abs(float(wrap180(a_deg - b_deg)))
    return 180.0 - d if d > 90.0 else d


def grasp_pose_error(P_grip: Pose, P_obj: Pose) -> tuple[float, float]:
    """Planar centre distance (cm) and axis angle difference (deg, in [0, 90])."""
    d = P_grip.position[:2] - P_obj.position[:2]
    return float(np.hypot(*d) * 100.0), axis_difference(P_grip.yaw_deg, P_obj.yaw_deg)


def success_sign(e_gp: float, e_gr: float, lim: Limits = Limits()) -> int:
    return int(e_gp <= lim.L_P and e_gr <= lim.L_R)


def success_rate(signs: Sequence[int]) -> float:
    s = list(signs)
    if not s:
        raise ValueError("success rate of an empty sequence")
    return sum(int(v) for v in s) / len(s)


def object_deviation(P_before: Pose, P_after: Pose) -> tuple[float, float]:
    """Centre displacement (cm) and absolute yaw change (deg)."""
    d = P_after.position - P_before.position
    return float(np.linalg.norm(d) * 100.0), abs(float(wrap180(P_after.yaw_deg - P_before.yaw_deg)))


def grasp_quality(D_P: float, D_R: float, lim: Limits = Limits()) -> float:
    if D_P > lim.L_P or D_R > lim.L_R:
        return 0.0
    return 1.0 - D_P / (2.0 * lim.L_P) - D_R / (2.0 * lim.L_R)


def evaluate_grasp(P_grip: Pose, P_obj: Pose, P_after: Pose, lim: Limits = Limits()) -> GraspMetrics:
    e_gp, e_gr = grasp_pose_error(P_grip, P_obj)
    D_P, D_R = object_deviation(P_obj, P_after)
    return GraspMetrics(e_gp, e_gr, success_sign(e_gp, e_gr, lim), D_P, D_R, grasp_quality(D_P, D_R, lim))


def failed_metrics(reason: str) -> GraspMetrics:
    nan = float("nan")
    return GraspMetrics(nan, nan, 0, nan, nan, 0.0, reason)


def aggregate(rows: Sequence[GraspMetrics]) -> dict:
    """Means over finite values and the success rate."""
    if not rows:
        return {"e_gp_cm": math.nan, "e_gr_deg": math.nan, "SS": math.nan, "D_P_cm": math.nan,
                "D_R_deg": math.nan, "Q_G": math.nan, "R": math.nan}

    def mean(vals):
        v = np.array(vals, dtype=float)
        v = v[np.isfinite(v)]
        return float(v.mean()) if v.size else math.nan
    return {
        "e_gp_cm": mean([r.e_gp for r in rows]),
        "e_gr_deg": mean([r.e_gr for r in rows]),
        "SS": mean([r.SS for r in rows]),
        "D_P_cm": mean([r.D_P for r in rows]),
        "D_R_deg": mean([r.D_R for r in rows]),
        "Q_G": mean([r.Q_G for r in rows]),
        "R": success_rate([r.SS for r in rows]),
    }


def report_rows(scenario: str, rows: Sequence[GraspMetrics]) -> list[list]:
    """Per-grasp rows plus a trailing aggregate row (object_id ``mean``, SS column holds R)."""
    out = [[scenario, i, r.e_gp, r.e_gr, r.SS, r.D_P, r.D_R, r.Q_G] for i, r in enumerate(rows)]
    if rows:
        a = aggregate(rows)
        out.append([scenario, "mean", a["e_gp_cm"], a["e_gr_deg"], a["R"], a["D_P_cm"],
                    a["D_R_deg"], a["Q_G"]])
    return out
