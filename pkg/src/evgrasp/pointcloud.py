"""Point-cloud post-processing and scaled SVD registration of a unit cube model.

Clouds are plain ``(N, 3)`` float arrays in metres.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

RANK_TOL = 1e-9
TIE_TOL = 1e-9


class RegistrationError(ValueError):
    """Cluster cannot be registered (too few or degenerate points)."""


def as_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("cloud contains non-finite coordinates")
    return pts


# ------------------------------------------------------------ filtering

@dataclass
class OutlierResult:
    points: np.ndarray
    kept: np.ndarray
    undersized: bool = False


def remove_outliers(cloud, k: int = 1, max_dist: float = 0.25) -> OutlierResult:
    """Keep points whose k-th nearest neighbour (excluding itself) is within ``max_dist``.

    Clouds with fewer than ``k + 1`` points are returned unchanged and flagged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    pts = as_cloud(cloud)
    if len(pts) < k + 1:
        return OutlierResult(pts, np.ones(len(pts), dtype=bool), undersized=True)
    d, _ = cKDTree(pts).query(pts, k=k + 1)
    kept = d[:, k] <= max_dist
    return OutlierResult(pts[kept], kept)


def euclidean_cluster(cloud, radius: float, min_points: int = 1) -> list[np.ndarray]:
    """Connected components of the within-``radius`` graph.

    Components below ``min_points`` are dropped.  Clusters come sorted by
    descending size, then by centroid (x, y, z).
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    pts = as_cloud(cloud)
    labels = cluster_labels(pts, radius)
    groups = [pts[labels == g] for g in np.unique(labels)] if len(pts) else []
    groups = [g for g in groups if len(g) >= min_points]
    groups.sort(key=lambda g: (-len(g), *g.mean(axis=0)))
    return groups


def cluster_labels(pts: np.ndarray, radius: float) -> np.ndarray:
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(pts).query_pairs(radius, output_type="ndarray")
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels


def merge_nearby(cloud, radius: float) -> np.ndarray:
    """Replace each within-``radius`` component by its mean point."""
    pts = as_cloud(cloud)
    if len(pts) == 0:
        return pts
    labels = cluster_labels(pts, radius)
    merged = np.array([pts[labels == g].mean(axis=0) for g in np.unique(labels)])
    return merged[np.lexsort(merged.T[::-1])]


# ---------------------------------------------------------- registration

@dataclass
class SimilarityTransform:
    """``y = c R x + t``; ``mse`` is the mean squared residual over the pairs."""

    R: np.ndarray
    t: np.ndarray
    c: float
    mse: float

    def apply(self, pts) -> np.ndarray:
        return self.c * np.asarray(pts, dtype=float) @ self.R.T + self.t

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), np.zeros(3), 1.0, 0.0)


def _umeyama_batch(X: np.ndarray, Y: np.ndarray):
    """Vectorised closed-form similarity fit for stacks of paired sets (B, n, 3)."""
    mx = X.mean(axis=1)
    my = Y.mean(axis=1)
    Xc = X - mx[:, None]
    Yc = Y - my[:, None]
    n = X.shape[1]
    var_x = (Xc ** 2).sum(axis=(1, 2)) / n
    cov = np.einsum("bni,bnj->bij", Yc, Xc) / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.ones((len(X), 3))
    det_cov = np.linalg.det(cov)
    rank_def = D[:, 2] <= RANK_TOL * np.maximum(D[:, 0], 1e-300)
    flip_full = det_cov < 0
    flip_def = np.linalg.det(U) * np.linalg.det(Vt) < 0
    S[:, 2] = np.where(np.where(rank_def, flip_def, flip_full), -1.0, 1.0)
    R = np.einsum("bij,bj,bjk->bik", U, S, Vt)
    c = (D * S).sum(axis=1) / var_x
    t = my - c[:, None] * np.einsum("bij,bj->bi", R, mx)
    res = Y - (c[:, None, None] * np.einsum("bij,bnj->bni", R, X) + t[:, None])
    mse = (res ** 2).sum(axis=2).mean(axis=1)
    return R, t, c, mse, var_x


def register_similarity(source, target, correspondence=None) -> SimilarityTransform:
    """Least-squares ``(R, t, c)`` mapping ``source`` onto ``target``.

    ``correspondence`` is an ``(m, 2)`` array of (source index, target index)
    pairs; by default row i of each cloud is paired.  When the
    cross-covariance is rank deficient (coplanar sets) the reflection
    correction uses ``det(U) det(V)`` so that ``det(R) = +1`` always holds.
    """
    X = as_cloud(source)
    Y = as_cloud(target)
    if correspondence is not None:
        pairs = np.asarray(correspondence, dtype=np.int64).reshape(-1, 2)
        X, Y = X[pairs[:, 0]], Y[pairs[:, 1]]
    elif len(X) != len(Y):
        raise ValueError("source and target differ in size and no correspondence given")
    if len(X) < 3:
        raise RegistrationError("need at least 3 corresponding pairs")
    Xc = X - X.mean(axis=0)
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise RegistrationError("degenerate (collinear or coincident) source")
    R, t, c, mse, _ = _umeyama_batch(X[None], Y[None])
    return SimilarityTransform(R[0], t[0], float(c[0]), float(max(mse[0], 0.0)))


def unit_cube_model(edge: float = 1.0) -> np.ndarray:
    """The 8 corners of an origin-centred cube, in (x, y, z) sign order."""
    s = np.array(list(itertools.product((-1, 1), repeat=3)), dtype=float)
    return s * edge / 2.0


CUBE_FACES = [np.flatnonzero(unit_cube_model()[:, a] * sgn > 0) for a in range(3) for sgn in (1, -1)]


@dataclass
class ModelRegistration:
    transform: SimilarityTransform
    centroid: np.ndarray
    yaw: float
    assignment: np.ndarray  # model corner index per cluster point
    per_axis_rms: np.ndarray = field(default=None)
    candidates: int = 0

    def object_pose(self):
        from evgrasp.events import Pose
        return Pose.from_xyz_yaw(*self.centroid, self.yaw)


def _candidate_assignments(n: int, planar: bool, n_model: int) -> np.ndarray:
    if planar and n <= 4:
        rows = []
        for face in CUBE_FACES:
            rows.extend(face[list(p)] for p in itertools.permutations(range(4), n))
        return np.unique(np.array(rows), axis=0)
    return np.array(list(itertools.permutations(range(n_model), n)))


def _octant_assignment(cluster: np.ndarray, model: np.ndarray) -> np.ndarray | None:
    """Match by sign pattern in the PCA frames; None when ambiguous."""
    def signs(P):
        C = P - P.mean(axis=0)
        _, _, Vt = np.linalg.svd(C, full_matrices=False)
        return (C @ Vt.T > 0).astype(int) @ np.array([4, 2, 1])
    sc = signs(cluster)
    sm = signs(model)
    if len(set(sc)) != len(sc) or len(set(sm)) != len(sm):
        return None
    lookup = {int(k): i for i, k in enumerate(sm)}
    try:
        return np.array([lookup[int(k)] for k in sc])
    except KeyError:
        return None


def register_model(cluster, unit_model=None, up=(0.0, 0.0, 1.0), max_points: int = 8) -> ModelRegistration:
    """Fit the unit cube to an object's corner cluster and read off its pose.

    Correspondence is searched exhaustively over assignments of cluster
    points to distinct model corners (coplanar clusters only against single
    cube faces) and the assignment with least ``e^2`` is kept.  Exact ties
    from the cube's symmetry are broken by preferring the model z axis
    pointing up, then the model x axis along the cluster's major horizontal
    direction.  Larger clusters are first matched by PCA octant.
    """
    pts = as_cloud(cluster)
    model = unit_cube_model() if unit_model is None else as_cloud(unit_model)
    if len(pts) < 3:
        raise RegistrationError(f"cluster has {len(pts)} points; at least 3 needed")
    up = np.asarray(up, dtype=float)
    C = pts - pts.mean(axis=0)
    sv = np.linalg.svd(C, compute_uv=False)
    if sv[1] <= 1e-6 * max(sv[0], 1e-12):
        raise RegistrationError("cluster is collinear")
    # up to four corners are read as one visible face; this also avoids
    # fitting a coplanar set to one of the cube's diagonal rectangles
    planar = len(pts) <= 4 or sv[2] <= 1e-3 * sv[0]
    if len(pts) > max_points or len(pts) > len(model):
        assign = _octant_assignment(pts, model)
        if assign is None:
            raise RegistrationError(f"cannot match {len(pts)} points to {len(model)} model corners")
        cands = assign[None]
    else:
        cands = _candidate_assignments(len(pts), planar and len(model) == 8, len(model))
    X = model[cands]
    Y = np.broadcast_to(pts, X.shape)
    R, t, c, mse, _ = _umeyama_batch(X, Y)
    valid = np.isfinite(mse) & (c > 0)
    if not valid.any():
        raise RegistrationError("no admissible correspondence")
    mse = np.where(valid, mse, np.inf)
    best = mse.min()
    tied = np.flatnonzero(mse <= best + TIE_TOL * max(best, 1e-12) + 1e-15)
    # tie-breaks: model z closest to up, then model x along the major horizontal axis
    z_up = np.einsum("bi,i->b", R[tied][:, :, 2], up)
    tied = tied[z_up >= z_up.max() - 1e-6]
    major = _major_horizontal(pts, up)
    x_dir = np.abs(np.einsum("bi,i->b", R[tied][:, :, 0], major))
    tied = tied[x_dir >= x_dir.max() - 1e-6]
    k = int(tied[0])
    T = SimilarityTransform(R[k], t[k], float(c[k]), float(max(mse[k], 0.0)))
    x_axis = T.R[:, 0]
    yaw = math.degrees(math.atan2(x_axis[1], x_axis[0]))
    res_model = ((pts - T.t) @ T.R) / T.c - model[cands[k]]
    rms = np.sqrt((res_model ** 2).mean(axis=0)) * T.c
    return ModelRegistration(T, T.t.copy(), yaw, cands[k], rms, len(cands))


def _major_horizontal(pts: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Unit direction of greatest spread after projecting out ``up``."""
    P = pts - pts.mean(axis=0)
    P = P - np.outer(P @ up, up)
    _, _, Vt = np.linalg.svd(P, full_matrices=False)
    return Vt[0]
