"""Multi-object event-based mean shift (MEMS) over (x, y, t).

Every retained event seeds a mean-shift trajectory in the spatio-temporal
space ``(x, y, kappa * t_ms)``.  Converged modes that lie within the merge
radius form one cluster.  Two accelerations are supported: an over-relaxed
update ``q' = q + (1 + alpha) m`` and uniform stride downsampling ``beta``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from evgrasp.events import NOISE_LABEL, EventStream

SQRT_2PI = math.sqrt(2.0 * math.pi)


class DegenerateQueryError(ValueError):
    """All kernel weights vanished for a mean-shift query."""


class EmptyStreamError(ValueError):
    """No events left to cluster."""


@dataclass
class MemsConfig:
    bandwidth: float = 25.0
    alpha: float = 0.35
    beta: int = 1
    time_scale: float | None = None  # px per ms; None maps the stream duration to temporal_extent
    temporal_extent: float = 50.0
    convergence_eps: float = 0.01
    max_iters: int = 500
    mode_merge_radius: float | None = None  # None -> bandwidth / 2
    min_cluster_fraction: float = 0.01

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if int(self.beta) != self.beta or self.beta < 1:
            raise ValueError("beta must be a positive integer")
        if self.convergence_eps <= 0:
            raise ValueError("convergence_eps must be positive")
        self.beta = int(self.beta)

    @property
    def merge_radius(self) -> float:
        return self.bandwidth / 2.0 if self.mode_merge_radius is None else self.mode_merge_radius


@dataclass
class ClusterSet:
    """Segmentation result over the retained (downsampled) events.

    ``indices`` maps each labelled event back to the input stream and
    ``points`` holds its pixel coordinates.
    """

    labels: np.ndarray
    centroids: np.ndarray
    counts: np.ndarray
    indices: np.ndarray
    points: np.ndarray
    modes: np.ndarray = field(repr=False, default=None)
    iterations: int = 0

    @property
    def N(self) -> int:
        return len(self.counts)

    def members(self, cluster_id: int) -> np.ndarray:
        return self.points[self.labels == cluster_id]


@dataclass
class EScoreReport:
    T_e: float
    precision: float
    recall: float
    F1: float
    Ere: float = 0.0
    Fre: float = 0.0
    e_score: float = 0.0
    lambda1: float = 0.6
    lambda2: float = 0.4


def gaussian_weight(d_sq, sigma: float):
    """Gaussian kernel ``exp(-d^2 / 2 sigma^2) / (sqrt(2 pi) sigma)``."""
    return np.exp(-np.asarray(d_sq, dtype=float) / (2.0 * sigma * sigma)) / (SQRT_2PI * sigma)


def mean_shift_vector(q, pts, sigma: float) -> np.ndarray:
    """Kernel-weighted mean of ``pts`` around ``q`` minus ``q``."""
    q = np.asarray(q, dtype=float)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if len(pts) == 0:
        raise ValueError("mean shift needs at least one point")
    w = gaussian_weight(((pts - q) ** 2).sum(axis=1), sigma)
    total = w.sum()
    if total <= 0.0:
        raise DegenerateQueryError("all kernel weights underflowed")
    return (w @ pts) / total - q


def shift_point(q, pts, sigma: float, alpha: float = 0.0) -> np.ndarray:
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    q = np.asarray(q, dtype=float)
    return q + (1.0 + alpha) * mean_shift_vector(q, pts, sigma)


def downsample(stream: EventStream, beta: int) -> EventStream:
    """Keep events 0, beta, 2*beta, ..."""
    if beta < 1:
        raise ValueError("beta must be >= 1")
    if beta == 1:
        return stream
    return stream.subset(np.arange(0, len(stream), beta))


def spatiotemporal_points(stream: EventStream, cfg: MemsConfig) -> np.ndarray:
    t_ms = (stream.t - stream.t[0]) / 1000.0
    if cfg.time_scale is not None:
        kappa = cfg.time_scale
    else:
        span = float(t_ms[-1]) if len(t_ms) else 0.0
        kappa = cfg.temporal_extent / span if span > 0 else 0.0
    return np.column_stack([stream.x, stream.y, kappa * t_ms]).astype(float)


def _shift_modes(seeds: np.ndarray, data: np.ndarray, cfg: MemsConfig, chunk: int = 256):
    """Iterate every seed to convergence; returns modes, converged flags, iterations."""
    # centring keeps the expanded squared distances well conditioned
    origin = data.mean(axis=0)
    data = data - origin
    q = seeds - origin
    active = np.arange(len(q))
    converged = np.zeros(len(q), dtype=bool)
    inv2s2 = 1.0 / (2.0 * cfg.bandwidth ** 2)
    step = 1.0 + cfg.alpha
    eps2 = cfg.convergence_eps ** 2
    data_sq = (data ** 2).sum(axis=1)
    it = 0
    while active.size and it < cfg.max_iters:
        it += 1
        still = []
        for s in range(0, active.size, chunk):
            idx = active[s:s + chunk]
            Q = q[idx]
            d2 = (Q ** 2).sum(axis=1)[:, None] + data_sq[None, :] - 2.0 * Q @ data.T
            np.maximum(d2, 0.0, out=d2)
            w = np.exp(-d2 * inv2s2)
            tot = w.sum(axis=1)
            bad = tot <= 0.0
            if np.any(bad):
                raise DegenerateQueryError("all kernel weights underflowed")
            m = (w @ data) / tot[:, None] - Q
            q[idx] = Q + step * m
            done = (m ** 2).sum(axis=1) < eps2
            converged[idx[done]] = True
            still.append(idx[~done])
        active = np.concatenate(still) if still else active[:0]
    return q + origin, converged, it


def merge_modes(modes: np.ndarray, converged: np.ndarray, radius: float, seed: int = 0):
    """Greedy merge in event order: a mode joins the nearest existing centre within
    ``radius`` or founds a new one.  Exact distance ties are broken by ``seed``."""
    rng = np.random.default_rng(seed)
    labels = np.full(len(modes), NOISE_LABEL, dtype=np.int64)
    centres: list[np.ndarray] = []
    r2 = radius * radius
    for i in np.flatnonzero(converged):
        if centres:
            C = np.asarray(centres)
            d2 = ((C - modes[i]) ** 2).sum(axis=1)
            near = np.flatnonzero(d2 <= r2)
            if near.size:
                best = near[d2[near] == d2[near].min()]
                labels[i] = best[0] if best.size == 1 else rng.choice(best)
                continue
        centres.append(modes[i])
        labels[i] = len(centres) - 1
    return labels


def finalize_clusters(labels: np.ndarray, xy: np.ndarray, min_count: int):
    """Drop small clusters to NOISE, order by descending count, compute centroids."""
    labels = labels.copy()
    ids, counts = np.unique(labels[labels >= 0], return_counts=True)
    keep = ids[counts >= min_count]
    labels[~np.isin(labels, keep)] = NOISE_LABEL
    cents = [xy[labels == k].mean(axis=0) for k in keep]
    cnts = [int((labels == k).sum()) for k in keep]
    order = sorted(range(len(keep)), key=lambda i: (-cnts[i], cents[i][0], cents[i][1]))
    remap = np.full(int(ids.max()) + 1 if ids.size else 1, NOISE_LABEL, dtype=np.int64)
    for new, old in enumerate(order):
        remap[keep[old]] = new
    out = np.where(labels >= 0, remap[np.maximum(labels, 0)], NOISE_LABEL)
    centroids = np.array([cents[i] for i in order], dtype=float).reshape(-1, 2)
    counts_out = np.array([cnts[i] for i in order], dtype=np.int64)
    return out, centroids, counts_out


def segment(stream: EventStream, cfg: MemsConfig | None = None, seed: int = 0) -> ClusterSet:
    """Cluster the events of ``stream`` into object instances."""
    cfg = cfg or MemsConfig()
    indices = np.arange(0, len(stream), cfg.beta)
    ds = downsample(stream, cfg.beta)
    if len(ds) == 0:
        raise EmptyStreamError("no events to segment")
    data = spatiotemporal_points(ds, cfg)
    modes, converged, iters = _shift_modes(data, data, cfg)
    raw = merge_modes(modes, converged, cfg.merge_radius, seed)
    xy = data[:, :2]
    min_count = max(1, int(math.ceil(cfg.min_cluster_fraction * len(ds))))
    labels, centroids, counts = finalize_clusters(raw, xy, min_count)
    return ClusterSet(labels, centroids, counts, indices, xy, modes, iters)


def reference_segment(stream: EventStream, cfg: MemsConfig, seed: int = 0) -> ClusterSet:
    """Classic sequential mean shift: one seed at a time, plain weighted-mean update.

    Slow; kept as the baseline the vectorised :func:`segment` is checked against.
    """
    ds = downsample(stream, cfg.beta)
    if len(ds) == 0:
        raise EmptyStreamError("no events to segment")
    data = spatiotemporal_points(ds, cfg)
    modes = np.empty_like(data)
    converged = np.zeros(len(data), dtype=bool)
    eps = cfg.convergence_eps
    for i in range(len(data)):
        q = data[i].copy()
        for _ in range(cfg.max_iters):
            new = shift_point(q, data, cfg.bandwidth, cfg.alpha)
            moved = np.linalg.norm(new - q) / (1.0 + cfg.alpha)
            q = new
            if moved < eps:
                converged[i] = True
                break
        modes[i] = q
    raw = merge_modes(modes, converged, cfg.merge_radius, seed)
    xy = data[:, :2]
    min_count = max(1, int(math.ceil(cfg.min_cluster_fraction * len(ds))))
    labels, centroids, counts = finalize_clusters(raw, xy, min_count)
    return ClusterSet(labels, centroids, counts, np.arange(0, len(stream), cfg.beta), xy, modes)


def clustering_scores(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float, float]:
    """Per-event precision, recall and F1 after one-to-one cluster matching.

    Predicted clusters are matched to ground-truth objects by maximum overlap
    (Hungarian assignment).  Precision is over events given a non-noise
    label, recall over events whose true label is an object.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    p_ids = np.unique(pred[pred >= 0])
    t_ids = np.unique(truth[truth >= 0])
    n_pred = int((pred >= 0).sum())
    n_true = int((truth >= 0).sum())
    if p_ids.size == 0 or t_ids.size == 0:
        return 0.0, 0.0, 0.0
    overlap = np.array([[np.sum((pred == a) & (truth == b)) for b in t_ids] for a in p_ids])
    rows, cols = linear_sum_assignment(-overlap)
    correct = int(overlap[rows, cols].sum())
    precision = correct / n_pred if n_pred else 0.0
    recall = correct / n_true if n_true else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def e_score(base: EScoreReport, test: EScoreReport, lambda1: float = 0.6,
            lambda2: float = 0.4) -> EScoreReport:
    """Relative time gain and relative F1 change of ``test`` against ``base``.

    ``Ere = -(T_e - T_e_base) / T_e_base * 100`` and likewise ``Fre`` for F1,
    combined as ``lambda1 * Ere + lambda2 * Fre``.
    """
    if abs(lambda1 + lambda2 - 1.0) > 1e-9:
        raise ValueError("lambda1 + lambda2 must equal 1")
    if base.T_e <= 0 or base.F1 <= 0:
        raise ValueError("baseline T_e and F1 must be positive")
    ere = -(test.T_e - base.T_e) / base.T_e * 100.0 + 0.0  # + 0.0 drops negative zero
    fre = -(test.F1 - base.F1) / base.F1 * 100.0 + 0.0
    return EScoreReport(test.T_e, test.precision, test.recall, test.F1, ere, fre,
                        lambda1 * ere + lambda2 * fre, lambda1, lambda2)


def timed_run(stream: EventStream, cfg: MemsConfig, repeats: int = 5, seed: int = 0):
    """Median wall time per input event (µs) over ``repeats`` runs, plus the last result."""
    times = []
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = segment(stream, cfg, seed)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e6 / len(stream), result


def evaluate_run(stream: EventStream, cfg: MemsConfig, repeats: int = 5, seed: int = 0) -> EScoreReport:
    """T_e and per-event scores of one configuration against the stream's labels."""
    if stream.labels is None:
        raise ValueError("stream carries no ground-truth labels")
    te, res = timed_run(stream, cfg, repeats, seed)
    truth = stream.labels[res.indices]
    p, r, f1 = clustering_scores(res.labels, truth)
    return EScoreReport(te, p, r, f1)


def sweep(stream: EventStream, base_cfg: MemsConfig, param: str, values, repeats: int = 5,
          seed: int = 0, lambda1: float = 0.6, lambda2: float = 0.4) -> list[tuple[float, EScoreReport]]:
    """E-score curve over ``alpha`` or ``beta``; the first value is the baseline."""
    if param not in ("alpha", "beta"):
        raise ValueError("param must be 'alpha' or 'beta'")
    rows = []
    base = None
    for v in values:
        cfg = MemsConfig(**{**base_cfg.__dict__, param: v})
        rep = evaluate_run(stream, cfg, repeats, seed)
        if base is None:
            base = rep
        rows.append((v, e_score(base, rep, lambda1, lambda2)))
    return rows
