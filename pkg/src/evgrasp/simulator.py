"""Synthetic event generation, background-activity noise and its filter."""

from __future__ import annotations

import numpy as np

from evgrasp.events import NOISE_LABEL, CameraModel, EventStream, Pose, Scene, Trajectory
from evgrasp.render import render

COUNT_EPS = 1e-9


def sample_times(traj: Trajectory, dt: int) -> np.ndarray:
    """Render instants: every ``dt`` µs from the trajectory start, plus its end."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    times = np.arange(traj.t_start, traj.t_end, dt, dtype=np.int64)
    return np.append(times, traj.t_end)


def _step_events(L_prev, L_new, L_ref, C, t_prev, t_new):
    """Events fired between two renders; returns (flat_idx, t, p, L_ref_updated)."""
    dL = L_new - L_ref
    n = np.floor(np.abs(dL) / C + COUNT_EPS).astype(np.int64)
    idx = np.flatnonzero(n)
    if idx.size == 0:
        return idx, np.zeros(0, np.int64), np.zeros(0, np.int8), L_ref
    counts = n[idx]
    sign = np.sign(dL[idx])
    pix = np.repeat(idx, counts)
    j = np.arange(pix.size) - np.repeat(np.cumsum(counts) - counts, counts) + 1
    s = np.repeat(sign, counts)
    level = L_ref[pix] + s * j * C
    span = L_new[pix] - L_prev[pix]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(span != 0, (level - L_prev[pix]) / span, 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    t = t_prev + np.floor(frac * (t_new - t_prev) + 0.5).astype(np.int64)
    L_ref = L_ref.copy()
    L_ref[idx] += sign * counts * C
    return pix, t, s.astype(np.int8), L_ref


def generate_events(scene: Scene, traj: Trajectory, cam: CameraModel, dt: int = 1000,
                    seed: int = 0, noise_rate_hz: float = 0.0) -> EventStream:
    """Simulate the sensor along ``traj`` and return a (t, y, x)-ordered stream.

    Each pixel keeps a reference log level; whenever the rendered level moves
    at least ``C`` away from it, ``floor(|dL|/C)`` events of polarity
    ``sign(dL)`` fire and the reference advances by that multiple of ``C``.
    Crossing times are linearly interpolated inside the render step.  The
    returned stream carries ground-truth object labels.  Background-activity
    noise at ``noise_rate_hz`` per pixel is drawn from ``seed``.
    """
    times = sample_times(traj, dt)
    C = cam.contrast_threshold
    R, tr = traj.interpolate_many(times)
    L_prev, id_prev = render(scene, cam, Pose(R[0], tr[0]))
    L_prev = L_prev.ravel()
    id_prev = id_prev.ravel()
    L_ref = L_prev.copy()
    chunks = []
    for k in range(1, len(times)):
        L_new, id_new = render(scene, cam, Pose(R[k], tr[k]))
        L_new = L_new.ravel()
        id_new = id_new.ravel()
        pix, t, p, L_ref = _step_events(L_prev, L_new, L_ref, C, times[k - 1], times[k])
        if pix.size:
            lab = np.where(id_new[pix] >= 0, id_new[pix], id_prev[pix])
            chunks.append((pix, t, p, lab))
        L_prev, id_prev = L_new, id_new
    if chunks:
        pix = np.concatenate([c[0] for c in chunks])
        t = np.concatenate([c[1] for c in chunks])
        p = np.concatenate([c[2] for c in chunks])
        lab = np.concatenate([c[3] for c in chunks])
    else:
        pix = t = lab = np.zeros(0, np.int64)
        p = np.zeros(0, np.int8)
    x, y = pix % cam.width, pix // cam.width
    order = np.lexsort((x, y, t))
    stream = EventStream(t[order], x[order], y[order], p[order], cam.width, cam.height, lab[order])
    if noise_rate_hz > 0:
        noise = background_noise(cam.width, cam.height, traj.t_start, traj.t_end, noise_rate_hz, seed)
        stream = EventStream.merge([stream, noise])
    return stream


def background_noise(width: int, height: int, t_start: int, t_end: int, rate_hz: float,
                     seed: int) -> EventStream:
    """Uniform background-activity events at ``rate_hz`` per pixel, labelled as noise."""
    rng = np.random.default_rng(seed)
    duration_s = max(t_end - t_start, 0) * 1e-6
    n = rng.poisson(rate_hz * width * height * duration_s)
    t = np.sort(rng.integers(t_start, t_end + 1, size=n))
    x = rng.integers(0, width, size=n)
    y = rng.integers(0, height, size=n)
    p = rng.choice(np.array([-1, 1], dtype=np.int8), size=n)
    order = np.lexsort((x, y, t))
    return EventStream(t[order], x[order], y[order], p[order], width, height,
                       np.full(n, NOISE_LABEL))


def inject_noise(stream: EventStream, rate_hz: float, seed: int) -> EventStream:
    if len(stream) == 0 or rate_hz <= 0:
        return stream
    if stream.labels is None:
        stream = EventStream(stream.t, stream.x, stream.y, stream.p, stream.width,
                             stream.height, np.zeros(len(stream), np.int64))
    noise = background_noise(stream.width, stream.height, int(stream.t[0]), int(stream.t[-1]),
                             rate_hz, seed)
    return EventStream.merge([stream, noise])


class PixelHistory:
    """Per-pixel event history of a stream, for "latest earlier event" queries.

    ``pix`` is the flat pixel id of every event in stream order.
    """

    def __init__(self, pix: np.ndarray):
        n = len(pix)
        self.base = n + 1
        self.keys = np.sort(pix.astype(np.int64) * self.base + np.arange(n))

    def latest(self, query_pix: np.ndarray, query_idx: np.ndarray, inclusive: bool) -> np.ndarray:
        """Index of the latest event at ``query_pix`` before ``query_idx`` (-1 if none).

        With ``inclusive`` the query index itself qualifies.
        """
        query_pix = np.asarray(query_pix, dtype=np.int64)
        probe = query_pix * self.base + np.asarray(query_idx) + (1 if inclusive else 0)
        pos = np.searchsorted(self.keys, probe, side="left") - 1
        pos_c = np.maximum(pos, 0)
        k = self.keys[pos_c]
        found = (pos >= 0) & (k // self.base == query_pix)
        return np.where(found, k % self.base, -1)


def filter_noise(stream: EventStream, window: int = 5000, neighborhood: int = 1) -> EventStream:
    """Background-activity filter.

    Keeps an event iff some earlier event of the stream lies within the
    ``(2r+1)^2`` pixel neighbourhood (its own pixel included) no more than
    ``window`` µs before it.  Output is an order-preserving subsequence.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    n = len(stream)
    if n == 0:
        return stream
    W, H = stream.width, stream.height
    pix = stream.y * W + stream.x
    idx = np.arange(n)
    hist = PixelHistory(pix)
    keep = np.zeros(n, dtype=bool)
    r = neighborhood
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            qx, qy = stream.x + dx, stream.y + dy
            valid = (qx >= 0) & (qx < W) & (qy >= 0) & (qy < H) & ~keep
            if not valid.any():
                continue
            sel = np.flatnonzero(valid)
            j = hist.latest(qy[sel] * W + qx[sel], idx[sel], inclusive=False)
            hit = j >= 0
            jj = np.where(hit, j, 0)
            support = hit & (stream.t[jj] >= stream.t[sel] - window)
            keep[sel[support]] = True
    return stream.subset(keep)
