"""Plain-text file formats shared by the CLI and the pipelines.

All files are UTF-8, comma-separated, LF line endings, with a header row.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from evgrasp.events import DEFAULT_HEIGHT, DEFAULT_WIDTH, EventStream

EVENT_HEADER = "t_us,x,y,p"


class FileFormatError(ValueError):
    """A text artifact does not follow its declared format."""


class EventFileError(FileFormatError):
    """Parse failure in an event file; carries the offending 1-based line number."""

    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"line {line}: {reason}")


def write_events(stream: EventStream, path) -> None:
    cols = np.column_stack([stream.t, stream.x, stream.y, stream.p.astype(np.int64)])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(EVENT_HEADER + "\n")
        if len(cols):
            np.savetxt(fh, cols, fmt="%d", delimiter=",")


def read_events(path, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT) -> EventStream:
    """Parse an event file, validating every record.

    Raises :class:`EventFileError` naming the line for a malformed record,
    a decreasing timestamp, an out-of-range pixel or an invalid polarity.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != EVENT_HEADER:
        raise EventFileError(1, f"malformed header (expected '{EVENT_HEADER}')")
    ts, xs, ys, ps = [], [], [], []
    last_t = None
    for lineno, raw in enumerate(lines[1:], start=2):
        if raw == "":
            continue
        parts = raw.split(",")
        if len(parts) != 4:
            raise EventFileError(lineno, "malformed line")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise EventFileError(lineno, "malformed line") from None
        if t < 0 or (last_t is not None and t < last_t):
            raise EventFileError(lineno, "non-monotone timestamp")
        if not (0 <= x < width and 0 <= y < height):
            raise EventFileError(lineno, "pixel out of range")
        if p not in (1, -1):
            raise EventFileError(lineno, "invalid polarity")
        last_t = t
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
    return EventStream(ts, xs, ys, ps, width, height)


def _fmt(v, exact: bool = False) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v) if exact else f"{v:.6f}"
    return str(v)


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence], exact: bool = False) -> None:
    """Comma-separated rows; floats get six decimals, or round-trip digits when ``exact``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v, exact) for v in row) + "\n")


def read_rows(path) -> tuple[list[str], list[list[str]]]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    if not lines:
        raise FileFormatError(f"{path}: empty file")
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]


def write_cloud(points: np.ndarray, path) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    write_rows(path, ["x", "y", "z"], points.tolist())


def read_cloud(path) -> np.ndarray:
    header, rows = read_rows(path)
    if header != ["x", "y", "z"]:
        raise FileFormatError(f"{path}: expected header x,y,z")
    try:
        return np.array([[float(v) for v in r] for r in rows], dtype=float).reshape(-1, 3)
    except ValueError:
        raise FileFormatError(f"{path}: malformed cloud record") from None


def write_depth_map(depth: np.ndarray, confidence: np.ndarray, path) -> None:
    ys, xs = np.nonzero(np.isfinite(depth))
    write_rows(path, ["x", "y", "depth_m", "confidence"],
               ((int(x), int(y), float(depth[y, x]), int(confidence[y, x])) for x, y in zip(xs, ys)))


def read_depth_map(path, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT):
    header, rows = read_rows(path)
    if header != ["x", "y", "depth_m", "confidence"]:
        raise FileFormatError(f"{path}: expected header x,y,depth_m,confidence")
    depth = np.full((height, width), np.nan)
    conf = np.zeros((height, width), dtype=np.int64)
    try:
        for r in rows:
            x, y = int(r[0]), int(r[1])
            if not (0 <= x < width and 0 <= y < height):
                raise ValueError
            depth[y, x] = float(r[2])
            conf[y, x] = int(r[3])
    except (ValueError, IndexError):
        raise FileFormatError(f"{path}: malformed depth record") from None
    return depth, conf


def write_clusters(labels: np.ndarray, centroids: np.ndarray, counts: np.ndarray, path,
                   indices: np.ndarray | None = None) -> None:
    """Per-event labels followed by a blank line and the cluster footer block."""
    indices = np.arange(len(labels)) if indices is None else indices
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("event_index,label\n")
        for i, lab in zip(indices, labels):
            fh.write(f"{int(i)},{int(lab)}\n")
        fh.write("\ncluster,centroid_x,centroid_y,count\n")
        for k, (c, n) in enumerate(zip(centroids, counts)):
            fh.write(f"{k},{c[0]:.6f},{c[1]:.6f},{int(n)}\n")


def read_clusters(path):
    with open(path, encoding="utf-8") as fh:
        head, _, foot = fh.read().partition("\n\n")
    hl = head.split("\n")
    if hl[0] != "event_index,label":
        raise FileFormatError(f"{path}: bad cluster file header")
    idx, labels = [], []
    fl = [ln for ln in foot.split("\n") if ln]
    cents, counts = [], []
    try:
        for ln in hl[1:]:
            if ln:
                a, b = ln.split(",")
                idx.append(int(a))
                labels.append(int(b))
        for ln in fl[1:]:
            _, cx, cy, n = ln.split(",")
            cents.append((float(cx), float(cy)))
            counts.append(int(n))
    except ValueError:
        raise FileFormatError(f"{path}: malformed cluster record") from None
    return (np.array(idx, dtype=np.int64), np.array(labels, dtype=np.int64),
            np.array(cents, dtype=float).reshape(-1, 2), np.array(counts, dtype=np.int64))


def write_transform(R: np.ndarray, t: np.ndarray, c: float, mse: float, path) -> None:
    """One record: 12 numbers of row-major [R|t], then scale and mean squared error."""
    Rt = np.column_stack([R, t]).ravel()
    vals = list(Rt) + [c, mse]
    names = [f"r{i}{j}" if j < 3 else f"t{i}" for i in range(3) for j in range(4)] + ["c", "e2"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(names) + "\n")
        fh.write(",".join(repr(float(v)) for v in vals) + "\n")


def read_transform(path):
    header, rows = read_rows(path)
    try:
        vals = np.array([float(v) for v in rows[0]])
        if vals.size != 14:
            raise ValueError
    except (ValueError, IndexError):
        raise FileFormatError(f"{path}: expected one record of 14 numbers") from None
    Rt = vals[:12].reshape(3, 4)
    return Rt[:, :3], Rt[:, 3], float(vals[12]), float(vals[13])
