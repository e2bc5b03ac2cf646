"""Closed-course track geometry: lateral offset, arc progress, and the
quadratic on-track cost field.

The centerline polygon is resampled to a uniform ~0.1 m polyline at
construction and indexed by a coarse grid that stores, per cell, the
nearest resampled vertex of the cell center plus a candidate window wide
enough to cover every point in the cell. Queries scan only that window
(falling back to a full scan outside the padded grid), so results are
exact everywhere while staying cheap enough for planner-side batches.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Union

import numpy as np

from . import _kernels as K

RESAMPLE_SPACING = 0.15  # m between resampled centerline vertices
GRID_CELL = 0.4          # m, candidate-index grid resolution
GRID_PAD = 8.0           # m of grid beyond the centerline bounding box
FAR_MARGIN = 0.5         # m of slack before a cell takes the far shortcut


class TrackMap:
    """Closed centerline loop with half-width and precomputed query index."""

    def __init__(self, centerline, half_width: float = 1.5):
        pts = np.asarray(centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 8:
            raise ValueError("centerline must be at least 8 (x, y) points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("centerline contains non-finite points")
        if half_width <= 0:
            raise ValueError("half_width must be positive")
        # Drop an explicit closing point; the loop closes implicitly.
        if np.allclose(pts[0], pts[-1]):
            pts = pts[:-1]
        diffs = np.roll(pts, -1, axis=0) - pts
        seg = np.hypot(diffs[:, 0], diffs[:, 1])
        if np.any(seg <= 1e-9):
            raise ValueError("consecutive centerline points must be distinct")
        self.half_width = float(half_width)
        self.source_points = pts
        self._resample(pts, seg)
        self._build_grid()

    def _resample(self, pts: np.ndarray, seg: np.ndarray) -> None:
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = cum[-1]
        n = max(16, int(math.ceil(total / RESAMPLE_SPACING)))
        s = np.linspace(0.0, total, n, endpoint=False)
        idx = np.searchsorted(cum, s, side="right") - 1
        idx = np.clip(idx, 0, len(pts) - 1)
        frac = (s - cum[idx]) / seg[idx]
        nxt = (idx + 1) % len(pts)
        verts = pts[idx] + frac[:, None] * (pts[nxt] - pts[idx])
        d = np.roll(verts, -1, axis=0) - verts
        self.vertices = np.ascontiguousarray(verts)
        self.segment_lengths = np.hypot(d[:, 0], d[:, 1])
        self.cum_arc = np.concatenate(
            [[0.0], np.cumsum(self.segment_lengths)])[:-1].copy()
        self.total_length = float(np.sum(self.segment_lengths))

    def _build_grid(self) -> None:
        v = self.vertices
        nv = len(v)
        x0 = float(v[:, 0].min() - GRID_PAD)
        y0 = float(v[:, 1].min() - GRID_PAD)
        nx = int(math.ceil((v[:, 0].max() + GRID_PAD - x0) / GRID_CELL))
        ny = int(math.ceil((v[:, 1].max() + GRID_PAD - y0) / GRID_CELL))
        cx = x0 + (np.arange(nx) + 0.5) * GRID_CELL
        cy = y0 + (np.arange(ny) + 0.5) * GRID_CELL
        centers = np.stack(np.meshgrid(cx, cy), axis=-1).reshape(-1, 2)
        ncells = centers.shape[0]
        cell_v0 = np.empty(ncells, dtype=np.int64)
        cell_win = np.empty(ncells, dtype=np.int64)
        cell_far = np.empty(ncells, dtype=np.bool_)
        # Any vertex that can be nearest to some point of the cell lies
        # within d(center, nearest) + cell diagonal (+ a vertex spacing of
        # slack for the segment endpoints).
        slack = GRID_CELL * math.sqrt(2.0) + 2.0 * RESAMPLE_SPACING
        half_diag = GRID_CELL * math.sqrt(2.0) / 2.0
        # Cells whose every point is provably beyond the crash band can
        # use the O(1) nearest-vertex shortcut: cost and crash saturate
        # out there, so the spacing-sized offset error is invisible.
        far_cut = 2.0 * self.half_width + FAR_MARGIN + half_diag + RESAMPLE_SPACING
        chunk = 4096
        all_idx = np.arange(nv)
        for lo in range(0, ncells, chunk):
            c = centers[lo:lo + chunk]
            d = np.hypot(c[:, None, 0] - v[None, :, 0],
                         c[:, None, 1] - v[None, :, 1])
            v0 = np.argmin(d, axis=1)
            dmin = d[np.arange(len(c)), v0]
            qualify = d <= (dmin + slack)[:, None]
            off = np.abs(all_idx[None, :] - v0[:, None])
            off = np.minimum(off, nv - off)
            off[~qualify] = 0
            cell_v0[lo:lo + chunk] = v0
            cell_win[lo:lo + chunk] = off.max(axis=1)
            cell_far[lo:lo + chunk] = dmin > far_cut
        self._grid_x0 = x0
        self._grid_y0 = y0
        self._grid_nx = nx
        self._grid_ny = ny
        self._cell_v0 = cell_v0
        self._cell_win = cell_win
        self._cell_far = cell_far

    def kernel_args(self) -> tuple:
        """Positional arguments consumed by the track kernels."""
        return (self.vertices, self.segment_lengths, self.cum_arc,
                self.total_length, self._grid_x0, self._grid_y0, GRID_CELL,
                self._grid_nx, self._grid_ny, self._cell_v0, self._cell_win,
                self._cell_far)

    def query(self, xs, ys) -> tuple[np.ndarray, np.ndarray]:
        """Lateral distance and arc position for arrays of points."""
        xs = np.ascontiguousarray(np.atleast_1d(xs), dtype=float)
        ys = np.ascontiguousarray(np.atleast_1d(ys), dtype=float)
        e = np.empty_like(xs)
        s = np.empty_like(xs)
        K.track_query_batch(xs, ys, *self.kernel_args(), e, s)
        return e, s

    def lateral_offset(self, x: float, y: float) -> float:
        e, _ = self.query(x, y)
        return float(e[0])

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps({
            "half_width": self.half_width,
            "centerline": self.source_points.tolist(),
        }))

    @staticmethod
    def load(path: Union[str, Path]) -> "TrackMap":
        doc = json.loads(Path(path).read_text())
        return TrackMap(doc["centerline"], half_width=doc["half_width"])


def track_cost(track: TrackMap, x: float, y: float) -> float:
    """0 on the centerline, (offset/half_width)^2 on track, 1 off track."""
    e = track.lateral_offset(x, y)
    return min(1.0, (e / track.half_width) ** 2)


def progress(track: TrackMap, x: float, y: float) -> float:
    """Arc-length fraction of the nearest centerline point, in [0, 1)."""
    _, s = track.query(x, y)
    p = float(s[0]) / track.total_length
    return p if p < 1.0 else 0.0


def stadium_oval(straight: float = 30.0, radius: float = 10.0,
                 half_width: float = 1.5, points_per_arc: int = 48) -> TrackMap:
    """Default course: two straights joined by semicircular turns (CCW).

    The start line (arc position 0) sits at the middle of the lower
    straight, heading +x.
    """
    pts = []
    half = straight / 2.0
    n_straight = max(8, int(straight / 0.5))
    # lower straight, from (-half, -radius) to (half, -radius), drive +x
    for i in range(n_straight):
        pts.append((-half + straight * i / n_straight, -radius))
    # right turn, CCW from angle -pi/2 to +pi/2 around (half, 0)
    for i in range(points_per_arc):
        a = -math.pi / 2 + math.pi * i / points_per_arc
        pts.append((half + radius * math.cos(a), radius * math.sin(a)))
    # upper straight, drive -x
    for i in range(n_straight):
        pts.append((half - straight * i / n_straight, radius))
    # left turn, CCW from pi/2 to 3pi/2 around (-half, 0)
    for i in range(points_per_arc):
        a = math.pi / 2 + math.pi * i / points_per_arc
        pts.append((-half + radius * math.cos(a), radius * math.sin(a)))
    arr = np.array(pts)
    # rotate the list so arc 0 is the mid-lower-straight start line
    start = np.argmin(np.hypot(arr[:, 0] - 0.0, arr[:, 1] + radius))
    arr = np.roll(arr, -start, axis=0)
    return TrackMap(arr, half_width=half_width)
