"""Planar geometry primitives: constant-curvature arc paths and oriented boxes.

Arc paths are the exact representation behind lane centerlines. Keeping the
analytic arcs (instead of only a polyline) makes station/offset conversions
exact, which the rest of the stack relies on for round-trip guarantees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def wrap_angle(theta):
    """Wrap angle(s) to (-pi, pi]."""
    return np.mod(np.asarray(theta) + np.pi, 2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class ArcSegment:
    """One constant-curvature piece: start pose, curvature (1/m), length (m)."""

    x0: float
    y0: float
    heading0: float
    kappa: float
    length: float


class ArcPath:
    """Piecewise constant-curvature path with continuous heading.

    Stations are arc length from the path start. Lateral offsets are signed
    left-positive. All queries are vectorized over numpy arrays.
    """

    def __init__(self, segments: list[ArcSegment]):
        if not segments:
            raise ValueError("ArcPath needs at least one segment")
        self.segments = segments
        self._x0 = np.array([s.x0 for s in segments])
        self._y0 = np.array([s.y0 for s in segments])
        self._h0 = np.array([s.heading0 for s in segments])
        self._k = np.array([s.kappa for s in segments])
        self._len = np.array([s.length for s in segments])
        self._start = np.concatenate([[0.0], np.cumsum(self._len)])
        self.length = float(self._start[-1])

    @staticmethod
    def from_start(x0: float, y0: float, heading0: float,
                   pieces: list[tuple[float, float]]) -> "ArcPath":
        """Chain (kappa, length) pieces from a start pose."""
        segs = []
        x, y, h = x0, y0, heading0
        for kappa, length in pieces:
            segs.append(ArcSegment(x, y, h, kappa, length))
            x, y, h = _advance(x, y, h, kappa, length)
        return ArcPath(segs)

    def _segment_index(self, s):
        idx = np.searchsorted(self._start, s, side="right") - 1
        return np.clip(idx, 0, len(self.segments) - 1)

    def point_at(self, s, d=0.0, extrapolate: bool = False):
        """World point(s) and heading(s) at station s, lateral offset d.

        With extrapolate=False, stations outside [0, length] raise ValueError.
        """
        s = np.asarray(s, dtype=float)
        d = np.broadcast_to(np.asarray(d, dtype=float), s.shape)
        if not extrapolate:
            if np.any(s < -1e-9) or np.any(s > self.length + 1e-9):
                raise ValueError(f"station out of range [0, {self.length:.2f}]")
        idx = self._segment_index(s)
        u = s - self._start[idx]
        x0, y0, h0, k = self._x0[idx], self._y0[idx], self._h0[idx], self._k[idx]
        straight = np.abs(k) < 1e-12
        heading = h0 + k * u
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = np.where(straight, x0 + u * np.cos(h0),
                          x0 + (np.sin(h0 + k * u) - np.sin(h0)) / np.where(straight, 1.0, k))
            yc = np.where(straight, y0 + u * np.sin(h0),
                          y0 + (-np.cos(h0 + k * u) + np.cos(h0)) / np.where(straight, 1.0, k))
        x = xc + d * (-np.sin(heading))
        y = yc + d * np.cos(heading)
        return np.stack([x, y], axis=-1), heading

    def curvature_at(self, s):
        s = np.asarray(s, dtype=float)
        return self._k[self._segment_index(s)]

    def project(self, points):
        """Project points (N, 2) onto the path.

        Returns (s, d, dist): station clamped to [0, length], signed lateral
        offset (left positive), and the Euclidean distance to the path. For
        interior projections dist == |d|.
        """
        q = np.atleast_2d(np.asarray(points, dtype=float))
        n_pts, n_seg = q.shape[0], len(self.segments)
        px = q[:, 0][:, None]
        py = q[:, 1][:, None]
        x0, y0, h0 = self._x0[None, :], self._y0[None, :], self._h0[None, :]
        k, ln = self._k[None, :], self._len[None, :]
        straight = np.abs(k) < 1e-12

        # straight candidate
        tx, ty = np.cos(h0), np.sin(h0)
        u_str = (px - x0) * tx + (py - y0) * ty
        # arc candidate: angle of the point around the arc center
        with np.errstate(divide="ignore", invalid="ignore"):
            r = 1.0 / np.where(straight, 1.0, k)
        # center sits on the left normal at signed radius 1/k
        cx = x0 + r * (-np.sin(h0))
        cy = y0 + r * np.cos(h0)
        ang = np.arctan2(py - cy, px - cx)
        # position angle at station u (for k>0): h0 - pi/2 + k*u; for k<0: h0 + pi/2 + k*u
        ang0 = h0 - np.sign(k) * (np.pi / 2.0)
        u_arc = wrap_angle(ang - ang0) / np.where(straight, 1.0, k)

        u = np.where(straight, u_str, u_arc)
        u = np.clip(u, 0.0, ln)
        s_cand = self._start[None, :-1] + u

        heading = h0 + k * u
        with np.errstate(divide="ignore", invalid="ignore"):
            bx = np.where(straight, x0 + u * np.cos(h0),
                          x0 + (np.sin(h0 + k * u) - np.sin(h0)) / np.where(straight, 1.0, k))
            by = np.where(straight, y0 + u * np.sin(h0),
                          y0 + (-np.cos(h0 + k * u) + np.cos(h0)) / np.where(straight, 1.0, k))
        dxp = px - bx
        dyp = py - by
        d_signed = -np.sin(heading) * dxp + np.cos(heading) * dyp
        dist = np.hypot(dxp, dyp)

        best = np.argmin(dist, axis=1)
        rows = np.arange(n_pts)
        return s_cand[rows, best], d_signed[rows, best], dist[rows, best]

    def heading_at(self, s, extrapolate: bool = False):
        _, h = self.point_at(s, 0.0, extrapolate=extrapolate)
        return h

    def offset_path(self, d: float) -> "ArcPath":
        """Parallel path at constant left offset d (exact for arcs).

        Requires |d| < min turn radius; each arc keeps its swept angle.
        """
        segs = []
        for seg in self.segments:
            scale = 1.0 - seg.kappa * d
            if scale <= 0.05:
                raise ValueError("offset exceeds arc radius")
            p, h = ArcPath([seg]).point_at(0.0, d)
            segs.append(ArcSegment(float(p[0]), float(p[1]), seg.heading0,
                                   seg.kappa / scale, seg.length * scale))
        return ArcPath(segs)

    def subpath(self, s_from: float, s_to: float) -> "ArcPath":
        """Path restricted to stations [s_from, s_to]."""
        if not (0.0 <= s_from < s_to <= self.length + 1e-9):
            raise ValueError("bad subpath range")
        segs = []
        for i, seg in enumerate(self.segments):
            a = max(s_from, self._start[i])
            b = min(s_to, self._start[i + 1])
            if b - a <= 1e-9:
                continue
            p, h = self.point_at(a)
            segs.append(ArcSegment(float(p[0]), float(p[1]), float(h),
                                   seg.kappa, float(b - a)))
        return ArcPath(segs)

    def sample_polyline(self, step: float = 1.0):
        """Uniformly resampled polyline including both endpoints."""
        n = max(int(math.ceil(self.length / step)), 1)
        s = np.minimum(np.arange(n + 1) * step, self.length)
        pts, _ = self.point_at(s)
        return pts


def _advance(x, y, h, kappa, length):
    if abs(kappa) < 1e-12:
        return x + length * math.cos(h), y + length * math.sin(h), h
    h1 = h + kappa * length
    x1 = x + (math.sin(h1) - math.sin(h)) / kappa
    y1 = y + (-math.cos(h1) + math.cos(h)) / kappa
    return x1, y1, h1


# ---------------------------------------------------------------------------
# Oriented bounding boxes
# ---------------------------------------------------------------------------

def box_corners(cx, cy, heading, length, width):
    """Corners (4, 2) of an oriented box, CCW starting rear-right."""
    hl, hw = length / 2.0, width / 2.0
    local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
    c, s = math.cos(heading), math.sin(heading)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def boxes_corners(boxes):
    """Vectorized corners for boxes (N, 5) as rows (cx, cy, heading, len, wid)."""
    b = np.atleast_2d(np.asarray(boxes, dtype=float))
    hl = b[:, 3] / 2.0
    hw = b[:, 4] / 2.0
    sign_l = np.array([-1.0, 1.0, 1.0, -1.0])
    sign_w = np.array([-1.0, -1.0, 1.0, 1.0])
    lx = sign_l[None, :] * hl[:, None]
    wy = sign_w[None, :] * hw[:, None]
    c = np.cos(b[:, 2])[:, None]
    s = np.sin(b[:, 2])[:, None]
    x = b[:, 0][:, None] + lx * c - wy * s
    y = b[:, 1][:, None] + lx * s + wy * c
    return np.stack([x, y], axis=-1)


def obb_overlap(box_a, box_b) -> bool:
    """Closed-overlap test (touching counts) via the separating axis theorem."""
    return bool(obb_overlap_many(np.asarray(box_a)[None, :],
                                 np.asarray(box_b)[None, :])[0, 0])


def obb_overlap_many(boxes_a, boxes_b):
    """Pairwise overlap matrix (N, M) for two box arrays (rows cx,cy,h,l,w)."""
    a = np.atleast_2d(np.asarray(boxes_a, dtype=float))
    b = np.atleast_2d(np.asarray(boxes_b, dtype=float))
    ca = boxes_corners(a)  # (N,4,2)
    cb = boxes_corners(b)  # (M,4,2)
    # candidate axes: each box's two edge normals
    ax_a = np.stack([np.stack([np.cos(a[:, 2]), np.sin(a[:, 2])], axis=-1),
                     np.stack([-np.sin(a[:, 2]), np.cos(a[:, 2])], axis=-1)], axis=1)
    ax_b = np.stack([np.stack([np.cos(b[:, 2]), np.sin(b[:, 2])], axis=-1),
                     np.stack([-np.sin(b[:, 2]), np.cos(b[:, 2])], axis=-1)], axis=1)
    n, m = a.shape[0], b.shape[0]
    overlap = np.ones((n, m), dtype=bool)
    for axes, owner in ((ax_a, "a"), (ax_b, "b")):
        for j in range(2):
            if owner == "a":
                axis = axes[:, j, :][:, None, :]            # (N,1,2)
            else:
                axis = axes[:, j, :][None, :, :]            # (1,M,2)
            pa = np.einsum("nkc,nmc->nmk", ca, np.broadcast_to(axis, (n, m, 2)))
            pb = np.einsum("mkc,nmc->nmk", cb, np.broadcast_to(axis, (n, m, 2)))
            # closed overlap: touching counts, so require a real gap (a nm,
            # above float noise at map scale) to declare separation
            eps = 1e-9
            sep = (pa.max(axis=2) < pb.min(axis=2) - eps) | (pb.max(axis=2) < pa.min(axis=2) - eps)
            overlap &= ~sep
    return overlap


def obb_distance(box_a, box_b) -> float:
    """Euclidean gap between two oriented boxes; 0 when overlapping."""
    if obb_overlap(box_a, box_b):
        return 0.0
    ca = box_corners(*box_a)
    cb = box_corners(*box_b)
    best = math.inf
    for pts, poly in ((ca, cb), (cb, ca)):
        for p in pts:
            for i in range(4):
                q0, q1 = poly[i], poly[(i + 1) % 4]
                best = min(best, _point_segment_dist(p, q0, q1))
    return best


def _point_segment_dist(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    proj = a + t * ab
    return float(np.hypot(*(p - proj)))
