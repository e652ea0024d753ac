"""Highway lane graphs: construction, Frenet conversion, goal-lane progress.

Maps are immutable after construction and safe to share across simulator
instances. Lane centerlines are exact arc paths plus a cached 1 m polyline
with cumulative stations for cheap lookups.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import ArcPath, ArcSegment, wrap_angle

MAP_SCHEMA_VERSION = 1


class NoLaneNearby(Exception):
    """Raised when a pose cannot be projected onto any lane."""


class Topology(str, Enum):
    STANDARD = "standard"
    ON_RAMP = "on_ramp"
    MERGE = "merge"
    FORK = "fork"


@dataclass(frozen=True)
class FrenetPose:
    lane_id: int
    s: float
    d: float
    heading_offset: float = 0.0


@dataclass(frozen=True)
class RoutePlan:
    goal_lane_id: int
    goal_station: float


@dataclass
class Lane:
    """One lane: exact arc path plus cached uniform polyline.

    curvature_profile holds per-station curvature at the 1 m polyline nodes.
    end_station is the lane-local station where the lane drops (merge/ramp/
    fork stems); None for through lanes.
    """

    id: int
    path: ArcPath
    width: float
    end_station: float | None = None
    centerline: np.ndarray = field(init=False, repr=False)
    stations: np.ndarray = field(init=False, repr=False)
    curvature_profile: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("lane width must be positive")
        if any(abs(seg.kappa) > 0.1 for seg in self.path.segments):
            raise ValueError("highway curvature bound |kappa| <= 0.1 violated")
        self.centerline = self.path.sample_polyline(1.0)
        steps = np.diff(self.centerline, axis=0)
        self.stations = np.concatenate([[0.0], np.cumsum(np.hypot(steps[:, 0], steps[:, 1]))])
        n = self.centerline.shape[0]
        node_s = np.minimum(np.arange(n) * 1.0, self.path.length)
        self.curvature_profile = self.path.curvature_at(node_s)

    @property
    def length(self) -> float:
        return self.path.length


@dataclass
class LaneMap:
    lanes: list[Lane]
    topology: Topology
    speed_limit: float
    left: dict[int, int]
    right: dict[int, int]
    successors: dict[int, list[int]]

    def lane(self, lane_id: int) -> Lane:
        return self._by_id[lane_id]

    def __post_init__(self):
        self._by_id = {ln.id: ln for ln in self.lanes}

    @property
    def length(self) -> float:
        return max(ln.length for ln in self.lanes)

    def adjacent(self, lane_id: int, side: str) -> int | None:
        table = self.left if side == "left" else self.right
        return table.get(lane_id)

    def reachable(self, from_lane: int, goal_lane: int) -> bool:
        """Goal-lane reachability over left/right/successor adjacency."""
        seen = {from_lane}
        queue = [from_lane]
        while queue:
            cur = queue.pop()
            if cur == goal_lane:
                return True
            nxt = [self.left.get(cur), self.right.get(cur), *self.successors.get(cur, [])]
            for n in nxt:
                if n is not None and n not in seen:
                    seen.add(n)
                    queue.append(n)
        return False

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema_version": MAP_SCHEMA_VERSION,
            "topology": self.topology.value,
            "speed_limit": self.speed_limit,
            "lanes": [
                {
                    "id": ln.id,
                    "width": ln.width,
                    "end_station": ln.end_station,
                    "segments": [[s.x0, s.y0, s.heading0, s.kappa, s.length]
                                 for s in ln.path.segments],
                }
                for ln in self.lanes
            ],
            "left": {str(k): v for k, v in self.left.items()},
            "right": {str(k): v for k, v in self.right.items()},
            "successors": {str(k): v for k, v in self.successors.items()},
        }

    @staticmethod
    def from_dict(doc: dict) -> "LaneMap":
        if doc.get("schema_version") != MAP_SCHEMA_VERSION:
            raise ValueError("unsupported map schema version")
        lanes = [
            Lane(
                id=entry["id"],
                path=ArcPath([ArcSegment(*seg) for seg in entry["segments"]]),
                width=entry["width"],
                end_station=entry["end_station"],
            )
            for entry in doc["lanes"]
        ]
        return LaneMap(
            lanes=lanes,
            topology=Topology(doc["topology"]),
            speed_limit=doc["speed_limit"],
            left={int(k): v for k, v in doc["left"].items()},
            right={int(k): v for k, v in doc["right"].items()},
            successors={int(k): v for k, v in doc["successors"].items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "LaneMap":
        return LaneMap.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

DEFAULT_LANE_WIDTH = 3.5
DEFAULT_MAP_LENGTH = 400.0


def _reference_path(rng: np.random.Generator, curvature_scale: float,
                    length: float) -> ArcPath:
    """Reference centerline: a few constant-curvature pieces."""
    if curvature_scale <= 0.0:
        return ArcPath.from_start(0.0, 0.0, 0.0, [(0.0, length)])
    n_seg = 4
    seg_len = length / n_seg
    pieces = []
    for _ in range(n_seg):
        kappa = float(rng.uniform(-curvature_scale, curvature_scale))
        pieces.append((kappa, seg_len))
    return ArcPath.from_start(0.0, 0.0, 0.0, pieces)


def build_map(topology: Topology | str, num_lanes: int, curvature_seed: int = 0,
              curvature_scale: float = 0.0, lane_width: float = DEFAULT_LANE_WIDTH,
              length: float = DEFAULT_MAP_LENGTH,
              speed_limit: float = 30.0) -> LaneMap:
    """Build a highway map. Deterministic given the seed.

    Lane ids run left to right; extra lanes created by ramps/forks get ids
    after the base lanes. curvature_scale=0 yields straight geometry; the
    scale is owned by scenario configuration, not the map builder.
    """
    topology = Topology(topology)
    if not 1 <= num_lanes <= 5:
        raise ValueError("num_lanes must be within [1, 5]")
    if topology == Topology.MERGE and num_lanes < 2:
        raise ValueError("merge topology needs at least 2 lanes")
    # keep offset curvature under the highway bound for the widest map
    max_offset = (num_lanes + 1) * lane_width
    scale = min(curvature_scale, 0.08 / max(max_offset, 1.0))
    rng = np.random.default_rng(curvature_seed)
    ref = _reference_path(rng, scale, length)

    lanes: list[Lane] = []
    left: dict[int, int] = {}
    right: dict[int, int] = {}
    successors: dict[int, list[int]] = {}

    def add_parallel(n: int):
        for i in range(n):
            lanes.append(Lane(id=i, path=ref.offset_path(-i * lane_width),
                              width=lane_width))
        for i in range(n):
            if i > 0:
                left[i] = i - 1
            if i < n - 1:
                right[i] = i + 1

    if topology == Topology.STANDARD:
        add_parallel(num_lanes)

    elif topology == Topology.MERGE:
        add_parallel(num_lanes)
        drop = lanes[num_lanes - 1]
        end = 0.55 * drop.length
        lanes[num_lanes - 1] = Lane(id=drop.id, path=drop.path, width=lane_width,
                                    end_station=end)
        successors[num_lanes - 1] = [num_lanes - 2]

    elif topology == Topology.ON_RAMP:
        add_parallel(num_lanes)
        ramp_id = num_lanes
        sub = ref.subpath(0.15 * ref.length, 0.60 * ref.length)
        ramp_path = sub.offset_path(-num_lanes * lane_width)
        lanes.append(Lane(id=ramp_id, path=ramp_path, width=lane_width,
                          end_station=ramp_path.length))
        left[ramp_id] = num_lanes - 1
        successors[ramp_id] = [num_lanes - 1]

    elif topology == Topology.FORK:
        add_parallel(num_lanes)
        stem = lanes[num_lanes - 1]
        fork_s = 0.55 * stem.length
        stem_path = stem.path.subpath(0.0, fork_s)
        lanes[num_lanes - 1] = Lane(id=stem.id, path=stem_path, width=lane_width,
                                    end_station=stem_path.length)
        through = stem.path.subpath(fork_s, stem.path.length)
        through_id = num_lanes
        lanes.append(Lane(id=through_id, path=through, width=lane_width))
        # exit branch: S-curve shifting one width right, then parallel
        p, h = stem.path.point_at(fork_s)
        kappa_br = 0.02
        half = float(np.sqrt(lane_width / kappa_br))
        rest = max(stem.path.length - fork_s - 2 * half, 10.0)
        branch = ArcPath.from_start(float(p[0]), float(p[1]), float(h),
                                    [(-kappa_br, half), (kappa_br, half),
                                     (0.0, rest)])
        branch_id = num_lanes + 1
        lanes.append(Lane(id=branch_id, path=branch, width=lane_width))
        successors[num_lanes - 1] = [through_id, branch_id]
        if num_lanes >= 2:
            left[through_id] = num_lanes - 2
            right[num_lanes - 2] = through_id
        left[branch_id] = through_id

    return LaneMap(lanes=lanes, topology=topology, speed_limit=speed_limit,
                   left=left, right=right, successors=successors)


# ---------------------------------------------------------------------------
# Frenet conversion
# ---------------------------------------------------------------------------

def to_frenet(lane_map: LaneMap, pose) -> FrenetPose:
    """Project a world pose onto the nearest lane.

    pose: (x, y) or (x, y, heading). Nearest lane by centerline distance,
    ties broken by lower lane id; raises NoLaneNearby beyond 2 lane widths.
    """
    p = np.asarray(pose, dtype=float)
    heading = float(p[2]) if p.shape[0] > 2 else None
    point = p[:2][None, :]
    best = None
    for lane in lane_map.lanes:
        s, d, dist = lane.path.project(point)
        cand = (float(dist[0]), lane.id, float(s[0]), float(d[0]))
        if best is None or cand[0] < best[0] - 1e-12:
            best = cand
    dist, lane_id, s, d = best
    lane = lane_map.lane(lane_id)
    if dist > 2.0 * lane.width:
        raise NoLaneNearby(f"pose {p[:2]} is {dist:.1f} m from the nearest centerline")
    h_off = 0.0
    if heading is not None:
        lane_h = float(lane.path.heading_at(np.asarray(s)))
        h_off = float(wrap_angle(heading - lane_h))
    return FrenetPose(lane_id=lane_id, s=s, d=d, heading_offset=h_off)


def from_frenet(lane_map: LaneMap, fr: FrenetPose):
    """World pose (x, y, heading) for a Frenet pose. Exact on arc geometry."""
    lane = lane_map.lane(fr.lane_id)
    if fr.s < -1e-9 or fr.s > lane.length + 1e-9:
        raise ValueError(f"station {fr.s:.2f} beyond lane length {lane.length:.2f}")
    pt, heading = lane.path.point_at(np.asarray(fr.s), np.asarray(fr.d))
    return np.array([pt[0], pt[1], wrap_angle(heading + fr.heading_offset)])


def project_to_lane(lane_map: LaneMap, lane_id: int, point,
                    require_interior: bool = True):
    """(s, d, dist) of a point on one specific lane."""
    lane = lane_map.lane(lane_id)
    s, d, dist = lane.path.project(np.asarray(point, dtype=float)[None, :2])
    s, d, dist = float(s[0]), float(d[0]), float(dist[0])
    if require_interior and (s <= 1e-9 or s >= lane.length - 1e-9):
        raise NoLaneNearby(f"point projects outside lane {lane_id} extent")
    return s, d, dist


def projected_progress(lane_map: LaneMap, route: RoutePlan, pose_a, pose_b):
    """Goal-lane progress between two poses.

    Returns (d_travel, d_lane): station difference of the two projections on
    the goal lane, and the distance from pose_a to its projection.
    """
    s_a, _, dist_a = project_to_lane(lane_map, route.goal_lane_id, pose_a)
    s_b, _, _ = project_to_lane(lane_map, route.goal_lane_id, pose_b)
    return s_b - s_a, dist_a
