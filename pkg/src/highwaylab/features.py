"""Ego-centric BEV rasterization and trajectory kinematic features.

The raster layout is fixed: T' actor-history masks (oldest first), T'
ego-history masks, M map channels (centerlines, lane boundaries, drivable
area, goal route), and 2 normalized coordinate channels. Values stay in
[-1, 1]. Rows run longitudinal (x forward), columns lateral (y left).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle
from .simulator import Snapshot
from .traj_sampler import Trajectory


@dataclass(frozen=True)
class RasterConfig:
    resolution: float = 0.5    # m per pixel
    height: int = 256          # longitudinal pixels
    width: int = 128           # lateral pixels
    x_back: float = 40.0       # meters behind the ego
    history_frames: int = 10
    map_channels: int = 4

    @property
    def n_channels(self) -> int:
        return 2 * self.history_frames + self.map_channels + 2

    @property
    def x_min(self) -> float:
        return -self.x_back

    @property
    def y_min(self) -> float:
        return -self.width * self.resolution / 2.0


DESK_RASTER = RasterConfig(resolution=0.8, height=96, width=96, x_back=24.0)
TINY_RASTER = RasterConfig(resolution=2.0, height=16, width=16, x_back=12.0)

_CENTER_CACHE: dict = {}


def _pixel_centers(cfg: RasterConfig):
    """Ego-frame pixel center coordinates, cached per config."""
    key = (cfg.resolution, cfg.height, cfg.width, cfg.x_back)
    if key not in _CENTER_CACHE:
        xs = cfg.x_min + (np.arange(cfg.height) + 0.5) * cfg.resolution
        ys = cfg.y_min + (np.arange(cfg.width) + 0.5) * cfg.resolution
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        _CENTER_CACHE[key] = np.stack([gx, gy], axis=-1)
    return _CENTER_CACHE[key]


def world_to_ego(points, ego_pose):
    """Rotate/translate world points into the ego frame."""
    p = np.asarray(points, dtype=float)
    c, s = math.cos(ego_pose[2]), math.sin(ego_pose[2])
    shifted = p[..., :2] - np.asarray(ego_pose[:2])
    x = shifted[..., 0] * c + shifted[..., 1] * s
    y = -shifted[..., 0] * s + shifted[..., 1] * c
    return np.stack([x, y], axis=-1)


def ego_to_world(points, ego_pose):
    p = np.asarray(points, dtype=float)
    c, s = math.cos(ego_pose[2]), math.sin(ego_pose[2])
    x = p[..., 0] * c - p[..., 1] * s + ego_pose[0]
    y = p[..., 0] * s + p[..., 1] * c + ego_pose[1]
    return np.stack([x, y], axis=-1)


def _paint_box(mask, center_xy, heading, length, width, cfg: RasterConfig):
    """Mark pixels whose centers fall inside an ego-frame oriented box."""
    cx, cy = center_xy
    half_diag = math.hypot(length, width) / 2.0
    i_lo = int(math.floor((cx - half_diag - cfg.x_min) / cfg.resolution - 0.5))
    i_hi = int(math.ceil((cx + half_diag - cfg.x_min) / cfg.resolution - 0.5))
    j_lo = int(math.floor((cy - half_diag - cfg.y_min) / cfg.resolution - 0.5))
    j_hi = int(math.ceil((cy + half_diag - cfg.y_min) / cfg.resolution - 0.5))
    i_lo, i_hi = max(i_lo, 0), min(i_hi, cfg.height - 1)
    j_lo, j_hi = max(j_lo, 0), min(j_hi, cfg.width - 1)
    if i_lo > i_hi or j_lo > j_hi:
        return
    ii = np.arange(i_lo, i_hi + 1)
    jj = np.arange(j_lo, j_hi + 1)
    px = cfg.x_min + (ii + 0.5) * cfg.resolution
    py = cfg.y_min + (jj + 0.5) * cfg.resolution
    gx, gy = np.meshgrid(px, py, indexing="ij")
    dx = gx - cx
    dy = gy - cy
    ch, sh = math.cos(heading), math.sin(heading)
    lon = dx * ch + dy * sh
    lat = -dx * sh + dy * ch
    inside = (np.abs(lon) <= length / 2.0) & (np.abs(lat) <= width / 2.0)
    mask[i_lo:i_hi + 1, j_lo:j_hi + 1][inside] = 1.0


def rasterize(snapshot: Snapshot, cfg: RasterConfig) -> np.ndarray:
    """BEV tensor (H, W, 2T' + M + 2), ego-centric at the current pose."""
    tp = cfg.history_frames
    out = np.zeros((cfg.height, cfg.width, cfg.n_channels), dtype=np.float32)
    ego_pose = (snapshot.ego.x, snapshot.ego.y, snapshot.ego.heading)

    # actor and ego history masks, oldest frame in channel 0
    for actor, history in zip(snapshot.actors, snapshot.actor_histories):
        frames = history[-tp:]
        for k, (x, y, h) in enumerate(frames):
            ch = k + (tp - len(frames))
            exy = world_to_ego(np.array([x, y]), ego_pose)
            _paint_box(out[:, :, ch], exy, h - ego_pose[2],
                       actor.length, actor.width, cfg)
    frames = snapshot.ego_history[-tp:]
    for k, (x, y, h) in enumerate(frames):
        ch = tp + k + (tp - len(frames))
        exy = world_to_ego(np.array([x, y]), ego_pose)
        _paint_box(out[:, :, ch], exy, h - ego_pose[2],
                   snapshot.ego.length, snapshot.ego.width, cfg)

    # map channels from goal-frame projections of the pixel centers
    centers_world = ego_to_world(_pixel_centers(cfg), ego_pose).reshape(-1, 2)
    base = 2 * tp
    drivable = np.zeros(centers_world.shape[0], dtype=bool)
    centerlines = np.zeros_like(drivable)
    boundaries = np.zeros_like(drivable)
    for lane in snapshot.lane_map.lanes:
        s, d, dist = lane.path.project(centers_world)
        limit = lane.end_station if lane.end_station is not None else lane.length
        in_range = (s > 1e-6) & (s < limit - 1e-6)
        half = lane.width / 2.0
        drivable |= in_range & (np.abs(d) <= half)
        centerlines |= in_range & (np.abs(d) <= 0.35)
        boundaries |= in_range & (np.abs(np.abs(d) - half) <= 0.35)
    goal = snapshot.lane_map.lane(snapshot.route.goal_lane_id)
    s, d, _ = goal.path.project(centers_world)
    route = (s > 1e-6) & (s < goal.length - 1e-6) & (np.abs(d) <= goal.width / 2.0)
    shape = (cfg.height, cfg.width)
    out[:, :, base + 0] = centerlines.reshape(shape)
    out[:, :, base + 1] = boundaries.reshape(shape)
    out[:, :, base + 2] = drivable.reshape(shape)
    out[:, :, base + 3] = route.reshape(shape)

    # normalized coordinate channels: corners at (-1,-1) and (1,1)
    out[:, :, base + 4] = np.linspace(-1.0, 1.0, cfg.height)[:, None]
    out[:, :, base + 5] = np.linspace(-1.0, 1.0, cfg.width)[None, :]
    return out


# ---------------------------------------------------------------------------
# Trajectory kinematic features
# ---------------------------------------------------------------------------

KIN_FEATURES = 7  # x, y, v, a, heading, kappa, kappa_dot
_KIN_SCALE = np.array([1 / 50.0, 1 / 10.0, 1 / 10.0, 1 / 3.0, 1.0, 10.0, 10.0])


def trajectory_kinematics(snapshot: Snapshot, traj: Trajectory) -> np.ndarray:
    """(T, 7) per-waypoint kinematics in the ego frame, scaled for the MLPs.

    Order per timestep: x, y, v, a, heading, kappa, kappa_dot.
    """
    return batch_kinematics(snapshot, [traj])[0]


def batch_kinematics(snapshot: Snapshot, trajs) -> np.ndarray:
    """(N, T, 7) kinematic features for a whole candidate set at once."""
    ego_pose = (snapshot.ego.x, snapshot.ego.y, snapshot.ego.heading)
    wp = np.stack([t.waypoints for t in trajs])            # (N, T, 2)
    xy = world_to_ego(wp, ego_pose)
    heading = np.stack([t.heading for t in trajs])
    rel_heading = wrap_angle(heading - ego_pose[2])
    kin = np.stack([xy[..., 0], xy[..., 1],
                    np.stack([t.v for t in trajs]),
                    np.stack([t.a for t in trajs]),
                    rel_heading,
                    np.stack([t.kappa for t in trajs]),
                    np.stack([t.kappa_dot for t in trajs])], axis=-1)
    return (kin * _KIN_SCALE[None, None, :]).astype(np.float32)


def waypoints_to_pixels(snapshot: Snapshot, waypoints, cfg: RasterConfig):
    """Fractional pixel indices (row, col) of world waypoints; integer values
    are pixel centers."""
    ego_pose = (snapshot.ego.x, snapshot.ego.y, snapshot.ego.heading)
    exy = world_to_ego(np.asarray(waypoints), ego_pose)
    rows = (exy[..., 0] - cfg.x_min) / cfg.resolution - 0.5
    cols = (exy[..., 1] - cfg.y_min) / cfg.resolution - 0.5
    return np.stack([rows, cols], axis=-1).astype(np.float32)


def batch_pixels(snapshot: Snapshot, trajs, cfg: RasterConfig) -> np.ndarray:
    """(N, T, 2) fractional raster pixel indices for a candidate set."""
    wp = np.stack([t.waypoints for t in trajs])
    return waypoints_to_pixels(snapshot, wp, cfg)


# ---------------------------------------------------------------------------
# Compact raster storage for replay
# ---------------------------------------------------------------------------

def pack_raster(raster: np.ndarray, cfg: RasterConfig) -> np.ndarray:
    """Bit-pack the binary mask channels; coordinate channels are implicit."""
    binary = raster[:, :, :cfg.n_channels - 2]
    return np.packbits(binary.astype(bool), axis=None)


def unpack_raster(packed: np.ndarray, cfg: RasterConfig) -> np.ndarray:
    n_binary = cfg.n_channels - 2
    shape = (cfg.height, cfg.width, n_binary)
    bits = np.unpackbits(packed, count=int(np.prod(shape))).reshape(shape)
    out = np.empty((cfg.height, cfg.width, cfg.n_channels), dtype=np.float32)
    out[:, :, :n_binary] = bits
    out[:, :, n_binary] = np.linspace(-1.0, 1.0, cfg.height)[:, None]
    out[:, :, n_binary + 1] = np.linspace(-1.0, 1.0, cfg.width)[None, :]
    return out
