"""Scenario reward: progress along the goal lane, collision penalty, and
lane-following terms, combined linearly with fixed weights.

evaluate_segment() is the single evaluation path shared by the live
simulator and counterfactual replay, so imagined rewards for the taken
trajectory reproduce the stored reward exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import obb_overlap_many
from .lane_map import LaneMap, NoLaneNearby, RoutePlan, projected_progress
from .traj_sampler import Trajectory


@dataclass(frozen=True)
class RewardWeights:
    progress: float = 0.6
    collision: float = 40.0
    lane: float = 1.0


LANE_LOST_DISTANCE = 21.0  # beyond ~6 lane widths there is no lane to follow


def progress_reward(lane_map: LaneMap, route: RoutePlan, pose_t, pose_next) -> float:
    """Goal-lane progress, discounted by the distance from the lane."""
    d_travel, d_lane = projected_progress(lane_map, route, pose_t, pose_next)
    return float(np.exp(-0.2 * d_lane) * d_travel)


def collision_reward(collided: bool) -> float:
    """-1 when the transition ended in a collision, else 0."""
    return -1.0 if collided else 0.0


def lane_reward(lane_map: LaneMap, route: RoutePlan, traj: Trajectory) -> float:
    """Negative summed distance from each waypoint to the goal lane.

    Waypoints beyond the lane extent use the distance to the clamped
    projection; a waypoint farther than LANE_LOST_DISTANCE raises.
    """
    lane = lane_map.lane(route.goal_lane_id)
    _, _, dist = lane.path.project(traj.waypoints)
    if np.any(dist > LANE_LOST_DISTANCE):
        raise NoLaneNearby("trajectory waypoint far from the goal lane")
    return float(-np.sum(dist))


def total_reward(weights: RewardWeights, r_progress: float, r_collision: float,
                 r_lane: float) -> float:
    return (weights.progress * r_progress
            + weights.collision * r_collision
            + weights.lane * r_lane)


@dataclass(frozen=True)
class SegmentOutcome:
    reward: float
    r_progress: float
    r_collision: float
    r_lane: float
    collided: bool
    end_substep: int      # 1-based index of the last evaluated substep
    d_travel: float
    d_lane: float


def evaluate_segment(lane_map: LaneMap, route: RoutePlan, start_pose,
                     traj: Trajectory, actor_boxes, ego_dims,
                     n_substeps: int, weights: RewardWeights) -> SegmentOutcome:
    """Reward for executing the first n_substeps of traj against recorded
    actor boxes.

    actor_boxes: (k, n_actors, 5) boxes after each substep update, k >=
    the number of substeps actually available (an episode that terminated
    early recorded fewer). The walk stops at the first collision.
    """
    return evaluate_segments(lane_map, route, start_pose, [traj], actor_boxes,
                             ego_dims, n_substeps, weights)[0]


def evaluate_segments(lane_map: LaneMap, route: RoutePlan, start_pose, trajs,
                      actor_boxes, ego_dims, n_substeps: int,
                      weights: RewardWeights) -> list:
    """Batched segment evaluation: same recorded actor motion, many
    candidate trajectories (the counterfactual workload)."""
    length, width = ego_dims
    n = len(trajs)
    k = min(n_substeps, len(actor_boxes))
    goal = lane_map.lane(route.goal_lane_id)

    collided = np.zeros(n, dtype=bool)
    end = np.full(n, k if k >= 1 else 0, dtype=int)
    for i in range(1, k + 1):
        boxes = np.asarray(actor_boxes[i - 1])
        if boxes.shape[0] == 0:
            continue
        live = ~collided
        if not live.any():
            break
        poses = np.stack([trajs[j].pose_at_substep(i)
                          for j in np.nonzero(live)[0]])
        ego_boxes = np.column_stack([poses[:, 0], poses[:, 1], poses[:, 2],
                                     np.full(len(poses), length),
                                     np.full(len(poses), width)])
        hits = obb_overlap_many(ego_boxes, boxes).any(axis=1)
        idxs = np.nonzero(live)[0][hits]
        collided[idxs] = True
        end[idxs] = i

    end_poses = np.stack([
        trajs[j].pose_at_substep(int(end[j])) if end[j] >= 1
        else np.asarray(start_pose, dtype=float)
        for j in range(n)])

    # progress: projections of the start pose and each end pose on the goal lane
    s_start, _, dist_start = goal.path.project(
        np.asarray(start_pose, dtype=float)[None, :2])
    s_end, _, _ = goal.path.project(end_poses[:, :2])
    start_ok = 1e-9 < float(s_start[0]) < goal.length - 1e-9
    end_ok = (s_end > 1e-9) & (s_end < goal.length - 1e-9)
    d_travel = np.where(end_ok & start_ok, s_end - float(s_start[0]), 0.0)
    d_lane = np.where(end_ok & start_ok, float(dist_start[0]),
                      LANE_LOST_DISTANCE)
    r_p = np.where(end_ok & start_ok, np.exp(-0.2 * d_lane) * d_travel, 0.0)

    # lane term over every waypoint of every candidate, one projection call;
    # distances clamp at the lane-lost bound so imagined rollouts never raise
    all_wp = np.concatenate([t.waypoints for t in trajs], axis=0)
    _, _, dist = goal.path.project(all_wp)
    dist = np.minimum(dist, LANE_LOST_DISTANCE)
    n_wp = trajs[0].waypoints.shape[0]
    r_l = -dist.reshape(n, n_wp).sum(axis=1)

    out = []
    for j in range(n):
        r_c = collision_reward(bool(collided[j]))
        out.append(SegmentOutcome(
            reward=total_reward(weights, float(r_p[j]), r_c, float(r_l[j])),
            r_progress=float(r_p[j]), r_collision=r_c, r_lane=float(r_l[j]),
            collided=bool(collided[j]), end_substep=int(end[j]),
            d_travel=float(d_travel[j]), d_lane=float(d_lane[j])))
    return out
