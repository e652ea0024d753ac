"""Closed-loop episode engine.

One simulator instance owns its mutable WorldState and is single-threaded;
actor decisions are computed from the pre-substep snapshot and applied
simultaneously, so actor list order cannot change outcomes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .actors import (ActorState, BehaviorScript, IDMParams, LaneChange,
                     MOBILParams, NeighborView, Override, ScriptState,
                     WorldView, apply_script, idm_accel, mobil_decision,
                     step_actor)
from .geometry import obb_overlap_many
from .lane_map import LaneMap, NoLaneNearby, RoutePlan, to_frenet
from .reward import RewardWeights, SegmentOutcome, evaluate_segment
from .traj_sampler import Trajectory

EGO_ID = -1
DT = 0.1
HISTORY_FRAMES = 10
SPEEDING_MARGIN = 1.0     # m/s over the limit
SPEEDING_WINDOW = 0.5     # sustained seconds before the violation fires
MOBIL_PERIOD = 10         # substeps between lane-change evaluations


class InvalidScenario(Exception):
    pass


class PolicyError(Exception):
    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log


class Intention(str, Enum):
    LANE_FOLLOW = "lane_follow"
    LANE_CHANGE = "lane_change"
    LANE_MERGE = "lane_merge"


class Terminal(str, Enum):
    RUNNING = "running"
    PASS_GOAL = "pass_goal"
    COLLISION = "collision"
    SPEEDING = "speeding"
    TIMEOUT = "timeout"
    OFF_ROUTE = "off_route"


@dataclass(frozen=True)
class EgoInit:
    lane_id: int
    s: float
    v: float
    d: float = 0.0


@dataclass(frozen=True)
class ActorInit:
    id: int
    lane_id: int
    s: float
    v: float
    cls: str = "car"
    d: float = 0.0
    idm: IDMParams = field(default_factory=IDMParams)
    mobil: MOBILParams | None = None
    script: BehaviorScript | None = None


@dataclass(frozen=True)
class ScenarioSetup:
    """Fully realized scenario: built map plus initial agent placements."""

    scenario_id: str
    lane_map: LaneMap
    route: RoutePlan
    intention: Intention
    ego: EgoInit
    actors: tuple[ActorInit, ...]


@dataclass(frozen=True)
class Snapshot:
    """Immutable compact world state: enough to rasterize and resample."""

    time: float
    ego: ActorState
    ego_history: tuple          # oldest..newest poses (x, y, heading)
    actors: tuple
    actor_histories: tuple
    lane_map: LaneMap
    route: RoutePlan
    intention: Intention


@dataclass
class WorldState:
    lane_map: LaneMap
    route: RoutePlan
    intention: Intention
    ego: ActorState
    actors: list
    scripts: list
    time: float = 0.0
    speeding_run: float = 0.0
    speeding_violation: bool = False
    max_abs_d_goal: float = 0.0
    terminal: Terminal = Terminal.RUNNING
    ego_history: list = field(default_factory=list)
    actor_histories: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)  # per-substep agent states

    def snapshot(self) -> Snapshot:
        return Snapshot(
            time=self.time, ego=self.ego, ego_history=tuple(self.ego_history),
            actors=tuple(self.actors),
            actor_histories=tuple(tuple(self.actor_histories[a.id]) for a in self.actors),
            lane_map=self.lane_map, route=self.route, intention=self.intention)


@dataclass
class StepResult:
    world: WorldState
    reward: float
    outcome: SegmentOutcome
    terminal: Terminal
    substeps: int
    actor_boxes: np.ndarray   # (k, n_actors_max, 5); rows after each substep


def _state_from_frenet(agent_id, lane_map, lane_id, s, d, v, cls="car",
                       length=None, width=None):
    from .actors import VEHICLE_DIMS
    dims = VEHICLE_DIMS.get(cls, VEHICLE_DIMS["car"])
    length = length if length is not None else dims[0]
    width = width if width is not None else dims[1]
    pt, heading = lane_map.lane(lane_id).path.point_at(np.asarray(s), np.asarray(d))
    return ActorState(id=agent_id, x=float(pt[0]), y=float(pt[1]),
                      heading=float(heading), v=v, a=0.0, lane_id=lane_id,
                      s=s, d=d, length=length, width=width, cls=cls)


def reset(setup: ScenarioSetup) -> WorldState:
    """Instantiate a world; rejects overlapping initial placements."""
    ego = _state_from_frenet(EGO_ID, setup.lane_map, setup.ego.lane_id,
                             setup.ego.s, setup.ego.d, setup.ego.v)
    actors = [_state_from_frenet(a.id, setup.lane_map, a.lane_id, a.s, a.d,
                                 a.v, a.cls) for a in setup.actors]
    all_boxes = np.array([ego.box] + [a.box for a in actors])
    if len(all_boxes) > 1:
        overlap = obb_overlap_many(all_boxes, all_boxes)
        np.fill_diagonal(overlap, False)
        if overlap.any():
            raise InvalidScenario("initial placements overlap")

    world = WorldState(
        lane_map=setup.lane_map, route=setup.route, intention=setup.intention,
        ego=ego, actors=actors,
        scripts=[ScriptState(a.script, a.id) for a in setup.actors
                 if a.script is not None])
    world._actor_params = {a.id: (a.idm, a.mobil) for a in setup.actors}
    world._lane_targets = {}
    # back-fill histories by constant-velocity extrapolation
    world.ego_history = _backfill(ego)
    world.actor_histories = {a.id: _backfill(a) for a in actors}
    _track_goal_offset(world)
    return world


def _backfill(state: ActorState) -> list:
    out = []
    for j in range(HISTORY_FRAMES - 1, -1, -1):
        dt_back = j * DT
        out.append((state.x - state.v * dt_back * math.cos(state.heading),
                    state.y - state.v * dt_back * math.sin(state.heading),
                    state.heading))
    return out


def _push_history(hist: list, state: ActorState):
    hist.append((state.x, state.y, state.heading))
    if len(hist) > HISTORY_FRAMES:
        del hist[:len(hist) - HISTORY_FRAMES]


# ---------------------------------------------------------------------------
# Occupancy and neighbor queries
# ---------------------------------------------------------------------------

def _occupancy(world: WorldState):
    """Per lane: sorted (station, agent) for agents laterally inside it."""
    agents = [world.ego] + world.actors
    pts = np.array([[a.x, a.y] for a in agents])
    table = {}
    for lane in world.lane_map.lanes:
        s, d, dist = lane.path.project(pts)
        inside = np.abs(d) <= lane.width / 2.0 + 0.3
        rows = [(float(s[i]), agents[i]) for i in np.nonzero(inside)[0]]
        rows.sort(key=lambda r: (r[0], r[1].id))
        table[lane.id] = rows
    return table


def _around(table, lane_id, agent_id, own_s):
    """(leader, lead_s, follower, follow_s) around a station on a lane."""
    rows = [r for r in table.get(lane_id, []) if r[1].id != agent_id]
    leader = follower = None
    lead_s = follow_s = 0.0
    for s, agent in rows:
        if s >= own_s:
            leader, lead_s = agent, s
            break
    for s, agent in reversed(rows):
        if s < own_s:
            follower, follow_s = agent, s
            break
    return leader, lead_s, follower, follow_s


def _neighbor_view(table, lane_id, agent, own_s) -> NeighborView:
    leader, lead_s, follower, follow_s = _around(table, lane_id, agent.id, own_s)
    lead_gap = lead_v = follow_gap = follow_v = None
    if leader is not None:
        lead_gap = lead_s - own_s - (leader.length + agent.length) / 2.0
        lead_v = leader.v
    if follower is not None:
        follow_gap = own_s - follow_s - (follower.length + agent.length) / 2.0
        follow_v = follower.v
    return NeighborView(lead_gap, lead_v, follow_gap, follow_v)


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

def step(world: WorldState, traj: Trajectory, n_substeps: int,
         weights: RewardWeights | None = None) -> StepResult:
    """Execute the first n_substeps of traj; actors react via IDM/MOBIL/scripts.

    The reward is evaluated once over the executed segment.
    """
    weights = weights or RewardWeights()
    if np.hypot(traj.dense_xy[0, 0] - world.ego.x,
                traj.dense_xy[0, 1] - world.ego.y) > 0.5:
        raise ValueError("trajectory is not continuous with the ego state")

    start_pose = np.array([world.ego.x, world.ego.y, world.ego.heading])
    boxes_per_substep = []
    executed = 0
    terminal = Terminal.RUNNING
    substep_index = int(round(world.time / DT))

    for i in range(1, n_substeps + 1):
        table = _occupancy(world)
        decisions = _actor_decisions(world, table, substep_index + i - 1)

        new_actors = []
        for actor, (accel, lane_target, rate) in zip(world.actors, decisions):
            nxt = step_actor(actor, accel, lane_target, world.lane_map, DT,
                             lateral_rate=rate)
            if nxt is not None:
                new_actors.append(nxt)
            else:
                world.actor_histories.pop(actor.id, None)
                world._lane_targets.pop(actor.id, None)
        world.actors = new_actors

        # ego tracks its plan exactly
        pose = traj.pose_at_substep(i)
        world.ego = _replace_ego(world, pose, float(traj.dense_v[i]),
                                 float(traj.dense_a[i]))
        world.time += DT
        executed = i
        _push_history(world.ego_history, world.ego)
        for a in world.actors:
            _push_history(world.actor_histories.setdefault(a.id, []), a)
        world.trace.append((world.time,
                            (world.ego.x, world.ego.y, world.ego.heading,
                             world.ego.v, world.ego.a),
                            [(a.id, a.x, a.y, a.heading, a.v,
                              a.length, a.width) for a in world.actors]))

        boxes = np.array([a.box for a in world.actors]) if world.actors else np.zeros((0, 5))
        boxes_per_substep.append(boxes)

        terminal = _check_terminal(world, boxes)
        if terminal != Terminal.RUNNING:
            break

    k = len(boxes_per_substep)
    n_max = max((b.shape[0] for b in boxes_per_substep), default=0)
    packed = np.zeros((k, n_max, 5))
    for i, b in enumerate(boxes_per_substep):
        if b.shape[0]:
            packed[i, :b.shape[0]] = b
            if b.shape[0] < n_max:
                packed[i, b.shape[0]:] = np.array([1e6, 1e6, 0.0, 0.1, 0.1])
        elif n_max:
            packed[i, :] = np.array([1e6, 1e6, 0.0, 0.1, 0.1])

    outcome = evaluate_segment(world.lane_map, world.route, start_pose, traj,
                               packed, (world.ego.length, world.ego.width),
                               executed, weights)
    world.terminal = terminal
    return StepResult(world=world, reward=outcome.reward, outcome=outcome,
                      terminal=terminal, substeps=executed, actor_boxes=packed)


def _replace_ego(world, pose, v, a) -> ActorState:
    ego = world.ego
    try:
        fr = to_frenet(world.lane_map, pose)
        lane_id, s, d = fr.lane_id, fr.s, fr.d
    except NoLaneNearby:
        lane_id, s, d = ego.lane_id, ego.s, ego.d  # off-route caught later
    return ActorState(id=EGO_ID, x=float(pose[0]), y=float(pose[1]),
                      heading=float(pose[2]), v=max(v, 0.0), a=a,
                      lane_id=lane_id, s=s, d=d,
                      length=ego.length, width=ego.width, cls=ego.cls)


def _actor_decisions(world: WorldState, table, substep_index: int):
    """(accel, lane_target, lateral_rate) per actor from the pre-step world."""
    out = []
    ego = world.ego
    scripts_by_actor = {st.actor_id: st for st in world.scripts}
    for actor in world.actors:
        idm, mobil = world._actor_params.get(actor.id, (IDMParams(), None))
        view = _neighbor_view(table, actor.lane_id, actor, actor.s)
        accel = idm_accel(max(actor.v, 0.0), _positive(view.lead_gap), view.lead_v, idm)
        lane_target = world._lane_targets.get(actor.id)
        rate = 1.75

        st = scripts_by_actor.get(actor.id)
        if st is not None:
            wv = _world_view(world, actor)
            override = apply_script(st, wv, actor)
            if override is not None:
                if override.accel is not None:
                    accel = override.accel
                if override.match_speed_of == EGO_ID:
                    accel = float(np.clip((ego.v - actor.v) / DT, -4.0, 2.5))
                if override.idm_against_ego:
                    gap = _ego_gap(world, actor)
                    if gap is not None and gap > 0:
                        accel = idm_accel(actor.v, gap, ego.v, idm)
                if override.target_lane is not None:
                    lane_target = override.target_lane
                    rate = override.lateral_rate or rate
                out.append((accel, lane_target if lane_target != actor.lane_id or
                            abs(actor.d) > 1e-9 else None, rate))
                world._lane_targets[actor.id] = lane_target
                continue

        # MOBIL on its tick, only between maneuvers
        if (mobil is not None and substep_index % MOBIL_PERIOD == 0
                and abs(actor.d) < 0.05 and lane_target in (None, actor.lane_id)):
            sides = {}
            for side, key in ((LaneChange.LEFT, "left"), (LaneChange.RIGHT, "right")):
                adj = world.lane_map.adjacent(actor.lane_id, key)
                if adj is not None:
                    s_adj, _, _ = world.lane_map.lane(adj).path.project(
                        np.array([[actor.x, actor.y]]))
                    sides[side] = _neighbor_view(table, adj, actor, float(s_adj[0]))
            dec = mobil_decision(actor, view, sides, idm, mobil)
            if dec != LaneChange.STAY:
                key = "left" if dec == LaneChange.LEFT else "right"
                lane_target = world.lane_map.adjacent(actor.lane_id, key)
                world._lane_targets[actor.id] = lane_target

        if lane_target == actor.lane_id and abs(actor.d) < 1e-9:
            world._lane_targets.pop(actor.id, None)
            lane_target = None
        out.append((accel, lane_target, rate))
    return out


def _positive(gap):
    if gap is None:
        return None
    return max(gap, 0.05)


def _world_view(world: WorldState, actor: ActorState) -> WorldView:
    ego = world.ego
    gap = _ego_gap(world, actor, signed=True)
    closing = 0.0
    if gap is not None:
        closing = ego.v - actor.v if gap > 0 else actor.v - ego.v
    try:
        ego_fr = to_frenet(world.lane_map, [ego.x, ego.y, ego.heading])
        ego_d = ego_fr.d
        ego_lane = ego_fr.lane_id
    except NoLaneNearby:
        ego_d, ego_lane = 0.0, ego.lane_id
    return WorldView(
        t=world.time, ego_v=ego.v, ego_lane_id=ego_lane, ego_d=ego_d,
        ego_gap=gap if gap is not None else 1e9,
        ego_closing_speed=closing,
        ego_distance=float(np.hypot(ego.x - actor.x, ego.y - actor.y)))


def _ego_gap(world: WorldState, actor: ActorState, signed: bool = False):
    """Bumper gap from ego to actor along the actor's lane (+ actor ahead)."""
    lane = world.lane_map.lane(actor.lane_id)
    s_ego, _, dist = lane.path.project(np.array([[world.ego.x, world.ego.y]]))
    if float(dist[0]) > 3.0 * lane.width:
        return None
    gap = actor.s - float(s_ego[0])
    gap -= math.copysign((actor.length + world.ego.length) / 2.0, gap)
    if signed:
        return gap
    return abs(gap)


def _check_terminal(world: WorldState, actor_boxes) -> Terminal:
    ego = world.ego
    if len(actor_boxes):
        ego_box = np.array([ego.box])
        if bool(obb_overlap_many(ego_box, actor_boxes).any()):
            return Terminal.COLLISION

    limit = world.lane_map.speed_limit
    if ego.v > limit + SPEEDING_MARGIN:
        world.speeding_run += DT
    else:
        world.speeding_run = 0.0
    if world.speeding_run >= SPEEDING_WINDOW - 1e-9:
        world.speeding_violation = True
        return Terminal.SPEEDING

    try:
        fr = to_frenet(world.lane_map, [ego.x, ego.y, ego.heading])
    except NoLaneNearby:
        return Terminal.OFF_ROUTE
    lane = world.lane_map.lane(fr.lane_id)
    if lane.end_station is not None and fr.s >= lane.end_station - 1e-9:
        return Terminal.OFF_ROUTE

    _track_goal_offset(world)
    goal_lane = world.lane_map.lane(world.route.goal_lane_id)
    s_goal, _, _ = goal_lane.path.project(np.array([[ego.x, ego.y]]))
    if float(s_goal[0]) >= world.route.goal_station:
        return Terminal.PASS_GOAL
    return Terminal.RUNNING


def _track_goal_offset(world: WorldState):
    goal_lane = world.lane_map.lane(world.route.goal_lane_id)
    _, d, _ = goal_lane.path.project(np.array([[world.ego.x, world.ego.y]]))
    world.max_abs_d_goal = max(world.max_abs_d_goal, abs(float(d[0])))


def check_collision(ego_box, actor_boxes) -> bool:
    """Closed oriented-box overlap between the ego and any actor."""
    if len(actor_boxes) == 0:
        return False
    return bool(obb_overlap_many(np.asarray(ego_box)[None, :],
                                 np.asarray(actor_boxes)).any())


def check_success(world: WorldState) -> bool:
    """Intention-specific goal achievement at the terminal evaluation point."""
    if world.terminal != Terminal.PASS_GOAL:
        return False
    goal_lane = world.lane_map.lane(world.route.goal_lane_id)
    _, d, _ = goal_lane.path.project(np.array([[world.ego.x, world.ego.y]]))
    on_goal = abs(float(d[0])) <= 1.0
    if world.intention == Intention.LANE_FOLLOW:
        return world.max_abs_d_goal <= 1.0
    return on_goal


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------

@dataclass
class PlanRecord:
    t: float
    traj: Trajectory
    reward: float
    substeps: int
    actor_boxes: np.ndarray


@dataclass
class EpisodeLog:
    scenario_id: str
    map_json: str
    route: RoutePlan
    intention: Intention
    substeps: list            # (t, ego(x,y,h,v,a), [(id,x,y,h,v), ...])
    plans: list               # PlanRecord
    terminal: Terminal
    success: bool
    speeding_violation: bool
    max_abs_d_goal: float
    total_reward: float

    @property
    def collided(self) -> bool:
        return self.terminal == Terminal.COLLISION

    @property
    def passed(self) -> bool:
        return self.success and not self.collided and not self.speeding_violation

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "scenario_id": self.scenario_id,
            "map_json": self.map_json,
            "route": [self.route.goal_lane_id, self.route.goal_station],
            "intention": self.intention.value,
            "terminal": self.terminal.value,
            "success": self.success,
            "speeding_violation": self.speeding_violation,
            "max_abs_d_goal": self.max_abs_d_goal,
            "total_reward": self.total_reward,
            "substeps": [[t, list(ego), [list(a) for a in actors]]
                         for t, ego, actors in self.substeps],
            "plans": [{
                "t": p.t,
                "reward": p.reward,
                "substeps": p.substeps,
                "dense_xy": p.traj.dense_xy.tolist(),
                "dense_v": p.traj.dense_v.tolist(),
                "dense_a": p.traj.dense_a.tolist(),
                "dense_heading": p.traj.dense_heading.tolist(),
                "dense_kappa": p.traj.dense_kappa.tolist(),
                "dense_kappa_dot": p.traj.dense_kappa_dot.tolist(),
                "dense_t": p.traj.dense_t.tolist(),
                "source": list(p.traj.source),
            } for p in self.plans],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @staticmethod
    def trajectory_from_plan(doc: dict, substeps_per_waypoint: int = 5) -> Trajectory:
        dense_xy = np.array(doc["dense_xy"])
        sl = slice(substeps_per_waypoint, None, substeps_per_waypoint)
        arrays = {k: np.array(doc[k]) for k in
                  ("dense_v", "dense_a", "dense_heading", "dense_kappa",
                   "dense_kappa_dot", "dense_t")}
        return Trajectory(
            waypoints=dense_xy[sl], v=arrays["dense_v"][sl], a=arrays["dense_a"][sl],
            heading=arrays["dense_heading"][sl], kappa=arrays["dense_kappa"][sl],
            kappa_dot=arrays["dense_kappa_dot"][sl], dense_t=arrays["dense_t"],
            dense_xy=dense_xy, dense_v=arrays["dense_v"], dense_a=arrays["dense_a"],
            dense_heading=arrays["dense_heading"], dense_kappa=arrays["dense_kappa"],
            dense_kappa_dot=arrays["dense_kappa_dot"], source=tuple(doc["source"]))


def run_episode(setup: ScenarioSetup, policy, max_time: float = 20.0,
                replan_substeps: int = 3,
                weights: RewardWeights | None = None) -> EpisodeLog:
    """Plan/step loop until a terminal event or the time cap."""
    world = reset(setup)
    substeps = []
    plans = []
    total = 0.0
    terminal = Terminal.TIMEOUT

    def record():
        substeps.append((world.time,
                         (world.ego.x, world.ego.y, world.ego.heading,
                          world.ego.v, world.ego.a),
                         [(a.id, a.x, a.y, a.heading, a.v,
                           a.length, a.width) for a in world.actors]))

    record()
    while world.time < max_time - 1e-9:
        try:
            traj = policy(world)
        except Exception as exc:
            log = _finalize(setup, world, substeps, plans, Terminal.TIMEOUT, total)
            raise PolicyError(f"policy failed at t={world.time:.1f}", log=log) from exc
        n = min(replan_substeps, max(int(round((max_time - world.time) / DT)), 1))
        result = step(world, traj, n, weights)
        substeps.extend(world.trace)
        world.trace.clear()
        plans.append(PlanRecord(t=world.time, traj=traj, reward=result.reward,
                                substeps=result.substeps,
                                actor_boxes=result.actor_boxes))
        total += result.reward
        if result.terminal != Terminal.RUNNING:
            terminal = result.terminal
            break

    return _finalize(setup, world, substeps, plans, terminal, total)


def _finalize(setup, world, substeps, plans, terminal, total) -> EpisodeLog:
    world.terminal = terminal
    return EpisodeLog(
        scenario_id=setup.scenario_id, map_json=setup.lane_map.to_json(),
        route=setup.route, intention=setup.intention, substeps=substeps,
        plans=plans, terminal=terminal, success=check_success(world),
        speeding_violation=world.speeding_violation,
        max_abs_d_goal=world.max_abs_d_goal, total_reward=total)
