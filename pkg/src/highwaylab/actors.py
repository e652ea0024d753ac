"""Non-ego vehicle behavior: IDM car following, MOBIL lane changes, and
scripted maneuvers for targeted scenarios.

All decision functions are pure over an immutable view of the pre-step world
so the simulator can apply updates synchronously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .lane_map import LaneMap

VEHICLE_DIMS = {
    "car": (4.5, 2.0),
    "truck": (8.0, 2.5),
    "bus": (11.0, 2.8),
}


@dataclass(frozen=True)
class ActorState:
    """Kinematic state of one agent, world frame plus lane anchoring.

    (s, d) are Frenet coordinates on lane_id; v >= 0.
    """

    id: int
    x: float
    y: float
    heading: float
    v: float
    a: float
    lane_id: int
    s: float
    d: float
    length: float = 4.5
    width: float = 2.0
    cls: str = "car"

    def __post_init__(self):
        if self.v < 0:
            raise ValueError("speed must be non-negative")
        if self.length <= 0 or self.width <= 0:
            raise ValueError("box dimensions must be positive")

    @property
    def box(self):
        return (self.x, self.y, self.heading, self.length, self.width)

    @property
    def pose(self):
        return np.array([self.x, self.y, self.heading])


@dataclass(frozen=True)
class IDMParams:
    v0: float = 30.0        # desired speed (m/s)
    t_headway: float = 1.5  # s
    s0: float = 2.0         # minimum gap (m)
    a_max: float = 2.0      # m/s^2
    b_comf: float = 3.0     # m/s^2
    delta: float = 4.0

    def __post_init__(self):
        for name in ("v0", "t_headway", "s0", "a_max", "b_comf", "delta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"IDM parameter {name} must be positive")


IDM_PROFILES = {
    "aggressive": IDMParams(t_headway=1.0, s0=1.5, a_max=2.5, b_comf=3.5),
    "normal": IDMParams(),
    "cautious": IDMParams(t_headway=2.0, s0=3.0, a_max=1.5, b_comf=2.5),
}


@dataclass(frozen=True)
class MOBILParams:
    politeness: float = 0.3
    delta_a_threshold: float = 0.2  # m/s^2
    b_safe: float = 4.0             # m/s^2

    def __post_init__(self):
        if not 0.0 <= self.politeness <= 1.0:
            raise ValueError("politeness must lie in [0, 1]")
        if self.b_safe <= 0:
            raise ValueError("b_safe must be positive")


MOBIL_PROFILES = {
    "selfish": MOBILParams(politeness=0.05),
    "normal": MOBILParams(),
    "altruistic": MOBILParams(politeness=0.6),
}


def idm_accel(v: float, lead_gap: float | None, lead_v: float | None,
              p: IDMParams) -> float:
    """IDM acceleration; free-road term only when there is no leader.

    The dynamic part of the desired gap is clamped at zero so acceleration
    stays monotone in own speed even under much faster leaders.
    """
    free = 1.0 - (v / p.v0) ** p.delta
    if lead_gap is None:
        return p.a_max * free
    if lead_gap <= 0:
        raise ValueError("lead gap must be positive; overlap is a collision upstream")
    dv = v - (lead_v if lead_v is not None else 0.0)
    s_star = p.s0 + max(0.0, v * p.t_headway + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
    return p.a_max * (free - (s_star / lead_gap) ** 2)


class LaneChange(str, Enum):
    STAY = "stay"
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class NeighborView:
    """Gaps/speeds around one actor, computed from the pre-step snapshot.

    Gaps are bumper-to-bumper (m); None where the slot is empty. new_* are
    the prospective leader/follower on the candidate lane.
    """

    lead_gap: float | None = None
    lead_v: float | None = None
    follow_gap: float | None = None
    follow_v: float | None = None


def mobil_decision(state: ActorState, current: NeighborView,
                   sides: dict[LaneChange, NeighborView],
                   idm: IDMParams, mobil: MOBILParams) -> LaneChange:
    """MOBIL lane-change criterion with safety veto.

    sides maps LEFT/RIGHT to the neighbor view on that candidate lane;
    absent keys mean the lane does not exist.
    """
    a_self_now = idm_accel(state.v, current.lead_gap, current.lead_v, idm)
    # current follower's change if we leave: it inherits our leader
    a_old_follow_now = _follower_accel(current, state, idm, after_leave=False)
    a_old_follow_after = _follower_accel(current, state, idm, after_leave=True)

    best = LaneChange.STAY
    best_gain = mobil.delta_a_threshold
    for side in (LaneChange.LEFT, LaneChange.RIGHT):
        view = sides.get(side)
        if view is None:
            continue
        if view.follow_gap is not None and view.follow_gap <= 0:
            continue  # would drop onto another vehicle
        if view.lead_gap is not None and view.lead_gap <= 0:
            continue
        a_new_follow_now = (idm_accel(view.follow_v, _chain_gap(view, state.length),
                                      view.lead_v, idm)
                            if view.follow_v is not None else None)
        a_new_follow_after = (idm_accel(view.follow_v, view.follow_gap, state.v, idm)
                              if view.follow_v is not None else None)
        # safety veto: required deceleration of the new follower
        if a_new_follow_after is not None and a_new_follow_after < -mobil.b_safe:
            continue
        a_self_after = idm_accel(state.v, view.lead_gap, view.lead_v, idm)
        others = 0.0
        if a_new_follow_after is not None:
            others += a_new_follow_after - a_new_follow_now
        if a_old_follow_after is not None and a_old_follow_now is not None:
            others += a_old_follow_after - a_old_follow_now
        gain = a_self_after - a_self_now + mobil.politeness * others
        if gain > best_gain + 1e-12:
            best, best_gain = side, gain
    return best


def _follower_accel(view: NeighborView, state: ActorState, idm: IDMParams,
                    after_leave: bool):
    if view.follow_v is None:
        return None
    if after_leave:
        # follower sees our old leader (or free road)
        gap = _chain_gap(view, state.length)
        return idm_accel(view.follow_v, gap, view.lead_v, idm)
    return idm_accel(view.follow_v, view.follow_gap, state.v, idm)


def _chain_gap(view: NeighborView, body_length: float):
    if view.lead_gap is None or view.follow_gap is None:
        return None
    return view.lead_gap + view.follow_gap + body_length


# ---------------------------------------------------------------------------
# Behavior scripts
# ---------------------------------------------------------------------------

class Pattern(str, Enum):
    BRAKING = "braking"
    ACCELERATING = "accelerating"
    BLOCKING = "blocking"
    CUT_IN = "cut_in"
    NEGOTIATING = "negotiating"


class TriggerKind(str, Enum):
    TTC = "ttc"            # seconds
    DISTANCE = "distance"  # meters, center to center
    TIME = "time"          # seconds since episode start


@dataclass(frozen=True)
class BehaviorScript:
    """One scripted maneuver with a single one-shot trigger.

    duration bounds how long the override stays active after triggering;
    target_speed / target_accel / target_lane parameterize the maneuver.
    """

    pattern: Pattern
    trigger_kind: TriggerKind
    trigger_value: float
    duration: float = 5.0
    target_speed: float | None = None
    target_accel: float | None = None
    target_lane: int | None = None
    lateral_rate: float = 1.75

    def __post_init__(self):
        if self.pattern == Pattern.BRAKING and self.target_accel is None:
            raise ValueError("braking script needs target_accel")
        if self.pattern == Pattern.ACCELERATING and self.target_speed is None:
            raise ValueError("accelerating script needs target_speed")
        if self.pattern == Pattern.CUT_IN and self.target_lane is None:
            raise ValueError("cut-in script needs target_lane")
        if self.pattern == Pattern.BLOCKING and self.target_lane is None:
            raise ValueError("blocking script needs target_lane")

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern.value,
            "trigger_kind": self.trigger_kind.value,
            "trigger_value": self.trigger_value,
            "duration": self.duration,
            "target_speed": self.target_speed,
            "target_accel": self.target_accel,
            "target_lane": self.target_lane,
            "lateral_rate": self.lateral_rate,
        }

    @staticmethod
    def from_dict(doc: dict) -> "BehaviorScript":
        doc = dict(doc)
        doc["pattern"] = Pattern(doc["pattern"])
        doc["trigger_kind"] = TriggerKind(doc["trigger_kind"])
        return BehaviorScript(**doc)


@dataclass
class ScriptState:
    """Per-episode script bookkeeping; a trigger fires at most once."""

    script: BehaviorScript
    actor_id: int
    fired: bool = False
    fire_time: float | None = None

    def active(self, t: float) -> bool:
        return (self.fired and self.fire_time is not None
                and t <= self.fire_time + self.script.duration + 1e-9)


@dataclass(frozen=True)
class Override:
    """Maneuver override returned by an armed script."""

    accel: float | None = None
    target_lane: int | None = None
    lateral_rate: float | None = None
    match_speed_of: int | None = None   # agent id whose speed to track
    idm_against_ego: bool = False


@dataclass(frozen=True)
class WorldView:
    """Minimal read-only view a script needs: ego relation and clock."""

    t: float
    ego_v: float
    ego_lane_id: int
    ego_d: float                 # ego lateral offset from its own lane center
    ego_gap: float               # bumper gap ego->actor along route lane (signed, + actor ahead)
    ego_closing_speed: float     # positive when the gap is shrinking
    ego_distance: float          # center-to-center distance


def evaluate_trigger(script: BehaviorScript, view: WorldView) -> bool:
    if script.trigger_kind == TriggerKind.TIME:
        return view.t >= script.trigger_value
    if script.trigger_kind == TriggerKind.DISTANCE:
        return view.ego_distance <= script.trigger_value
    # TTC: gap over closing speed; no trigger while opening
    if view.ego_closing_speed <= 1e-6:
        return False
    ttc = max(view.ego_gap, 0.0) / view.ego_closing_speed
    return ttc <= script.trigger_value


def apply_script(state: ScriptState, view: WorldView,
                 actor: ActorState) -> Override | None:
    """Evaluate trigger and return the active override, if any."""
    if not state.fired:
        if evaluate_trigger(state.script, view):
            state.fired = True
            state.fire_time = view.t
        else:
            return None
    if not state.active(view.t):
        return None
    sc = state.script
    if sc.pattern == Pattern.BRAKING:
        if sc.target_speed is not None and actor.v <= sc.target_speed + 1e-9:
            return Override(accel=0.0)
        return Override(accel=sc.target_accel)
    if sc.pattern == Pattern.ACCELERATING:
        if actor.v >= sc.target_speed - 1e-9:
            return Override(accel=0.0)
        return Override(accel=sc.target_accel if sc.target_accel is not None else 1.5)
    if sc.pattern == Pattern.BLOCKING:
        return Override(match_speed_of=-1, target_lane=sc.target_lane,
                        lateral_rate=sc.lateral_rate)
    if sc.pattern == Pattern.CUT_IN:
        accel = None
        if sc.target_speed is not None:
            accel = float(np.clip((sc.target_speed - actor.v) / 1.0, -3.0, 2.0))
        return Override(accel=accel, target_lane=sc.target_lane,
                        lateral_rate=sc.lateral_rate)
    # negotiating: yield via IDM against the ego once the ego signals a
    # lane change toward our lane (|ego d| beyond 0.5 m toward us)
    signal = abs(view.ego_d) > 0.5
    if signal:
        return Override(idm_against_ego=True)
    return Override()


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------

LANE_CHANGE_RATE = 1.75  # m/s lateral


def step_actor(actor: ActorState, accel: float, lane_target: int | None,
               lane_map: LaneMap, dt: float,
               lateral_rate: float = LANE_CHANGE_RATE) -> ActorState | None:
    """Advance one actor by dt: Euler along its lane, bounded lateral motion.

    Returns None when the actor leaves the map (it is removed from the scene).
    """
    v_new = max(actor.v + accel * dt, 0.0)
    a_eff = (v_new - actor.v) / dt
    ds = actor.v * dt + 0.5 * a_eff * dt * dt

    lane_id, d = actor.lane_id, actor.d
    if lane_target is not None and lane_target != lane_id:
        # re-anchor on the target lane; d becomes the offset from its center
        lane = lane_map.lane(lane_id)
        pt, _ = lane.path.point_at(np.asarray(actor.s), np.asarray(actor.d))
        s2, d2, _ = lane_map.lane(lane_target).path.project(pt[None, :])
        lane_id, s, d = lane_target, float(s2[0]), float(d2[0])
    else:
        s = actor.s
    s = s + ds
    # lateral motion toward the anchored centerline at a constant rate
    if abs(d) > 1e-9:
        step = lateral_rate * dt
        d = 0.0 if abs(d) <= step else d - math.copysign(step, d)

    lane = lane_map.lane(lane_id)
    limit = lane.end_station if lane.end_station is not None else lane.length
    if s >= limit or s >= lane.length:
        return None  # drove off its lane/map
    pt, heading = lane.path.point_at(np.asarray(s), np.asarray(d))
    return replace(actor, x=float(pt[0]), y=float(pt[1]), heading=float(heading),
                   v=v_new, a=a_eff, lane_id=lane_id, s=s, d=d)
