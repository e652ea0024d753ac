"""Procedural scenario generation.

Two families:
  * free-flow: uncontrolled traffic sampled from truncated-normal mixtures
    and categorical distributions, 7 type presets, i.i.d. train/test split.
  * targeted: 24 catalog types built from 3 ego intentions and scripted
    actor behaviors; continuous parameters are bucketed, the test set comes
    from all-pairs rows over the buckets, and train/val exclude every test
    bucket tuple.

Scenario files are canonical JSON (sorted keys), so identical seeds produce
byte-identical outputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .actors import (IDM_PROFILES, BehaviorScript, IDMParams, MOBILParams,
                     Pattern, TriggerKind)
from .allpairs import allpairs
from .lane_map import RoutePlan, Topology, build_map
from .simulator import ActorInit, EgoInit, Intention, ScenarioSetup

SCENARIO_SCHEMA_VERSION = 1


class ConfigError(Exception):
    pass


class SamplingExhausted(Exception):
    pass


# ---------------------------------------------------------------------------
# Parameter spaces and distributions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSpace:
    """Discrete levels plus bucketed continuous ranges, in a fixed order."""

    discrete: dict          # name -> list of levels
    continuous: dict        # name -> list of (lo, hi) buckets, ordered

    def __post_init__(self):
        for name, levels in self.discrete.items():
            if len(levels) < 1:
                raise ConfigError(f"parameter {name} has no levels")
        for name, buckets in self.continuous.items():
            if len(buckets) < 1:
                raise ConfigError(f"parameter {name} has no buckets")
            for (a_lo, a_hi), (b_lo, b_hi) in zip(buckets, buckets[1:]):
                if a_hi > b_lo + 1e-12:
                    raise ConfigError(f"buckets of {name} overlap or are unordered")

    @property
    def names(self) -> list:
        return list(self.discrete) + list(self.continuous)

    @property
    def level_counts(self) -> list:
        return ([len(v) for v in self.discrete.values()]
                + [len(v) for v in self.continuous.values()])

    def n_combos(self) -> int:
        return int(np.prod(self.level_counts))

    def realize(self, tup, rng) -> dict:
        """Concrete values for a bucket tuple; uniform within buckets."""
        values = {}
        i = 0
        for name, levels in self.discrete.items():
            values[name] = levels[tup[i]]
            i += 1
        for name, buckets in self.continuous.items():
            lo, hi = buckets[tup[i]]
            values[name] = float(rng.uniform(lo, hi))
            i += 1
        return values

    def sample_tuple(self, rng) -> tuple:
        return tuple(int(rng.integers(0, k)) for k in self.level_counts)


@dataclass(frozen=True)
class TruncatedNormalMixture:
    """Mixture of normals truncated to [lo, hi], sampled by rejection."""

    components: tuple       # ((weight, mean, sigma), ...)
    lo: float
    hi: float

    def sample(self, rng) -> float:
        weights = np.array([c[0] for c in self.components])
        weights = weights / weights.sum()
        idx = int(rng.choice(len(self.components), p=weights))
        _, mean, sigma = self.components[idx]
        for _ in range(1000):
            x = float(rng.normal(mean, sigma))
            if self.lo <= x <= self.hi:
                return x
        raise ConfigError(
            f"rejection sampling failed for mixture component {idx}: "
            f"mean={mean}, sigma={sigma} vs bounds [{self.lo}, {self.hi}]")


def _tn(mean, sigma, lo, hi):
    return TruncatedNormalMixture(((1.0, mean, sigma),), lo, hi)


# ---------------------------------------------------------------------------
# Free-flow scenarios
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FreeFlowTypeConfig:
    name: str
    density: TruncatedNormalMixture          # vehicles per km
    speed_mean: TruncatedNormalMixture       # m/s
    speed_spread: float
    idm_profile_weights: dict                # profile name -> weight
    mobil_profile_weights: dict
    truck_fraction: float
    lane_choices: tuple
    topology_weights: dict                   # Topology value -> weight
    curvature: TruncatedNormalMixture
    speed_limit_choices: tuple


def free_flow_space() -> list:
    """The 7 free-flow scenario type presets."""
    base_topo = {"standard": 0.7, "merge": 0.15, "on_ramp": 0.1, "fork": 0.05}
    mk = FreeFlowTypeConfig
    return [
        mk("nominal", _tn(15, 5, 4, 30), _tn(22, 3, 10, 32), 2.0,
           {"normal": 0.7, "aggressive": 0.15, "cautious": 0.15},
           {"normal": 0.8, "selfish": 0.1, "altruistic": 0.1},
           0.1, (2, 3), base_topo, _tn(0.002, 0.002, 0.0, 0.006), (27.0, 30.0)),
        mk("aggressive", _tn(18, 5, 6, 32), _tn(26, 3, 14, 34), 3.0,
           {"aggressive": 0.6, "normal": 0.4}, {"selfish": 0.6, "normal": 0.4},
           0.05, (2, 3), base_topo, _tn(0.002, 0.002, 0.0, 0.006), (30.0, 33.0)),
        mk("cautious_dense", _tn(26, 6, 10, 38), _tn(17, 2.5, 8, 26), 1.5,
           {"cautious": 0.6, "normal": 0.4}, {"altruistic": 0.5, "normal": 0.5},
           0.12, (2, 3), base_topo, _tn(0.002, 0.002, 0.0, 0.006), (25.0, 27.0)),
        mk("trucks", _tn(14, 4, 4, 26), _tn(20, 2.5, 10, 28), 2.0,
           {"normal": 0.6, "cautious": 0.4}, {"normal": 0.9, "altruistic": 0.1},
           0.45, (2, 3), base_topo, _tn(0.002, 0.002, 0.0, 0.006), (25.0, 30.0)),
        mk("fast_sparse", _tn(8, 3, 2, 18), _tn(29, 2.5, 18, 36), 2.5,
           {"aggressive": 0.4, "normal": 0.6}, {"selfish": 0.4, "normal": 0.6},
           0.05, (2, 3), base_topo, _tn(0.001, 0.001, 0.0, 0.004), (33.0,)),
        mk("high_variance", _tn(16, 6, 3, 34), _tn(22, 5, 8, 34), 5.0,
           {"aggressive": 0.34, "normal": 0.33, "cautious": 0.33},
           {"selfish": 0.34, "normal": 0.33, "altruistic": 0.33},
           0.15, (2, 3), base_topo, _tn(0.003, 0.002, 0.0, 0.007), (27.0, 30.0, 33.0)),
        mk("few_lane_changes", _tn(15, 5, 4, 30), _tn(21, 3, 10, 30), 2.0,
           {"normal": 0.8, "cautious": 0.2}, {"altruistic": 0.9, "normal": 0.1},
           0.1, (2,), base_topo, _tn(0.002, 0.002, 0.0, 0.006), (27.0, 30.0)),
    ]


@dataclass
class FreeFlowSpec:
    scenario_id: str
    scenario_type: int              # 1..7
    seed: int
    topology: str
    num_lanes: int
    curvature_scale: float
    speed_limit: float
    ego: dict                       # lane_id, s, v
    goal_lane_id: int
    goal_station: float
    actors: list                    # dicts

    kind: str = "freeflow"

    def to_dict(self) -> dict:
        return {
            "schema_version": SCENARIO_SCHEMA_VERSION, "kind": self.kind,
            "scenario_id": self.scenario_id, "scenario_type": self.scenario_type,
            "seed": self.seed, "topology": self.topology,
            "num_lanes": self.num_lanes, "curvature_scale": self.curvature_scale,
            "speed_limit": self.speed_limit, "ego": self.ego,
            "goal_lane_id": self.goal_lane_id, "goal_station": self.goal_station,
            "actors": self.actors,
        }

    @staticmethod
    def from_dict(doc: dict) -> "FreeFlowSpec":
        doc = {k: v for k, v in doc.items() if k not in ("schema_version", "kind")}
        return FreeFlowSpec(**doc)


def _choice(rng, weights: dict):
    names = list(weights)
    w = np.array([weights[n] for n in names], dtype=float)
    return names[int(rng.choice(len(names), p=w / w.sum()))]


def sample_free_flow(types: list, rng: np.random.Generator,
                     seed: int, index: int = 0) -> FreeFlowSpec:
    """One free-flow variation: type uniform over the presets, parameters
    from the preset's distributions."""
    type_idx = int(rng.integers(0, len(types)))
    cfg = types[type_idx]
    topology = _choice(rng, cfg.topology_weights)
    num_lanes = int(rng.choice(cfg.lane_choices))
    curvature = cfg.curvature.sample(rng)
    speed_limit = float(rng.choice(cfg.speed_limit_choices))
    density = cfg.density.sample(rng)
    length = 400.0
    n_actors = min(int(round(density * length / 1000.0)), 12)
    speed_cap = 1.5 * speed_limit

    # traffic goes on through lanes only; ending lanes (merge drop, fork
    # stem) and ramp/fork extras stay clear
    if topology in ("merge", "fork"):
        main_lanes = max(num_lanes - 1, 1)
    else:
        main_lanes = num_lanes
    ego_lane = int(rng.integers(0, main_lanes))
    ego_v = float(np.clip(cfg.speed_mean.sample(rng), 0.0, speed_cap))
    ego_s = 30.0

    # per-lane station ladders keep initial placements overlap-free
    actors = []
    stations = {lane: [ego_s] if lane == ego_lane else []
                for lane in range(main_lanes)}
    aid = 0
    for _ in range(n_actors * 4):
        if aid >= n_actors:
            break
        lane = int(rng.integers(0, main_lanes))
        s = float(rng.uniform(10.0, length - 80.0))
        if any(abs(s - other) < 18.0 for other in stations[lane]):
            continue
        stations[lane].append(s)
        v_mean = cfg.speed_mean.sample(rng)
        v = float(np.clip(rng.normal(v_mean, cfg.speed_spread), 0.0, speed_cap))
        cls = "truck" if rng.random() < cfg.truck_fraction else "car"
        idm_name = _choice(rng, cfg.idm_profile_weights)
        mobil_name = _choice(rng, cfg.mobil_profile_weights)
        profile = IDM_PROFILES[idm_name]
        target_speed = float(np.clip(rng.normal(v_mean, cfg.speed_spread),
                                     3.0, speed_cap))
        actors.append({
            "id": aid, "lane_id": lane, "s": s, "v": v, "cls": cls,
            "idm_profile": idm_name, "mobil_profile": mobil_name,
            "target_speed": target_speed,
            "target_gap": profile.t_headway,
            "max_accel": profile.a_max, "max_decel": profile.b_comf,
            "target_lane_goal": int(rng.integers(0, main_lanes)),
            "script": None,
        })
        aid += 1

    return FreeFlowSpec(
        scenario_id=f"freeflow-{seed:06d}-{index:05d}",
        scenario_type=type_idx + 1, seed=seed, topology=topology,
        num_lanes=num_lanes, curvature_scale=curvature, speed_limit=speed_limit,
        ego={"lane_id": ego_lane, "s": ego_s, "v": ego_v},
        goal_lane_id=ego_lane, goal_station=ego_s + 250.0, actors=actors)


# ---------------------------------------------------------------------------
# Targeted scenarios: the 24-type catalog
# ---------------------------------------------------------------------------

EGO_START = 30.0
GOAL_AHEAD = 120.0

SPEED_BUCKETS = ((8.0, 12.0), (12.0, 16.0), (16.0, 20.0))
SLOW_SPEED_BUCKETS = ((3.0, 5.0), (5.0, 7.0), (7.0, 9.0))
GAP_BUCKETS = ((15.0, 25.0), (25.0, 35.0), (35.0, 50.0))
REL_SPEED_BUCKETS = ((-4.0, -1.5), (-1.5, 1.5), (1.5, 4.0))
DIST_TRIGGER_BUCKETS = ((15.0, 25.0), (25.0, 35.0), (35.0, 45.0))
TTC_TRIGGER_BUCKETS = ((2.0, 3.0), (3.0, 4.0), (4.0, 6.0))
CUTIN_FAST = ((1.0, 1.5), (1.5, 2.0), (2.0, 3.0))
CUTIN_SLOW = ((3.0, 4.0), (4.0, 5.0), (5.0, 6.0))
CURVATURE_LEVELS = (0.0, 0.003, 0.006)


@dataclass(frozen=True)
class ActorTemplate:
    """Relative placement of one scripted or plain actor.

    lane: 'ego' or 'goal'; offset_sign: +1 ahead of the ego, -1 behind.
    idm_v0: 'hold' keeps the initial speed, 'fast' aims above it.
    """

    lane: str
    offset_sign: int
    pattern: Pattern | None = None
    trigger_kind: TriggerKind | None = None
    idm_v0: str = "hold"
    gap_scale: float = 1.0


@dataclass(frozen=True)
class CatalogEntry:
    key: str
    intention: Intention
    category: str                # normal | negotiating | reacting
    actors: tuple
    ego_speed_buckets: tuple = SPEED_BUCKETS
    extra_continuous: dict = field(default_factory=dict)

    def space(self) -> ParamSpace:
        continuous = {"ego_speed": list(self.ego_speed_buckets),
                      "gap": list(GAP_BUCKETS),
                      "rel_speed": list(REL_SPEED_BUCKETS)}
        continuous.update({k: list(v) for k, v in self.extra_continuous.items()})
        return ParamSpace(discrete={"curvature": list(CURVATURE_LEVELS)},
                          continuous=continuous)


def _scripted(entry_kind: str) -> dict:
    if entry_kind == "cutin_fast":
        return {"cut_duration": CUTIN_FAST, "ttc_trigger": TTC_TRIGGER_BUCKETS}
    if entry_kind == "cutin_slow":
        return {"cut_duration": CUTIN_SLOW, "ttc_trigger": TTC_TRIGGER_BUCKETS}
    if entry_kind == "dist":
        return {"dist_trigger": DIST_TRIGGER_BUCKETS}
    if entry_kind == "ttc":
        return {"ttc_trigger": TTC_TRIGGER_BUCKETS}
    return {}


def catalog() -> list:
    """The 24 targeted scenario types."""
    lf, lc, lm = Intention.LANE_FOLLOW, Intention.LANE_CHANGE, Intention.LANE_MERGE
    A = ActorTemplate
    entries = [
        # --- lane follow (6) ---
        CatalogEntry("lf_lead_braking", lf, "reacting",
                     (A("ego", +1, Pattern.BRAKING, TriggerKind.DISTANCE),),
                     extra_continuous=_scripted("dist")),
        CatalogEntry("lf_lead_accel_brake", lf, "reacting",
                     (A("ego", +1, Pattern.BRAKING, TriggerKind.TIME, idm_v0="fast"),),
                     extra_continuous={"time_trigger": ((1.0, 2.0), (2.0, 4.0), (4.0, 6.0))}),
        CatalogEntry("lf_cutin_aggressive", lf, "reacting",
                     (A("goal_adjacent", +1, Pattern.CUT_IN, TriggerKind.TTC),),
                     extra_continuous=_scripted("cutin_fast")),
        CatalogEntry("lf_cutin_mild", lf, "reacting",
                     (A("goal_adjacent", +1, Pattern.CUT_IN, TriggerKind.TTC),),
                     extra_continuous=_scripted("cutin_slow")),
        CatalogEntry("lf_lead_blocking", lf, "reacting",
                     (A("ego", +1, Pattern.BLOCKING, TriggerKind.DISTANCE),),
                     extra_continuous=_scripted("dist")),
        CatalogEntry("lf_sandwich", lf, "normal",
                     (A("ego", +1), A("ego", -1, gap_scale=0.8))),
        # --- lane change (9) ---
        CatalogEntry("lc_empty_target", lc, "normal", ()),
        CatalogEntry("lc_lead_on_target", lc, "normal", (A("goal", +1),)),
        CatalogEntry("lc_trail_on_target", lc, "normal", (A("goal", -1),)),
        CatalogEntry("lc_lead_trail_target", lc, "negotiating",
                     (A("goal", +1), A("goal", -1, gap_scale=0.8))),
        CatalogEntry("lc_trail_negotiating", lc, "negotiating",
                     (A("goal", -1, Pattern.NEGOTIATING, TriggerKind.TIME),)),
        CatalogEntry("lc_trail_denying", lc, "negotiating",
                     (A("goal", -1, Pattern.ACCELERATING, TriggerKind.TIME, idm_v0="fast"),),
                     extra_continuous={"time_trigger": ((0.5, 1.5), (1.5, 3.0), (3.0, 5.0))}),
        CatalogEntry("lc_lead_braking_target", lc, "reacting",
                     (A("goal", +1, Pattern.BRAKING, TriggerKind.DISTANCE),),
                     extra_continuous=_scripted("dist")),
        CatalogEntry("lc_cutin_into_gap", lc, "reacting",
                     (A("ego", +1, Pattern.CUT_IN, TriggerKind.TTC),),
                     extra_continuous=_scripted("cutin_fast")),
        CatalogEntry("lc_blocking_target", lc, "reacting",
                     (A("goal", +1, Pattern.BLOCKING, TriggerKind.DISTANCE),),
                     extra_continuous=_scripted("dist")),
        # --- lane merge (9) ---
        CatalogEntry("lm_empty", lm, "normal", ()),
        CatalogEntry("lm_lead", lm, "normal", (A("goal", +1),)),
        CatalogEntry("lm_trail", lm, "normal", (A("goal", -1),)),
        CatalogEntry("lm_lead_trail", lm, "negotiating",
                     (A("goal", +1), A("goal", -1, gap_scale=0.8))),
        CatalogEntry("lm_trail_negotiating", lm, "negotiating",
                     (A("goal", -1, Pattern.NEGOTIATING, TriggerKind.TIME),)),
        CatalogEntry("lm_trail_denying", lm, "negotiating",
                     (A("goal", -1, Pattern.ACCELERATING, TriggerKind.TIME, idm_v0="fast"),),
                     extra_continuous={"time_trigger": ((0.5, 1.5), (1.5, 3.0), (3.0, 5.0))}),
        CatalogEntry("lm_congested", lm, "negotiating",
                     (A("goal", +1), A("goal", -1, gap_scale=0.8),
                      A("goal", +1, gap_scale=2.2))),
        CatalogEntry("lm_lead_braking", lm, "reacting",
                     (A("goal", +1, Pattern.BRAKING, TriggerKind.DISTANCE),),
                     extra_continuous=_scripted("dist")),
        CatalogEntry("lm_low_speed", lm, "normal", (A("goal", -1),),
                     ego_speed_buckets=SLOW_SPEED_BUCKETS),
    ]
    assert len(entries) == 24
    return entries


@dataclass
class TargetedSpec:
    scenario_id: str
    scenario_type: str
    seed: int
    intention: str
    bucket_tuple: list
    params: dict
    topology: str
    num_lanes: int
    curvature_scale: float
    speed_limit: float
    ego: dict
    goal_lane_id: int
    goal_station: float
    actors: list

    kind: str = "targeted"

    def to_dict(self) -> dict:
        return {
            "schema_version": SCENARIO_SCHEMA_VERSION, "kind": self.kind,
            "scenario_id": self.scenario_id, "scenario_type": self.scenario_type,
            "seed": self.seed, "intention": self.intention,
            "bucket_tuple": self.bucket_tuple, "params": self.params,
            "topology": self.topology, "num_lanes": self.num_lanes,
            "curvature_scale": self.curvature_scale,
            "speed_limit": self.speed_limit, "ego": self.ego,
            "goal_lane_id": self.goal_lane_id, "goal_station": self.goal_station,
            "actors": self.actors,
        }

    @staticmethod
    def from_dict(doc: dict) -> "TargetedSpec":
        doc = {k: v for k, v in doc.items() if k not in ("schema_version", "kind")}
        return TargetedSpec(**doc)


def build_targeted(entry: CatalogEntry, values: dict, seed: int,
                   index: int = 0) -> TargetedSpec:
    """Materialize a catalog entry with sampled parameter values."""
    intention = entry.intention
    speed_limit = 30.0
    if intention == Intention.LANE_MERGE:
        topology, num_lanes = Topology.MERGE.value, 2
        ego_lane, goal_lane = 1, 0
    elif intention == Intention.LANE_CHANGE:
        topology, num_lanes = Topology.STANDARD.value, 2
        ego_lane, goal_lane = 0, 1
    else:
        topology, num_lanes = Topology.STANDARD.value, 2
        ego_lane, goal_lane = 0, 0

    ego_v = values["ego_speed"]
    gap = values["gap"]
    rel = values["rel_speed"]

    actors = []
    stations = [EGO_START]
    for i, tpl in enumerate(entry.actors):
        if tpl.lane == "ego":
            lane = ego_lane
        elif tpl.lane == "goal":
            lane = goal_lane
        else:  # goal_adjacent: the lane beside the ego (cut-in source)
            lane = 1 if ego_lane == 0 else 0
        s = EGO_START + tpl.offset_sign * gap * tpl.gap_scale
        stations.append(s)
        v = max(ego_v + rel, 0.0)
        script = None
        if tpl.pattern is not None:
            script = _build_script(tpl, values, ego_lane, ego_v)
        actors.append({
            "id": i, "lane_id": lane, "s": s, "v": v, "cls": "car",
            "idm_profile": "normal",
            "idm_v0": v + 4.0 if tpl.idm_v0 == "fast" else max(v, 1.0),
            "script": script.to_dict() if script else None,
        })

    # keep every placement on the map: shift the scene forward if a rear
    # actor would start before the lane begins
    shift = max(0.0, 5.0 - min(stations))
    for a in actors:
        a["s"] += shift
    ego_s = EGO_START + shift

    return TargetedSpec(
        scenario_id=f"{entry.key}-{seed:06d}-{index:05d}",
        scenario_type=entry.key, seed=seed, intention=intention.value,
        bucket_tuple=[], params={k: (v if not isinstance(v, float) else float(v))
                                 for k, v in values.items()},
        topology=topology, num_lanes=num_lanes,
        curvature_scale=values["curvature"], speed_limit=speed_limit,
        ego={"lane_id": ego_lane, "s": ego_s, "v": ego_v},
        goal_lane_id=goal_lane, goal_station=ego_s + GOAL_AHEAD,
        actors=actors)


def _build_script(tpl: ActorTemplate, values: dict, ego_lane: int,
                  ego_v: float) -> BehaviorScript:
    if tpl.trigger_kind == TriggerKind.DISTANCE:
        trigger_value = values.get("dist_trigger", 25.0)
    elif tpl.trigger_kind == TriggerKind.TTC:
        trigger_value = values.get("ttc_trigger", 3.0)
    else:
        trigger_value = values.get("time_trigger", 1.0)

    if tpl.pattern == Pattern.BRAKING:
        return BehaviorScript(Pattern.BRAKING, tpl.trigger_kind, trigger_value,
                              duration=4.0, target_accel=-4.0,
                              target_speed=max(0.3 * ego_v, 1.0))
    if tpl.pattern == Pattern.ACCELERATING:
        return BehaviorScript(Pattern.ACCELERATING, tpl.trigger_kind,
                              trigger_value, duration=6.0,
                              target_speed=ego_v + 6.0, target_accel=2.0)
    if tpl.pattern == Pattern.BLOCKING:
        return BehaviorScript(Pattern.BLOCKING, tpl.trigger_kind, trigger_value,
                              duration=30.0, target_lane=ego_lane)
    if tpl.pattern == Pattern.CUT_IN:
        duration = values.get("cut_duration", 2.0)
        return BehaviorScript(Pattern.CUT_IN, tpl.trigger_kind, trigger_value,
                              duration=duration + 1.0, target_lane=ego_lane,
                              lateral_rate=3.5 / duration)
    return BehaviorScript(Pattern.NEGOTIATING, tpl.trigger_kind, trigger_value,
                          duration=60.0)


def sample_targeted(entry: CatalogEntry, rng: np.random.Generator,
                    excluded: set, seed: int, index: int = 0) -> TargetedSpec:
    """Draw a variation whose bucket tuple avoids the excluded set."""
    space = entry.space()
    total = space.n_combos()
    if len(excluded) >= total:
        raise SamplingExhausted(f"all {total} bucket tuples of {entry.key} excluded")
    for _ in range(2000):
        tup = space.sample_tuple(rng)
        if tup not in excluded:
            spec = build_targeted(entry, space.realize(tup, rng), seed, index)
            spec.bucket_tuple = list(tup)
            return spec
    raise SamplingExhausted(f"could not sample an allowed tuple for {entry.key}")


# ---------------------------------------------------------------------------
# Realization (spec -> simulator setup)
# ---------------------------------------------------------------------------

def realize(spec) -> ScenarioSetup:
    if isinstance(spec, dict):
        spec = spec_from_dict(spec)
    if isinstance(spec, FreeFlowSpec):
        return _realize_free_flow(spec)
    return _realize_targeted(spec)


def spec_from_dict(doc: dict):
    if doc.get("kind") == "freeflow":
        return FreeFlowSpec.from_dict(doc)
    if doc.get("kind") == "targeted":
        return TargetedSpec.from_dict(doc)
    raise ConfigError(f"unknown scenario kind {doc.get('kind')!r}")


def _realize_free_flow(spec: FreeFlowSpec) -> ScenarioSetup:
    lane_map = build_map(spec.topology, spec.num_lanes, curvature_seed=spec.seed,
                         curvature_scale=spec.curvature_scale,
                         speed_limit=spec.speed_limit)
    actors = []
    for doc in spec.actors:
        profile = IDM_PROFILES[doc["idm_profile"]]
        idm = IDMParams(v0=max(doc["target_speed"], 1.0),
                        t_headway=doc["target_gap"], s0=profile.s0,
                        a_max=doc["max_accel"], b_comf=doc["max_decel"],
                        delta=profile.delta)
        from .actors import MOBIL_PROFILES
        mobil = MOBIL_PROFILES[doc["mobil_profile"]]
        actors.append(ActorInit(
            id=doc["id"], lane_id=doc["lane_id"], s=doc["s"], v=doc["v"],
            cls=doc["cls"], idm=idm, mobil=mobil, script=None))
    return ScenarioSetup(
        scenario_id=spec.scenario_id, lane_map=lane_map,
        route=RoutePlan(spec.goal_lane_id, spec.goal_station),
        intention=Intention.LANE_FOLLOW,
        ego=EgoInit(lane_id=spec.ego["lane_id"], s=spec.ego["s"], v=spec.ego["v"]),
        actors=tuple(actors))


def _realize_targeted(spec: TargetedSpec) -> ScenarioSetup:
    lane_map = build_map(spec.topology, spec.num_lanes, curvature_seed=spec.seed,
                         curvature_scale=spec.curvature_scale,
                         speed_limit=spec.speed_limit)
    actors = []
    for doc in spec.actors:
        profile = IDM_PROFILES[doc["idm_profile"]]
        idm = IDMParams(v0=max(doc["idm_v0"], 1.0), t_headway=profile.t_headway,
                        s0=profile.s0, a_max=profile.a_max,
                        b_comf=profile.b_comf, delta=profile.delta)
        script = (BehaviorScript.from_dict(doc["script"])
                  if doc.get("script") else None)
        actors.append(ActorInit(
            id=doc["id"], lane_id=doc["lane_id"], s=doc["s"], v=doc["v"],
            cls=doc["cls"], idm=idm, mobil=None, script=script))
    return ScenarioSetup(
        scenario_id=spec.scenario_id, lane_map=lane_map,
        route=RoutePlan(spec.goal_lane_id, spec.goal_station),
        intention=Intention(spec.intention),
        ego=EgoInit(lane_id=spec.ego["lane_id"], s=spec.ego["s"], v=spec.ego["v"]),
        actors=tuple(actors))


# ---------------------------------------------------------------------------
# Dataset splits
# ---------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def counts(self):
        return len(self.train), len(self.val), len(self.test)


def split_free_flow(sizes: tuple, root_seed: int) -> DatasetSplit:
    """Plain i.i.d. holdout with disjoint per-spec seeds."""
    n_train, n_val, n_test = _norm_sizes(sizes)
    types = free_flow_space()
    specs = []
    ss = np.random.SeedSequence(root_seed)
    children = ss.spawn(n_train + n_val + n_test)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        spec_seed = root_seed * 1_000_000 + i
        specs.append(sample_free_flow(types, rng, seed=spec_seed, index=i))
    return DatasetSplit(train=specs[:n_train],
                        val=specs[n_train:n_train + n_val],
                        test=specs[n_train + n_val:])


def split_targeted(sizes: tuple, root_seed: int,
                   entries: list | None = None) -> DatasetSplit:
    """All-pairs test set per type, padded to the requested size; train and
    val sampled with every test bucket tuple excluded."""
    n_train, n_val, n_test = _norm_sizes(sizes)
    entries = entries if entries is not None else catalog()
    ss = np.random.SeedSequence(root_seed + 17)
    rng = np.random.default_rng(ss)

    test_tuples = {e.key: [tuple(t) for t in allpairs(e.space().level_counts)]
                   for e in entries}
    base_total = sum(len(v) for v in test_tuples.values())
    if n_test and base_total > n_test:
        raise ConfigError(
            f"test size {n_test} below the all-pairs requirement {base_total}")

    # pad round-robin with unseen tuples until the requested size
    if n_test:
        excluded_sets = {k: set(v) for k, v in test_tuples.items()}
        i = 0
        while sum(len(v) for v in test_tuples.values()) < n_test:
            entry = entries[i % len(entries)]
            space = entry.space()
            if len(excluded_sets[entry.key]) < space.n_combos():
                for _ in range(2000):
                    tup = space.sample_tuple(rng)
                    if tup not in excluded_sets[entry.key]:
                        excluded_sets[entry.key].add(tup)
                        test_tuples[entry.key].append(tup)
                        break
            i += 1
            if i > 100 * len(entries):
                raise ConfigError("cannot pad the test set to the requested size")

    test_specs = []
    if n_test:
        for e in entries:
            space = e.space()
            for j, tup in enumerate(test_tuples[e.key]):
                spec = build_targeted(e, space.realize(tup, rng),
                                      seed=root_seed * 1_000_000 + len(test_specs),
                                      index=j)
                spec.bucket_tuple = list(tup)
                spec.scenario_id = f"{e.key}-test-{root_seed:04d}-{j:04d}"
                test_specs.append(spec)
        test_specs = test_specs[:n_test]

    excluded = {e.key: set() for e in entries}
    for spec in test_specs:
        excluded[spec.scenario_type].add(tuple(spec.bucket_tuple))

    def draw(n, tag):
        out = []
        for j in range(n):
            entry = entries[j % len(entries)]
            spec = sample_targeted(entry, rng, excluded[entry.key],
                                   seed=root_seed * 1_000_000 + 500_000 + j, index=j)
            spec.scenario_id = f"{entry.key}-{tag}-{root_seed:04d}-{j:04d}"
            out.append(spec)
        return out

    return DatasetSplit(train=draw(n_train, "train"), val=draw(n_val, "val"),
                        test=test_specs)


def _norm_sizes(sizes):
    if len(sizes) == 2:
        return sizes[0], 0, sizes[1]
    if len(sizes) == 3:
        return sizes
    raise ConfigError("sizes must be (train, test) or (train, val, test)")


def split_to_files(split: DatasetSplit, out_dir, root_seed: int):
    """Write one JSON per spec plus a manifest; deterministic bytes."""
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": SCENARIO_SCHEMA_VERSION, "root_seed": root_seed,
                "splits": {}}
    for name in ("train", "val", "test"):
        specs = getattr(split, name)
        files = []
        for spec in specs:
            fname = f"{spec.scenario_id}.json"
            path = out / fname
            path.write_text(json.dumps(spec.to_dict(), sort_keys=True,
                                       separators=(",", ":")) + "\n")
            files.append(fname)
        manifest["splits"][name] = files
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    return out / "manifest.json"


def load_split(scenario_dir) -> DatasetSplit:
    from pathlib import Path
    root = Path(scenario_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    out = {}
    for name, files in manifest["splits"].items():
        out[name] = [spec_from_dict(json.loads((root / f).read_text()))
                     for f in files]
    return DatasetSplit(train=out.get("train", []), val=out.get("val", []),
                        test=out.get("test", []))
