"""Map-aware trajectory sampling in the Frenet frame.

Longitudinal motion comes from quartic splines s(t) fit to target speeds;
lateral motion from quintic splines d(s) toward offsets around reference
lanes (current lane plus existing neighbors). Candidates are composed into
world-frame paths and filtered by bicycle-model feasibility bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .actors import ActorState
from .lane_map import LaneMap, RoutePlan


@dataclass(frozen=True)
class KinematicLimits:
    kappa_max: float = 0.2      # 1/m
    a_min: float = -6.0         # m/s^2
    a_max: float = 4.0          # m/s^2
    kappa_dot_max: float = 0.1  # 1/(m*s)


@dataclass(frozen=True)
class SamplerConfig:
    horizon: float = 5.0
    dt_plan: float = 0.5
    dt: float = 0.1
    n_speeds: int = 25
    v_headroom: float = 2.0     # sampled target speeds reach limit + headroom
    lateral_ends: tuple = (-3.5, -1.75, 0.0, 1.75, 3.5)
    end_stations: tuple = (15.0, 25.0, 40.0, 60.0, 80.0)
    limits: KinematicLimits = field(default_factory=KinematicLimits)

    @property
    def n_waypoints(self) -> int:
        return int(round(self.horizon / self.dt_plan))

    @property
    def substeps_per_waypoint(self) -> int:
        return int(round(self.dt_plan / self.dt))


DESK_SAMPLER = SamplerConfig(n_speeds=9, lateral_ends=(-3.5, 0.0, 3.5),
                             end_stations=(20.0, 40.0, 60.0))


@dataclass(frozen=True)
class SpeedProfile:
    """Quartic s(t): s(0)=0, s'(0)=v0, s''(0)=a0, s'(T)=v_target, s''(T)=0."""

    coeffs: np.ndarray  # ascending powers, length 5
    v0: float
    a0: float
    v_target: float
    horizon: float

    def position(self, t):
        return _polyval(self.coeffs, t)

    def speed(self, t):
        return _polyval(_polyder(self.coeffs), t)

    def accel(self, t):
        return _polyval(_polyder(_polyder(self.coeffs)), t)


@dataclass(frozen=True)
class LateralProfile:
    """Quintic d(u) over relative station u in [0, u_end]; constant beyond."""

    coeffs: np.ndarray  # ascending powers, length 6
    d0: float
    d_end: float
    u_end: float

    def offset(self, u):
        u = np.asarray(u, dtype=float)
        inside = np.minimum(u, self.u_end)
        return np.where(u <= self.u_end, _polyval(self.coeffs, inside), self.d_end)

    def slope(self, u):
        u = np.asarray(u, dtype=float)
        return np.where(u <= self.u_end, _polyval(_polyder(self.coeffs), u), 0.0)

    def curvature_term(self, u):
        u = np.asarray(u, dtype=float)
        dd = _polyder(_polyder(self.coeffs))
        return np.where(u <= self.u_end, _polyval(dd, u), 0.0)


@dataclass(eq=False)
class Trajectory:
    """One candidate plan: coarse waypoints plus a dense tracked path.

    Dense arrays are sampled at the simulation dt and drive both execution
    and replay; waypoints are every dt_plan for feature indexing.
    """

    waypoints: np.ndarray      # (T, 2) world frame
    v: np.ndarray              # (T,)
    a: np.ndarray
    heading: np.ndarray
    kappa: np.ndarray
    kappa_dot: np.ndarray
    dense_t: np.ndarray        # (n,) starting at 0
    dense_xy: np.ndarray       # (n, 2)
    dense_v: np.ndarray
    dense_a: np.ndarray
    dense_heading: np.ndarray
    dense_kappa: np.ndarray
    dense_kappa_dot: np.ndarray
    source: tuple = (-1, -1, -1)  # (speed id, lateral id, reference lane)

    def pose_at_substep(self, i: int):
        return np.array([self.dense_xy[i, 0], self.dense_xy[i, 1], self.dense_heading[i]])


def _polyval(coeffs, x):
    """Horner evaluation, ascending coefficients, broadcast over x."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for c in coeffs[::-1]:
        out = out * x + c
    return out


def _polyder(coeffs):
    n = len(coeffs)
    return np.array([coeffs[i] * i for i in range(1, n)])


def fit_quartic(v0: float, a0: float, v_target: float, horizon: float) -> SpeedProfile:
    """Unique quartic matching the five longitudinal boundary conditions."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    t = horizon
    b0 = v_target - v0 - a0 * t
    b1 = -a0
    c3 = b0 / t**2 - b1 / (3.0 * t)
    c4 = b1 / (4.0 * t**2) - b0 / (2.0 * t**3)
    coeffs = np.array([0.0, v0, a0 / 2.0, c3, c4])
    return SpeedProfile(coeffs, v0, a0, v_target, horizon)


def fit_quintic(d0: float, dd0: float, ddd0: float, d_end: float,
                s_end: float) -> LateralProfile:
    """Unique quintic meeting the six lateral boundary conditions."""
    if s_end <= 0:
        raise ValueError("s_end must be positive")
    length = s_end
    c0, c1, c2 = d0, dd0, ddd0 / 2.0
    rhs = np.array([
        d_end - (c0 + c1 * length + c2 * length**2),
        -(c1 + 2.0 * c2 * length),
        -2.0 * c2,
    ])
    mat = np.array([
        [length**3, length**4, length**5],
        [3 * length**2, 4 * length**3, 5 * length**4],
        [6 * length, 12 * length**2, 20 * length**3],
    ])
    c345 = np.linalg.solve(mat, rhs)
    coeffs = np.concatenate([[c0, c1, c2], c345])
    return LateralProfile(coeffs, d0, d_end, s_end)


def feasibility_filter(traj: Trajectory, limits: KinematicLimits) -> bool:
    """Closed-bound bicycle-model feasibility over the dense path."""
    eps = 1e-9
    if np.any(traj.dense_v < -eps):
        return False
    if np.any(traj.dense_a < limits.a_min - eps) or np.any(traj.dense_a > limits.a_max + eps):
        return False
    if np.any(np.abs(traj.dense_kappa) > limits.kappa_max + eps):
        return False
    if np.any(np.abs(traj.dense_kappa_dot) > limits.kappa_dot_max + eps):
        return False
    return True


def emergency_stop(ego: ActorState, cfg: SamplerConfig) -> Trajectory:
    """Straight-line maximum-deceleration fallback when sampling fails."""
    lim = cfg.limits
    nt = int(round(cfg.horizon / cfg.dt)) + 1
    t = np.arange(nt) * cfg.dt
    t_stop = ego.v / -lim.a_min if ego.v > 0 else 0.0
    moving = t < t_stop
    v = np.where(moving, ego.v + lim.a_min * t, 0.0)
    s = np.where(moving, ego.v * t + 0.5 * lim.a_min * t**2,
                 ego.v * t_stop + 0.5 * lim.a_min * t_stop**2)
    a = np.where(moving, lim.a_min, 0.0)
    xy = np.stack([ego.x + s * math.cos(ego.heading),
                   ego.y + s * math.sin(ego.heading)], axis=-1)
    zeros = np.zeros(nt)
    heading = np.full(nt, ego.heading)
    step = cfg.substeps_per_waypoint
    sl = slice(step, None, step)
    return Trajectory(
        waypoints=xy[sl], v=v[sl], a=a[sl], heading=heading[sl],
        kappa=zeros[sl].copy(), kappa_dot=zeros[sl].copy(),
        dense_t=t, dense_xy=xy, dense_v=v, dense_a=a, dense_heading=heading,
        dense_kappa=zeros, dense_kappa_dot=zeros.copy(), source=(-1, -1, -1))


def sample_trajectories(ego: ActorState, lane_map: LaneMap, route: RoutePlan,
                        cfg: SamplerConfig) -> list[Trajectory]:
    """Candidate set over (speed profile) x (lateral profile) x (reference lane).

    Returns an empty list when the ego cannot be projected near any lane.
    """
    lim = cfg.limits
    nt = int(round(cfg.horizon / cfg.dt)) + 1
    t = np.arange(nt) * cfg.dt
    step = cfg.substeps_per_waypoint
    sl = slice(step, None, step)

    ref_ids = _reference_lanes(ego, lane_map)
    if not ref_ids:
        return []

    v_cap = lane_map.speed_limit + cfg.v_headroom
    targets = np.linspace(0.0, v_cap, cfg.n_speeds)
    a0 = float(np.clip(ego.a, lim.a_min + 0.5, lim.a_max - 0.5))

    out: list[Trajectory] = []
    for ref_lane_id in ref_ids:
        lane = lane_map.lane(ref_lane_id)
        s_arr, d_arr, _ = lane.path.project(np.array([[ego.x, ego.y]]))
        s0, d0 = float(s_arr[0]), float(d_arr[0])
        lane_heading = float(lane.path.heading_at(np.asarray(np.clip(s0, 0, lane.length))))
        dtheta = _wrap(ego.heading - lane_heading)
        if abs(dtheta) > 1.0:
            continue  # pathological alignment; skip this reference
        kappa_here = float(lane.path.curvature_at(np.asarray(np.clip(s0, 0, lane.length))))
        dd0 = (1.0 - kappa_here * d0) * math.tan(dtheta)
        # project the ego speed onto the longitudinal rate for this reference
        v0_long = ego.v * math.cos(dtheta) / (1.0 - kappa_here * d0)
        speed_profiles = [fit_quartic(v0_long, a0, float(vt), cfg.horizon)
                          for vt in targets]

        lat_profiles = []
        for u_end in cfg.end_stations:
            for d_end in cfg.lateral_ends:
                lat_profiles.append(fit_quintic(d0, dd0, 0.0, float(d_end), float(u_end)))

        out.extend(_compose_batch(lane, ref_lane_id, s0, speed_profiles,
                                  lat_profiles, t, sl, cfg))
    return out


def _reference_lanes(ego: ActorState, lane_map: LaneMap) -> list[int]:
    try:
        from .lane_map import to_frenet
        fr = to_frenet(lane_map, [ego.x, ego.y, ego.heading])
    except Exception:
        return []
    ids = [fr.lane_id]
    for side in ("left", "right"):
        adj = lane_map.adjacent(fr.lane_id, side)
        if adj is not None:
            ids.append(adj)
    return ids


def _compose_batch(lane, ref_lane_id, s0, speed_profiles, lat_profiles,
                   t, sl, cfg) -> list[Trajectory]:
    """Vectorized composition of all (speed x lateral) pairs on one lane."""
    lim = cfg.limits
    nt = t.shape[0]
    keep_speed = []
    s_rows, sd_rows, sdd_rows = [], [], []
    for sp_id, sp in enumerate(speed_profiles):
        s_dot = sp.speed(t)
        if np.min(s_dot) < -1e-9:
            continue  # reversing profile
        keep_speed.append(sp_id)
        s_rows.append(sp.position(t))
        sd_rows.append(np.maximum(s_dot, 0.0))
        sdd_rows.append(sp.accel(t))
    if not keep_speed:
        return []
    s_rel = np.stack(s_rows)            # (ns, nt)
    s_dot = np.stack(sd_rows)
    s_dd = np.stack(sdd_rows)
    ns = s_rel.shape[0]
    nl = len(lat_profiles)

    # lateral splines evaluated at every longitudinal sample
    coeffs = np.stack([lp.coeffs for lp in lat_profiles])          # (nl, 6)
    u_end = np.array([lp.u_end for lp in lat_profiles])
    d_end = np.array([lp.d_end for lp in lat_profiles])
    u = np.broadcast_to(s_rel, (nl, ns, nt))
    inside = u <= u_end[:, None, None]
    u_in = np.minimum(u, u_end[:, None, None])
    d = _horner(coeffs, u_in)
    dp = np.where(inside, _horner(_der_rows(coeffs), u_in), 0.0)
    dpp = np.where(inside, _horner(_der_rows(_der_rows(coeffs)), u_in), 0.0)
    d = np.where(inside, d, d_end[:, None, None])

    station = s0 + s_rel                                           # (ns, nt)
    kappa_r = lane.path.curvature_at(
        np.clip(station, 0.0, lane.path.length))[None, :, :]
    one = 1.0 - kappa_r * d
    q = np.sqrt(one**2 + dp**2)
    dtheta = np.arctan2(dp, one)

    flat_station = np.broadcast_to(station, (nl, ns, nt)).reshape(-1)
    xy_flat, lane_h_flat = lane.path.point_at(flat_station, d.reshape(-1),
                                              extrapolate=True)
    xy = xy_flat.reshape(nl, ns, nt, 2)
    heading = lane_h_flat.reshape(nl, ns, nt) + dtheta

    v = s_dot[None, :, :] * q
    dq_ds = (dp * dpp - kappa_r * dp * one) / q
    a = s_dd[None, :, :] * q + (s_dot[None, :, :] ** 2) * dq_ds
    kappa = (kappa_r + (dpp * one + kappa_r * dp**2) / q**2) / q
    kappa_dot = np.gradient(kappa, cfg.dt, axis=-1)

    eps = 1e-9
    ok = (np.all(one > 0.1, axis=-1)
          & np.all(v >= -eps, axis=-1)
          & np.all(a >= lim.a_min - eps, axis=-1)
          & np.all(a <= lim.a_max + eps, axis=-1)
          & np.all(np.abs(kappa) <= lim.kappa_max + eps, axis=-1)
          & np.all(np.abs(kappa_dot) <= lim.kappa_dot_max + eps, axis=-1))

    out = []
    for li, si in zip(*np.nonzero(ok)):
        out.append(Trajectory(
            waypoints=xy[li, si, sl], v=v[li, si, sl], a=a[li, si, sl],
            heading=heading[li, si, sl], kappa=kappa[li, si, sl],
            kappa_dot=kappa_dot[li, si, sl],
            dense_t=t, dense_xy=xy[li, si], dense_v=v[li, si], dense_a=a[li, si],
            dense_heading=heading[li, si], dense_kappa=kappa[li, si],
            dense_kappa_dot=kappa_dot[li, si],
            source=(keep_speed[si], int(li), ref_lane_id)))
    return out


def _horner(coeff_rows, x):
    """Rows of ascending coefficients (n, k) evaluated at x (n, ...)."""
    out = np.zeros_like(x)
    for j in range(coeff_rows.shape[1] - 1, -1, -1):
        out = out * x + coeff_rows[:, j][(...,) + (None,) * (x.ndim - 1)]
    return out


def _der_rows(coeff_rows):
    n = coeff_rows.shape[1]
    if n <= 1:
        return np.zeros((coeff_rows.shape[0], 1))
    return coeff_rows[:, 1:] * np.arange(1, n)[None, :]


def _wrap(x: float) -> float:
    return (x + math.pi) % (2 * math.pi) - math.pi
