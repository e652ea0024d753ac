import math

import numpy as np
import pytest

from highwaylab.actors import ActorState
from highwaylab.lane_map import RoutePlan, Topology, build_map, to_frenet
from highwaylab.traj_sampler import (DESK_SAMPLER, KinematicLimits,
                                     SamplerConfig, Trajectory, emergency_stop,
                                     feasibility_filter, fit_quartic,
                                     fit_quintic, sample_trajectories)


def poly_eval(coeffs, x):
    """Independent power-sum evaluation (oracle for spline residuals)."""
    return sum(c * x**i for i, c in enumerate(coeffs))


def poly_deriv_eval(coeffs, x, order):
    c = list(coeffs)
    for _ in range(order):
        c = [c[i] * i for i in range(1, len(c))]
    return poly_eval(c, x)


def make_ego(m, lane_id=0, s=20.0, v=10.0, a=0.0, d=0.0):
    pt, h = m.lane(lane_id).path.point_at(np.asarray(s), np.asarray(d))
    return ActorState(id=-1, x=float(pt[0]), y=float(pt[1]), heading=float(h),
                      v=v, a=a, lane_id=lane_id, s=s, d=d)


class TestQuartic:
    def test_constant_speed_exact(self):
        sp = fit_quartic(10.0, 0.0, 10.0, 5.0)
        t = np.linspace(0, 5, 11)
        assert np.allclose(sp.position(t), 10.0 * t, atol=1e-12)

    def test_all_zero(self):
        sp = fit_quartic(0.0, 0.0, 0.0, 5.0)
        assert np.allclose(sp.coeffs, 0.0)

    def test_boundary_residuals_case(self):
        sp = fit_quartic(10.0, 0.0, 20.0, 5.0)
        c = sp.coeffs
        assert abs(poly_eval(c, 0.0)) < 1e-9
        assert abs(poly_deriv_eval(c, 0.0, 1) - 10.0) < 1e-9
        assert abs(poly_deriv_eval(c, 0.0, 2) - 0.0) < 1e-9
        assert abs(poly_deriv_eval(c, 5.0, 1) - 20.0) < 1e-9
        assert abs(poly_deriv_eval(c, 5.0, 2)) < 1e-9

    def test_random_residuals(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            v0, a0 = rng.uniform(0, 30), rng.uniform(-4, 3)
            vt, T = rng.uniform(0, 30), rng.uniform(1, 8)
            sp = fit_quartic(v0, a0, vt, T)
            c = sp.coeffs
            assert abs(poly_eval(c, 0.0)) < 1e-9
            assert abs(poly_deriv_eval(c, 0.0, 1) - v0) < 1e-9
            assert abs(poly_deriv_eval(c, 0.0, 2) - a0) < 1e-9
            assert abs(poly_deriv_eval(c, T, 1) - vt) < 1e-9
            assert abs(poly_deriv_eval(c, T, 2)) < 1e-9

    def test_bad_horizon(self):
        with pytest.raises(ValueError):
            fit_quartic(1.0, 0.0, 2.0, 0.0)


class TestQuintic:
    def test_zero_everywhere(self):
        lp = fit_quintic(0.0, 0.0, 0.0, 0.0, 40.0)
        assert np.allclose(lp.coeffs, 0.0)
        assert np.all(lp.offset(np.linspace(0, 60, 20)) == 0.0)

    def test_lane_change_shape(self):
        lp = fit_quintic(0.0, 0.0, 0.0, 3.5, 40.0)
        u = np.linspace(0, 40, 400)
        d = lp.offset(u)
        assert d[0] == pytest.approx(0.0, abs=1e-12)
        assert d[-1] == pytest.approx(3.5, abs=1e-9)
        assert np.all(np.diff(d) >= -1e-9)  # monotone S-curve
        assert np.max(np.abs(lp.curvature_term(u))) < 0.02

    def test_random_residuals(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            d0, dd0, ddd0 = rng.uniform(-3, 3), rng.uniform(-0.3, 0.3), rng.uniform(-0.05, 0.05)
            d_end, s_end = rng.uniform(-4, 4), rng.uniform(10, 100)
            lp = fit_quintic(d0, dd0, ddd0, d_end, s_end)
            c = lp.coeffs
            assert abs(poly_eval(c, 0.0) - d0) < 1e-9
            assert abs(poly_deriv_eval(c, 0.0, 1) - dd0) < 1e-9
            assert abs(poly_deriv_eval(c, 0.0, 2) - ddd0) < 1e-9
            assert abs(poly_eval(c, s_end) - d_end) < 1e-9
            assert abs(poly_deriv_eval(c, s_end, 1)) < 1e-9
            assert abs(poly_deriv_eval(c, s_end, 2)) < 1e-9


class TestFeasibility:
    def straight_traj(self, kappa=0.0, accel=0.0, kdot=0.0):
        nt = 51
        t = np.arange(nt) * 0.1
        v = 10.0 + accel * t
        xy = np.stack([10.0 * t, np.zeros(nt)], axis=-1)
        z = np.zeros(nt)
        return Trajectory(
            waypoints=xy[5::5], v=v[5::5], a=z[5::5] + accel,
            heading=z[5::5], kappa=z[5::5] + kappa, kappa_dot=z[5::5] + kdot,
            dense_t=t, dense_xy=xy, dense_v=v, dense_a=z + accel,
            dense_heading=z, dense_kappa=z + kappa, dense_kappa_dot=z + kdot)

    def test_straight_ok(self):
        assert feasibility_filter(self.straight_traj(), KinematicLimits())

    def test_hairpin_rejected(self):
        assert not feasibility_filter(self.straight_traj(kappa=0.5), KinematicLimits())

    def test_boundary_kappa_inclusive(self):
        assert feasibility_filter(self.straight_traj(kappa=0.2), KinematicLimits())

    def test_accel_bounds(self):
        assert not feasibility_filter(self.straight_traj(accel=-7.0), KinematicLimits())
        assert feasibility_filter(self.straight_traj(accel=-2.0), KinematicLimits())


class TestSampler:
    def test_single_profile_single_lane(self):
        m = build_map(Topology.STANDARD, 1)
        ego = make_ego(m, v=10.0)
        cfg = SamplerConfig(n_speeds=1, lateral_ends=(0.0,), end_stations=(40.0,))
        trajs = sample_trajectories(ego, m, RoutePlan(0, 300.0), cfg)
        assert len(trajs) == 1
        assert np.max(np.abs(trajs[0].dense_xy[:, 1])) < 1e-9  # straight

    def test_uniform_motion_spacing(self):
        m = build_map(Topology.STANDARD, 1, speed_limit=18.0)
        ego = make_ego(m, v=10.0)
        cfg = SamplerConfig(n_speeds=3, v_headroom=2.0, lateral_ends=(0.0,),
                            end_stations=(40.0,))
        trajs = sample_trajectories(ego, m, RoutePlan(0, 300.0), cfg)
        # targets are [0, 10, 20]; pick the constant-speed one
        tr = next(t for t in trajs if t.source[0] == 1)
        spacing = np.hypot(*np.diff(tr.waypoints, axis=0).T)
        assert np.allclose(spacing, 5.0, atol=1e-9)
        assert np.allclose(tr.v, 10.0, atol=1e-9)

    def test_candidate_count_and_bounds(self):
        m = build_map(Topology.STANDARD, 3, curvature_seed=2, curvature_scale=0.004)
        ego = make_ego(m, lane_id=1, s=60.0, v=15.0)
        cfg = SamplerConfig(
            n_speeds=25,
            lateral_ends=(-3.5, -2.6, -1.75, -0.9, 0.0, 0.9, 1.75, 2.6, 3.5),
            end_stations=(15.0, 25.0, 40.0, 60.0, 80.0))
        trajs = sample_trajectories(ego, m, RoutePlan(1, 300.0), cfg)
        assert 0 < len(trajs) <= 25 * 9 * 5 * 3
        lim = cfg.limits
        for tr in trajs:
            assert feasibility_filter(tr, lim)

    def test_offmap_ego_empty(self):
        m = build_map(Topology.STANDARD, 1)
        ego = ActorState(id=-1, x=50.0, y=80.0, heading=0.0, v=10.0, a=0.0,
                         lane_id=0, s=50.0, d=80.0)
        assert sample_trajectories(ego, m, RoutePlan(0, 300.0), DESK_SAMPLER) == []

    def test_frenet_consistency_constant_curvature(self):
        # single-arc lane: stored profiles must be recoverable by projection
        from highwaylab.geometry import ArcPath
        from highwaylab.lane_map import Lane, LaneMap
        path = ArcPath.from_start(0.0, 0.0, 0.0, [(0.005, 400.0)])
        m = LaneMap(lanes=[Lane(id=0, path=path, width=3.5)],
                    topology=Topology.STANDARD, speed_limit=30.0,
                    left={}, right={}, successors={})
        ego = make_ego(m, v=12.0, s=30.0)
        cfg = SamplerConfig(n_speeds=5, lateral_ends=(-1.75, 0.0, 1.75),
                            end_stations=(30.0, 60.0))
        trajs = sample_trajectories(ego, m, RoutePlan(0, 300.0), cfg)
        assert trajs
        for tr in trajs[::7]:
            s_rel_expected = None
            for i, wp in enumerate(tr.waypoints):
                fr = to_frenet(m, wp)
                # d matches the lateral spline evaluated at the recovered station
                lp_sources = tr.source
                # reconstruct by comparing against projection of dense path
                assert abs(fr.d) < 3.5 + 0.1
            s_proj, d_proj, _ = path.project(tr.dense_xy)
            # projected stations must be monotone and match ds integration
            assert np.all(np.diff(s_proj) > -1e-6)

    def test_lane_change_reachability(self):
        m = build_map(Topology.STANDARD, 2)
        ego = make_ego(m, lane_id=0, s=40.0, v=15.0)
        trajs = sample_trajectories(ego, m, RoutePlan(0, 300.0), DESK_SAMPLER)
        other = m.lane(1)
        best = np.inf
        for tr in trajs:
            _, d, _ = other.path.project(tr.waypoints[-1][None, :])
            best = min(best, abs(float(d[0])))
        assert best < 0.25

    def test_curvature_matches_finite_differences(self):
        m = build_map(Topology.STANDARD, 2, curvature_seed=6, curvature_scale=0.006)
        ego = make_ego(m, lane_id=0, s=50.0, v=14.0)
        trajs = sample_trajectories(ego, m, RoutePlan(0, 300.0), DESK_SAMPLER)
        assert trajs
        checked = 0
        for tr in trajs[::5]:
            xy = tr.dense_xy
            seg = np.hypot(*np.diff(xy, axis=0).T)
            if np.any(seg < 0.2):  # skip slow/stopping paths: FD degenerate
                continue
            # Menger curvature through consecutive dense points (oracle)
            a = xy[:-2]
            b = xy[1:-1]
            c = xy[2:]
            ab = b - a
            bc = c - b
            cross = ab[:, 0] * bc[:, 1] - ab[:, 1] * bc[:, 0]
            la = np.hypot(*ab.T)
            lb = np.hypot(*bc.T)
            lc = np.hypot(*(c - a).T)
            k_fd = 2.0 * cross / (la * lb * lc)
            k_stored = tr.dense_kappa[1:-1]
            # road curvature is piecewise constant: at arc junctions kappa
            # genuinely steps, so exclude a window around kinks where a
            # 3-point oracle cannot represent the step
            kink = np.abs(np.diff(tr.dense_kappa, 2))
            bad = np.zeros(len(k_stored), dtype=bool)
            for idx in np.nonzero(kink > 1e-5)[0]:
                lo = max(idx - 2, 0)
                bad[lo:idx + 3] = True
            err = np.abs(k_fd - k_stored)[~bad]
            tol = np.maximum(0.05 * np.abs(k_stored), 2e-4)[~bad]
            assert np.all(err <= tol)
            checked += 1
        assert checked >= 5

    def test_emergency_stop_feasible(self):
        m = build_map(Topology.STANDARD, 1)
        ego = make_ego(m, v=20.0)
        tr = emergency_stop(ego, DESK_SAMPLER)
        assert feasibility_filter(tr, DESK_SAMPLER.limits)
        assert tr.dense_v[-1] == 0.0
        assert np.all(np.diff(tr.dense_xy[:, 0]) >= 0.0)
