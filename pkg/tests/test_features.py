import numpy as np
import pytest
import torch

from highwaylab.features import (DESK_RASTER, TINY_RASTER, RasterConfig,
                                 rasterize, trajectory_kinematics,
                                 waypoints_to_pixels, world_to_ego)
from highwaylab.lane_map import RoutePlan, Topology, build_map
from highwaylab.model import (TINY_MODEL, ModelConfig, QModel, assemble,
                              index_waypoints, load_checkpoint, QModel,
                              raster_to_tensor, save_checkpoint,
                              score_trajectories)
from highwaylab.simulator import ActorInit, EgoInit, Intention, ScenarioSetup, reset
from highwaylab.traj_sampler import DESK_SAMPLER, sample_trajectories


def make_snapshot(actors=(), translate=(0.0, 0.0), ego_v=10.0):
    m = build_map(Topology.STANDARD, 2, curvature_seed=3, curvature_scale=0.004)
    setup = ScenarioSetup(
        scenario_id="feat", lane_map=m, route=RoutePlan(0, 300.0),
        intention=Intention.LANE_FOLLOW, ego=EgoInit(0, 40.0, ego_v),
        actors=tuple(actors))
    world = reset(setup)
    return world.snapshot()


class TestRaster:
    def test_channel_count_and_range(self):
        snap = make_snapshot()
        r = rasterize(snap, DESK_RASTER)
        assert r.shape == (96, 96, 26)
        assert r.min() >= -1.0 and r.max() <= 1.0

    def test_empty_world_actor_channels_zero(self):
        snap = make_snapshot()
        r = rasterize(snap, DESK_RASTER)
        assert np.all(r[:, :, :10] == 0.0)
        # ego history channels must not be empty
        assert r[:, :, 10:20].sum() > 0

    def test_coordinate_channel_corners(self):
        snap = make_snapshot()
        r = rasterize(snap, DESK_RASTER)
        assert r[0, 0, 24] == -1.0 and r[-1, 0, 24] == 1.0
        assert r[0, 0, 25] == -1.0 and r[0, -1, 25] == 1.0

    def test_box_pixel_count(self):
        # 4 m x 2 m box 20 m ahead on a straight lane, axis aligned with the
        # grid: at 0.5 m/px the mask covers exactly 8 x 4 pixels
        cfg = RasterConfig(resolution=0.5, height=128, width=64, x_back=16.0)
        m = build_map(Topology.STANDARD, 1)
        setup = ScenarioSetup(
            scenario_id="b", lane_map=m, route=RoutePlan(0, 300.0),
            intention=Intention.LANE_FOLLOW, ego=EgoInit(0, 40.0, 10.0),
            actors=(ActorInit(id=0, lane_id=0, s=60.125, v=10.0),))
        world = reset(setup)
        snap = world.snapshot()
        r = rasterize(snap, cfg)
        count = int(r[:, :, 9].sum())  # newest actor frame
        expected = (4.5 * 2.0) / (0.5 * 0.5)
        assert abs(count - expected) <= 9  # one-pixel rounding per row

    def test_translation_covariance(self):
        a1 = []
        for dx, dy in ((0.0, 0.0), (137.25, -41.5)):
            m = build_map(Topology.STANDARD, 2, curvature_seed=3,
                          curvature_scale=0.004)
            # translate the whole world: rebuild with shifted geometry
            from highwaylab.geometry import ArcPath, ArcSegment
            from highwaylab.lane_map import Lane, LaneMap
            lanes = [
                type(ln)(id=ln.id,
                         path=ArcPath([ArcSegment(s.x0 + dx, s.y0 + dy,
                                                  s.heading0, s.kappa, s.length)
                                       for s in ln.path.segments]),
                         width=ln.width, end_station=ln.end_station)
                for ln in m.lanes
            ]
            m2 = LaneMap(lanes=lanes, topology=m.topology,
                         speed_limit=m.speed_limit, left=m.left, right=m.right,
                         successors=m.successors)
            setup = ScenarioSetup(
                scenario_id="t", lane_map=m2, route=RoutePlan(0, 300.0),
                intention=Intention.LANE_FOLLOW, ego=EgoInit(0, 40.0, 10.0),
                actors=(ActorInit(id=0, lane_id=1, s=60.0, v=8.0),))
            world = reset(setup)
            a1.append(rasterize(world.snapshot(), DESK_RASTER))
        assert np.array_equal(a1[0], a1[1])


class TestBackbone:
    def test_output_shape(self):
        cfg = ModelConfig(in_channels=26, stem_width=4, block_widths=(4, 4, 4, 4),
                          out_channels=16)
        model = QModel(cfg)
        x = torch.zeros(2, 26, 128, 128)
        f = model.feature_map(x)
        assert f.shape == (2, 16, 16, 16)

    def test_zero_weights_zero_output(self):
        cfg = TINY_MODEL
        model = QModel(cfg)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        x = torch.randn(1, cfg.in_channels, 16, 16)
        assert torch.all(model.feature_map(x) == 0)

    def test_backbone_gradcheck_small(self):
        torch.manual_seed(0)
        cfg = ModelConfig(in_channels=4, stem_width=3, block_widths=(3, 3, 3, 3),
                          out_channels=8, n_waypoints=4, head_hidden=8)
        model = QModel(cfg).double()
        x = torch.randn(1, 4, 16, 16, dtype=torch.float64)
        weights = torch.randn(1, 8, 2, 2, dtype=torch.float64)

        def loss_fn():
            return (model.feature_map(x) * weights).sum()

        loss = loss_fn()
        loss.backward()
        rng = np.random.default_rng(0)
        for name, p in model.backbone.named_parameters():
            g = p.grad
            flat = p.detach().reshape(-1)
            idxs = rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False)
            for i in idxs:
                h = 1e-6 * max(1.0, abs(float(flat[i])))
                with torch.no_grad():
                    flat[i] += h
                    up = loss_fn().item()
                    flat[i] -= 2 * h
                    down = loss_fn().item()
                    flat[i] += h
                fd = (up - down) / (2 * h)
                an = float(g.reshape(-1)[i])
                # floor keeps numerically-zero gradients from failing on
                # finite-difference roundoff
                denom = max(abs(fd), abs(an), 1e-5)
                assert abs(fd - an) / denom < 1e-4, f"{name}[{i}]: {fd} vs {an}"


class TestIndexing:
    def test_constant_feature_map(self):
        cfg = ModelConfig(in_channels=4, out_channels=8, n_waypoints=4)
        fmap = torch.full((8, 12, 12), 3.5)
        pixels = torch.tensor([[[4.0, 4.0], [20.0, 30.0], [50.0, 80.0],
                                [95.0, 95.0]]])
        out = index_waypoints(fmap, pixels, cfg)
        assert out.shape == (1, 4, 2)  # channel groups of C // T
        assert torch.all(out == 3.5)

    def test_full_column_fallback_when_c_below_t(self):
        cfg = ModelConfig(in_channels=4, out_channels=8, n_waypoints=10)
        assert cfg.channels_per_step == 8
        fmap = torch.full((8, 12, 12), 1.25)
        pixels = torch.zeros(2, 10, 2)
        out = index_waypoints(fmap, pixels, cfg)
        assert out.shape == (2, 10, 8)
        assert torch.all(out == 1.25)

    def test_grid_center_nearest(self):
        cfg = ModelConfig(in_channels=4, out_channels=8, n_waypoints=2)
        fmap = torch.arange(8 * 4 * 4, dtype=torch.float32).reshape(8, 4, 4)
        # raster pixel 11.5 maps exactly to feature cell 1 center
        pixels = torch.tensor([[[11.5, 11.5], [11.5, 11.5]]])
        out = index_waypoints(fmap, pixels, cfg)
        group0 = fmap[0:4, 1, 1]
        assert torch.allclose(out[0, 0], group0)

    def test_midway_is_mean(self):
        cfg = ModelConfig(in_channels=4, out_channels=8, n_waypoints=2)
        fmap = torch.zeros(8, 4, 4)
        fmap[:, 1, 1] = 2.0
        fmap[:, 1, 2] = 4.0
        # midway between feature cells (1,1) and (1,2)
        pixels = torch.tensor([[[11.5, 15.5], [11.5, 15.5]]])
        out = index_waypoints(fmap, pixels, cfg)
        assert torch.allclose(out[0, 0], torch.full((4,), 3.0))

    def test_assemble_dimension(self):
        indexed = torch.zeros(3, 10, 8)
        kin = torch.zeros(3, 10, 7)
        f = assemble(indexed, kin)
        assert f.shape == (3, 150)

    def test_identical_trajectories_identical_features(self):
        snap = make_snapshot()
        trajs = sample_trajectories(snap.ego, snap.lane_map, snap.route,
                                    DESK_SAMPLER)
        k1 = trajectory_kinematics(snap, trajs[0])
        k2 = trajectory_kinematics(snap, trajs[0])
        assert np.array_equal(k1, k2)


class TestModelPlumbing:
    def test_q_additivity(self):
        torch.manual_seed(1)
        model = QModel(TINY_MODEL)
        f = torch.randn(5, TINY_MODEL.feature_dim)
        r, v, q = model.heads(f)
        assert torch.equal(q, r + v)

    def test_checkpoint_roundtrip(self, tmp_path):
        torch.manual_seed(2)
        model = QModel(TINY_MODEL)
        path = tmp_path / "model.pt"
        save_checkpoint(path, model, extra={"steps": 7})
        loaded, extra = load_checkpoint(path)
        assert extra["steps"] == 7
        for p1, p2 in zip(model.parameters(), loaded.parameters()):
            assert torch.equal(p1, p2)

    def test_score_trajectories_end_to_end(self):
        snap = make_snapshot()
        trajs = sample_trajectories(snap.ego, snap.lane_map, snap.route,
                                    DESK_SAMPLER)[:8]
        raster = rasterize(snap, TINY_RASTER)
        cfg = ModelConfig(in_channels=26, stem_width=4, block_widths=(4, 4, 4, 4),
                          out_channels=8, n_waypoints=10, head_hidden=16)
        model = QModel(cfg)
        fmap = model.feature_map(raster_to_tensor(raster).unsqueeze(0))[0]
        pixels = torch.stack([
            torch.as_tensor(waypoints_to_pixels(snap, t.waypoints, TINY_RASTER))
            for t in trajs])
        kin = torch.stack([
            torch.as_tensor(trajectory_kinematics(snap, t)) for t in trajs])
        r, v, q = score_trajectories(model, fmap, pixels, kin)
        assert r.shape == (8,) and torch.equal(q, r + v)
