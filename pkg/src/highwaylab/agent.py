"""Trajectory-value agent: greedy planning over sampled candidate sets,
epsilon-greedy exploration, counterfactual experience generation, and the
composite learning loss.

The loss combines a Q-learning term against a frozen target network, a
counterfactual term supervising the short-horizon head on imagined rewards
(cross-entropy between exp(-prediction) and exp(-reward) by default, squared
error selectable), and a small consistency term tying the beyond-horizon
head to the bootstrapped value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .features import (RasterConfig, batch_kinematics, batch_pixels,
                       pack_raster, rasterize, unpack_raster)
from .model import QModel, raster_to_tensor, score_trajectories
from .replay import Experience
from .reward import RewardWeights, evaluate_segment, evaluate_segments
from .simulator import Snapshot
from .traj_sampler import (SamplerConfig, Trajectory, emergency_stop,
                           sample_trajectories)


@dataclass(frozen=True)
class LearnerConfig:
    gamma: float = 0.95
    alpha: float = 1.0            # counterfactual term weight
    lam: float = 0.01             # consistency (Lagrangian) term weight
    batch_size: int = 10
    lr: float = 1e-4
    eps_start: float = 0.1
    eps_end: float = 0.01
    eps_decay_steps: int = 200_000
    n_counterfactuals: int = 32
    target_refresh: int = 2000
    buffer_capacity: int = 50_000
    per_alpha: float = 0.6
    per_beta: float = 0.4
    cf_mode: str = "cross_entropy"   # or "squared"
    bootstrap: str = "max"           # or "expectation" (eps-greedy form)
    n_step: int = 1                  # 3 emulates the multistep baseline
    learn_every: int = 2             # plan steps per gradient step
    min_buffer: int = 120
    replan_substeps: int = 3
    max_episode_time: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.eps_end > self.eps_start:
            raise ValueError("epsilon schedule must be non-increasing")
        if self.cf_mode not in ("cross_entropy", "squared"):
            raise ValueError("cf_mode must be cross_entropy or squared")
        if self.bootstrap not in ("max", "expectation"):
            raise ValueError("bootstrap must be max or expectation")

    def epsilon(self, env_steps: int) -> float:
        frac = min(env_steps / max(self.eps_decay_steps, 1), 1.0)
        return self.eps_start + (self.eps_end - self.eps_start) * frac


class Planner:
    """Scores candidate trajectories for a snapshot with one model."""

    def __init__(self, model: QModel, raster_cfg: RasterConfig,
                 sampler_cfg: SamplerConfig):
        self.model = model
        self.raster_cfg = raster_cfg
        self.sampler_cfg = sampler_cfg

    def trajectory_set(self, snapshot: Snapshot) -> list:
        return sample_trajectories(snapshot.ego, snapshot.lane_map,
                                   snapshot.route, self.sampler_cfg)

    def feature_map(self, snapshot: Snapshot, model: QModel | None = None):
        raster = rasterize(snapshot, self.raster_cfg)
        return self.feature_map_from_raster(raster, model)

    def feature_map_from_raster(self, raster, model: QModel | None = None):
        model = model or self.model
        dtype = next(model.parameters()).dtype
        return model.feature_map(raster_to_tensor(raster, dtype).unsqueeze(0))[0]

    def trajectory_inputs(self, snapshot: Snapshot, trajs, dtype=torch.float32):
        pixels = torch.as_tensor(batch_pixels(snapshot, trajs, self.raster_cfg),
                                 dtype=dtype)
        kin = torch.as_tensor(batch_kinematics(snapshot, trajs), dtype=dtype)
        return pixels, kin

    def score(self, snapshot: Snapshot, trajs, model: QModel | None = None,
              fmap=None):
        model = model or self.model
        dtype = next(model.parameters()).dtype
        if fmap is None:
            fmap = self.feature_map(snapshot, model)
        pixels, kin = self.trajectory_inputs(snapshot, trajs, dtype)
        return score_trajectories(model, fmap, pixels, kin)


def plan(planner: Planner, snapshot: Snapshot, trajs=None,
         fmap=None) -> Trajectory:
    """Highest-value trajectory; ties break to the lowest index. An empty
    candidate set falls back to a straight maximum-deceleration stop."""
    if trajs is None:
        trajs = planner.trajectory_set(snapshot)
    if not trajs:
        return emergency_stop(snapshot.ego, planner.sampler_cfg)
    with torch.no_grad():
        _, _, q = planner.score(snapshot, trajs, fmap=fmap)
    return trajs[int(np.argmax(q.numpy()))]


def act(planner: Planner, snapshot: Snapshot, eps: float,
        rng: np.random.Generator, trajs=None, fmap=None):
    """Epsilon-greedy over the candidate set. Returns (trajectory, info)."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if trajs is None:
        trajs = planner.trajectory_set(snapshot)
    if not trajs:
        return emergency_stop(snapshot.ego, planner.sampler_cfg), {"greedy": True}
    if rng.random() < eps:
        return trajs[int(rng.integers(0, len(trajs)))], {"greedy": False}
    return plan(planner, snapshot, trajs, fmap=fmap), {"greedy": True}


def make_counterfactuals(exp: Experience, traj_set, n: int,
                         rng: np.random.Generator,
                         weights: RewardWeights):
    """Imagined transitions: n trajectories drawn uniformly from the set,
    rewarded against the recorded (non-reactive) actor motion."""
    if n <= 0 or not traj_set:
        return []
    start_pose = np.array([exp.state.ego.x, exp.state.ego.y,
                           exp.state.ego.heading])
    dims = (exp.state.ego.length, exp.state.ego.width)
    out = []
    for idx in rng.integers(0, len(traj_set), size=n):
        traj = traj_set[int(idx)]
        outcome = evaluate_segment(exp.state.lane_map, exp.state.route,
                                   start_pose, traj, exp.actor_boxes, dims,
                                   exp.n_substeps, weights)
        out.append((traj, outcome.reward))
    return out


def cf_reward_for(exp: Experience, traj: Trajectory,
                  weights: RewardWeights) -> float:
    """Imagined reward for one specific alternative trajectory."""
    start_pose = np.array([exp.state.ego.x, exp.state.ego.y,
                           exp.state.ego.heading])
    dims = (exp.state.ego.length, exp.state.ego.width)
    return evaluate_segment(exp.state.lane_map, exp.state.route, start_pose,
                            traj, exp.actor_boxes, dims, exp.n_substeps,
                            weights).reward


def attach_caches(exp: Experience, planner: Planner, traj_set, raster_s,
                  weights: RewardWeights):
    """Precompute the state-side arrays: packed raster, taken-trajectory
    features, and imagined rewards for the whole candidate set."""
    exp.raster_packed = pack_raster(raster_s, planner.raster_cfg)
    exp.taken_pixels = batch_pixels(exp.state, [exp.traj],
                                    planner.raster_cfg).astype(np.float16)
    exp.taken_kin = batch_kinematics(exp.state, [exp.traj]).astype(np.float16)
    if traj_set:
        start_pose = np.array([exp.state.ego.x, exp.state.ego.y,
                               exp.state.ego.heading])
        dims = (exp.state.ego.length, exp.state.ego.width)
        outcomes = evaluate_segments(exp.state.lane_map, exp.state.route,
                                     start_pose, traj_set, exp.actor_boxes,
                                     dims, exp.n_substeps, weights)
        exp.cf_rewards = np.array([o.reward for o in outcomes], dtype=np.float32)
        exp.cf_pixels = batch_pixels(exp.state, traj_set,
                                     planner.raster_cfg).astype(np.float16)
        exp.cf_kin = batch_kinematics(exp.state, traj_set).astype(np.float16)


def attach_next_caches(exp: Experience, planner: Planner, next_traj_set,
                       raster_next):
    """Precompute the next-state arrays used for bootstrapping."""
    exp.next_raster_packed = pack_raster(raster_next, planner.raster_cfg)
    trajs = next_traj_set or [emergency_stop(exp.next_state.ego,
                                             planner.sampler_cfg)]
    exp.next_pixels = batch_pixels(exp.next_state, trajs,
                                   planner.raster_cfg).astype(np.float16)
    exp.next_kin = batch_kinematics(exp.next_state, trajs).astype(np.float16)


@dataclass
class LossReport:
    loss: torch.Tensor
    td_errors: np.ndarray
    q_term: float
    cf_term: float
    lagrangian_term: float


def _state_raster(e: Experience, planner: Planner, dtype, next_state=False):
    packed = e.next_raster_packed if next_state else e.raster_packed
    if packed is not None:
        raster = unpack_raster(packed, planner.raster_cfg)
    else:
        raster = rasterize(e.next_state if next_state else e.state,
                           planner.raster_cfg)
    return raster_to_tensor(raster, dtype)


def compute_loss(model: QModel, target_model: QModel, planner: Planner,
                 experiences, is_weights, cfg: LearnerConfig,
                 reward_weights: RewardWeights, rng: np.random.Generator,
                 eps_now: float = 0.0) -> LossReport:
    """Composite loss over a sampled batch.

    Bootstrap targets come from the frozen target network over the candidate
    set at the next state; terminal transitions bootstrap to zero.
    Experiences carrying precomputed arrays use them; others fall back to
    sampling and rasterizing on the fly.
    """
    dtype = next(model.parameters()).dtype
    device = next(model.parameters()).device

    rasters = torch.stack([_state_raster(e, planner, dtype)
                           for e in experiences]).to(device)
    fmaps = model.feature_map(rasters)

    q_preds, v_preds, cf_losses = [], [], []
    targets = []
    with torch.no_grad():
        nt_idx = [i for i, e in enumerate(experiences) if not e.terminal]
        if nt_idx:
            rasters_n = torch.stack([
                _state_raster(experiences[i], planner, dtype, next_state=True)
                for i in nt_idx]).to(device)
            fmaps_n = target_model.feature_map(rasters_n)
        boot = {}
        for row, i in enumerate(nt_idx):
            e = experiences[i]
            if e.next_pixels is not None:
                pixels = torch.as_tensor(e.next_pixels, dtype=dtype)
                kin = torch.as_tensor(e.next_kin, dtype=dtype)
            else:
                next_trajs = planner.trajectory_set(e.next_state)
                if not next_trajs:
                    next_trajs = [emergency_stop(e.next_state.ego,
                                                 planner.sampler_cfg)]
                pixels, kin = planner.trajectory_inputs(e.next_state,
                                                        next_trajs, dtype)
            _, _, q_next = score_trajectories(target_model, fmaps_n[row],
                                              pixels, kin)
            if cfg.bootstrap == "max":
                boot[i] = float(q_next.max())
            else:
                # expectation under the eps-greedy policy of the target values
                boot[i] = float((1.0 - eps_now) * q_next.max()
                                + eps_now * q_next.mean())

    discounts = [e.discount if e.discount is not None else cfg.gamma
                 for e in experiences]
    for i, e in enumerate(experiences):
        if e.taken_pixels is not None:
            pixels = torch.as_tensor(e.taken_pixels, dtype=dtype)
            kin = torch.as_tensor(e.taken_kin, dtype=dtype)
        else:
            pixels, kin = planner.trajectory_inputs(e.state, [e.traj], dtype)
        r_hat, v_hat, q_hat = score_trajectories(model, fmaps[i], pixels, kin)
        q_preds.append(q_hat[0])
        v_preds.append(v_hat[0])

        y = e.reward + (0.0 if e.terminal else discounts[i] * boot[i])
        targets.append(y)

        if (e.cf_rewards is not None and len(e.cf_rewards)
                and cfg.n_counterfactuals > 0):
            n_avail = len(e.cf_rewards)
            draw = rng.integers(0, n_avail, size=cfg.n_counterfactuals)
            cf_r = torch.as_tensor(e.cf_rewards[draw], dtype=dtype,
                                   device=device)
            pixels = torch.as_tensor(e.cf_pixels[draw], dtype=dtype)
            kin = torch.as_tensor(e.cf_kin[draw], dtype=dtype)
            cf = cfg.n_counterfactuals > 0
        else:
            cf_set = planner.trajectory_set(e.state)
            pairs = make_counterfactuals(e, cf_set, cfg.n_counterfactuals,
                                         rng, reward_weights)
            cf = bool(pairs)
            if cf:
                cf_r = torch.tensor([r for _, r in pairs], dtype=dtype,
                                    device=device)
                pixels, kin = planner.trajectory_inputs(
                    e.state, [t for t, _ in pairs], dtype)
        if cf:
            r_cf_hat, _, _ = score_trajectories(model, fmaps[i], pixels, kin)
            if cfg.cf_mode == "squared":
                cf_losses.append(((r_cf_hat - cf_r) ** 2).mean())
            else:
                # cross-entropy between exp(-prediction) and exp(-reward)
                log_q = torch.log_softmax(-r_cf_hat, dim=0)
                p = torch.softmax(-cf_r, dim=0)
                cf_losses.append(-(p * log_q).sum())
        else:
            cf_losses.append(torch.zeros((), dtype=dtype, device=device))

    q_pred = torch.stack(q_preds)
    v_pred = torch.stack(v_preds)
    cf_loss = torch.stack(cf_losses)
    y = torch.tensor(targets, dtype=dtype, device=device)
    boot_v = torch.tensor([0.0 if e.terminal else discounts[i] * boot[i]
                           for i, e in enumerate(experiences)],
                          dtype=dtype, device=device)
    w = torch.as_tensor(np.asarray(is_weights), dtype=dtype, device=device)

    q_term = (q_pred - y) ** 2
    lag_term = (v_pred - boot_v) ** 2
    per_sample = q_term + cfg.alpha * cf_loss + cfg.lam * lag_term
    loss = (w * per_sample).mean()
    td = (q_pred - y).detach().cpu().numpy()
    return LossReport(loss=loss, td_errors=td,
                      q_term=float(q_term.detach().mean()),
                      cf_term=float(cf_loss.detach().mean()),
                      lagrangian_term=float(lag_term.detach().mean()))
