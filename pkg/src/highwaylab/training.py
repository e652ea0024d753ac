"""Interleaved rollout/learning loop for the trajectory-value agent.

Single-threaded by default (deterministic); optional rollout workers each
own a simulator and a read-only model copy refreshed at episode boundaries,
feeding one learner through a queue.
"""

from __future__ import annotations

import copy
import csv
import logging
import queue
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .agent import (LearnerConfig, Planner, act, attach_caches,
                    attach_next_caches, compute_loss, plan)
from .features import RasterConfig
from .model import ModelConfig, QModel, save_checkpoint
from .replay import Experience, ReplayBuffer
from .reward import RewardWeights
from .scenario_gen import realize
from .simulator import Terminal, reset, run_episode, step
from .traj_sampler import SamplerConfig

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    model: QModel
    env_steps: int
    episodes: int
    grad_steps: int
    curve: list                      # dict rows
    steps_to_sustained_pass: int | None
    checkpoint_path: Path | None = None


@dataclass
class _NStepAssembler:
    """Folds consecutive transitions into n-step experiences."""

    n: int
    gamma: float
    pending: list = field(default_factory=list)

    def push(self, exp: Experience):
        out = []
        self.pending.append(exp)
        if exp.terminal:
            while self.pending:
                out.append(self._fold(self.pending))
                self.pending.pop(0)
            return out
        if len(self.pending) >= self.n:
            out.append(self._fold(self.pending[:self.n]))
            self.pending.pop(0)
        return out

    def _fold(self, chain) -> Experience:
        first = chain[0]
        reward = 0.0
        for i, e in enumerate(chain):
            reward += (self.gamma ** i) * e.reward
        last = chain[-1]
        return replace(first, reward=reward, next_state=last.next_state,
                       terminal=last.terminal,
                       discount=self.gamma ** len(chain),
                       next_raster_packed=last.next_raster_packed,
                       next_pixels=last.next_pixels, next_kin=last.next_kin)

    def reset(self):
        self.pending.clear()


def _greedy_eval(planner: Planner, specs, cfg: LearnerConfig,
                 weights: RewardWeights) -> dict:
    passes, progress = [], []
    for spec in specs:
        setup = realize(spec)
        log_ = run_episode(setup, lambda w: plan(planner, w.snapshot()),
                           max_time=cfg.max_episode_time,
                           replan_substeps=cfg.replan_substeps, weights=weights)
        passes.append(log_.passed)
        xs = [s[1][0] for s in log_.substeps]
        progress.append(xs[-1] - xs[0])
    return {"pass": all(passes), "pass_rate": float(np.mean(passes)),
            "progress": float(np.mean(progress))}


def train(scenarios, cfg: LearnerConfig, model_cfg: ModelConfig,
          raster_cfg: RasterConfig, sampler_cfg: SamplerConfig,
          seed: int = 0, max_env_steps: int = 30_000,
          eval_scenarios=None, eval_every: int = 600,
          stop_after_consecutive_passes: int = 0,
          reward_weights: RewardWeights | None = None,
          out_dir=None, workers: int = 1) -> TrainResult:
    """Train on a scenario list; returns the model plus training curves.

    With stop_after_consecutive_passes > 0, training halts once that many
    consecutive periodic greedy evaluations pass, and steps_to_sustained_pass
    records the env-step count at the first eval of the streak.
    """
    if not scenarios:
        raise ValueError("need at least one training scenario")
    weights = reward_weights or RewardWeights()
    eval_scenarios = eval_scenarios if eval_scenarios is not None else [scenarios[0]]

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    model = QModel(model_cfg)
    target = copy.deepcopy(model)
    planner = Planner(model, raster_cfg, sampler_cfg)
    target_planner = Planner(target, raster_cfg, sampler_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    buffer = ReplayBuffer(cfg.buffer_capacity, cfg.per_alpha, cfg.per_beta)

    state = {"env_steps": 0, "episodes": 0, "grad_steps": 0, "plan_steps": 0}
    diag = {"last": None}
    curve = []
    streak = 0
    streak_start = None
    steps_to_pass = None
    next_eval = eval_every

    def learn_step():
        idx, batch, w = buffer.sample(cfg.batch_size, rng)
        eps_now = cfg.epsilon(state["env_steps"])
        report = compute_loss(model, target, planner, batch, w, cfg, weights,
                              rng, eps_now)
        if not torch.isfinite(report.loss):
            ids = [b.state.route.goal_lane_id for b in batch]
            log.warning("non-finite loss; skipping step (batch routes %s)", ids)
            return None
        optimizer.zero_grad()
        report.loss.backward()
        optimizer.step()
        state["grad_steps"] += 1
        buffer.update_priorities(idx, report.td_errors)
        if state["grad_steps"] % cfg.target_refresh == 0:
            target.load_state_dict(model.state_dict())
        diag["last"] = report
        return report

    def maybe_eval():
        nonlocal next_eval, streak, streak_start, steps_to_pass
        if state["env_steps"] < next_eval:
            return False
        while next_eval <= state["env_steps"]:
            next_eval += eval_every
        with torch.no_grad():
            result = _greedy_eval(planner, eval_scenarios, cfg, weights)
        last = diag["last"]
        row = {"env_steps": state["env_steps"], "episodes": state["episodes"],
               "grad_steps": state["grad_steps"],
               "epsilon": cfg.epsilon(state["env_steps"]),
               "eval_pass": int(result["pass"]),
               "eval_pass_rate": result["pass_rate"],
               "eval_progress": result["progress"],
               "loss_q": last.q_term if last else float("nan"),
               "loss_cf": last.cf_term if last else float("nan"),
               "loss_lagrangian": last.lagrangian_term if last else float("nan")}
        curve.append(row)
        if result["pass"]:
            if streak == 0:
                streak_start = state["env_steps"]
            streak += 1
            if (stop_after_consecutive_passes
                    and streak >= stop_after_consecutive_passes):
                steps_to_pass = streak_start
                return True
        else:
            streak = 0
            streak_start = None
        return False

    if workers <= 1:
        _single_worker_loop(scenarios, cfg, planner, buffer, rng, state,
                            weights, max_env_steps, learn_step, maybe_eval)
    else:
        _threaded_loop(scenarios, cfg, model, model_cfg, raster_cfg,
                       sampler_cfg, buffer, rng, state, weights, max_env_steps,
                       learn_step, maybe_eval, workers, seed)

    checkpoint_path = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out / "checkpoint.pt"
        save_checkpoint(checkpoint_path, model,
                        extra={"env_steps": state["env_steps"],
                               "grad_steps": state["grad_steps"], "seed": seed})
        write_curve(out / "training_curve.csv", curve)
    return TrainResult(model=model, env_steps=state["env_steps"],
                       episodes=state["episodes"],
                       grad_steps=state["grad_steps"], curve=curve,
                       steps_to_sustained_pass=steps_to_pass,
                       checkpoint_path=checkpoint_path)


def _single_worker_loop(scenarios, cfg, planner, buffer, rng, state, weights,
                        max_env_steps, learn_step, maybe_eval):
    from .features import rasterize

    nstep = _NStepAssembler(cfg.n_step, cfg.gamma) if cfg.n_step > 1 else None

    def commit(exp):
        for folded in (nstep.push(exp) if nstep else [exp]):
            buffer.add(folded)

    while state["env_steps"] < max_env_steps:
        spec = scenarios[int(rng.integers(0, len(scenarios)))]
        try:
            world = reset(realize(spec))
        except Exception as exc:  # malformed variation: skip with a warning
            log.warning("skipping scenario that failed to reset: %s", exc)
            state["episodes"] += 1
            continue
        if nstep:
            nstep.reset()
        pending = None  # experience awaiting its next-state arrays
        while world.time < cfg.max_episode_time:
            snap = world.snapshot()
            raster = rasterize(snap, planner.raster_cfg)
            traj_set = planner.trajectory_set(snap)
            if pending is not None:
                attach_next_caches(pending, planner, traj_set, raster)
                commit(pending)
                pending = None
            with torch.no_grad():
                fmap = planner.feature_map_from_raster(raster)
            traj, _ = act(planner, snap, cfg.epsilon(state["env_steps"]), rng,
                          traj_set, fmap=fmap)
            result = step(world, traj, cfg.replan_substeps, weights)
            state["env_steps"] += result.substeps
            state["plan_steps"] += 1
            exp = Experience(state=snap, traj=traj, reward=result.reward,
                             next_state=world.snapshot(),
                             terminal=result.terminal != Terminal.RUNNING,
                             actor_boxes=result.actor_boxes,
                             n_substeps=result.substeps)
            attach_caches(exp, planner, traj_set, raster, weights)
            if exp.terminal:
                commit(exp)
            else:
                pending = exp
            if (len(buffer) >= cfg.min_buffer
                    and state["plan_steps"] % cfg.learn_every == 0):
                learn_step()
            if maybe_eval():
                return True
            if result.terminal != Terminal.RUNNING:
                break
            if state["env_steps"] >= max_env_steps:
                break
        if pending is not None:
            commit(pending)  # episode cut off; loss path falls back to sampling
        state["episodes"] += 1
    return False


def _threaded_loop(scenarios, cfg, model, model_cfg, raster_cfg, sampler_cfg,
                   buffer, rng, state, weights, max_env_steps, learn_step,
                   maybe_eval, workers, seed):
    """N rollout workers with read-only model copies; one learner thread."""
    exp_queue: queue.Queue = queue.Queue(maxsize=workers * 8)
    stop_flag = threading.Event()
    model_lock = threading.Lock()

    def worker(worker_seed):
        wrng = np.random.default_rng(worker_seed)
        local_model = QModel(model_cfg)
        local_planner = Planner(local_model, raster_cfg, sampler_cfg)
        while not stop_flag.is_set():
            with model_lock:
                local_model.load_state_dict(model.state_dict())
            spec = scenarios[int(wrng.integers(0, len(scenarios)))]
            try:
                world = reset(realize(spec))
            except Exception:
                continue
            while world.time < cfg.max_episode_time and not stop_flag.is_set():
                snap = world.snapshot()
                with torch.no_grad():
                    traj, _ = act(local_planner, snap,
                                  cfg.epsilon(state["env_steps"]), wrng)
                result = step(world, traj, cfg.replan_substeps, weights)
                exp = Experience(state=snap, traj=traj, reward=result.reward,
                                 next_state=world.snapshot(),
                                 terminal=result.terminal != Terminal.RUNNING,
                                 actor_boxes=result.actor_boxes,
                                 n_substeps=result.substeps)
                try:
                    exp_queue.put((exp, result.substeps), timeout=1.0)
                except queue.Full:
                    if stop_flag.is_set():
                        return
                if result.terminal != Terminal.RUNNING:
                    break

    threads = [threading.Thread(target=worker, args=(seed * 1000 + 1 + i,),
                                daemon=True) for i in range(workers)]
    for t in threads:
        t.start()
    try:
        while state["env_steps"] < max_env_steps:
            try:
                exp, substeps = exp_queue.get(timeout=5.0)
            except queue.Empty:
                continue
            state["env_steps"] += substeps
            state["plan_steps"] += 1
            buffer.add(exp)
            if exp.terminal:
                state["episodes"] += 1
            if (len(buffer) >= cfg.min_buffer
                    and state["plan_steps"] % cfg.learn_every == 0):
                with model_lock:
                    learn_step()
            if maybe_eval():
                break
    finally:
        stop_flag.set()
        for t in threads:
            t.join(timeout=5.0)


def write_curve(path, curve):
    path = Path(path)
    if not curve:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(curve[0].keys()))
        writer.writeheader()
        writer.writerows(curve)
