"""Prioritized experience replay over compact world snapshots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simulator import Snapshot
from .traj_sampler import Trajectory

PRIORITY_FLOOR = 1e-3


@dataclass
class Experience:
    """One transition: snapshots, the taken trajectory, and the actor boxes
    recorded over the executed segment (for counterfactual replay).

    discount is the bootstrap factor (gamma, or gamma^n for folded n-step
    experiences); None means the learner's single-step gamma.
    """

    state: Snapshot
    traj: Trajectory
    reward: float
    next_state: Snapshot
    terminal: bool
    actor_boxes: np.ndarray   # (k, n_actors, 5)
    n_substeps: int
    discount: float | None = None
    # optional precomputed arrays (training fast path): both states'
    # bit-packed rasters, candidate features at s' for bootstrapping, and
    # the full imagined-reward table at s
    raster_packed: np.ndarray | None = None
    next_raster_packed: np.ndarray | None = None
    taken_pixels: np.ndarray | None = None   # (1, T, 2) float16
    taken_kin: np.ndarray | None = None      # (1, T, 7) float16
    next_pixels: np.ndarray | None = None    # (Nn, T, 2) float16
    next_kin: np.ndarray | None = None
    cf_pixels: np.ndarray | None = None      # (Nc, T, 2) float16
    cf_kin: np.ndarray | None = None
    cf_rewards: np.ndarray | None = None     # (Nc,) float32


class ReplayBuffer:
    """Ring buffer; sampling probability proportional to priority^alpha."""

    def __init__(self, capacity: int, alpha: float = 0.6, beta: float = 0.4):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.alpha = alpha
        self.beta = beta
        self._items: list = []
        self._priorities = np.zeros(capacity)
        self._next = 0

    def __len__(self):
        return len(self._items)

    def add(self, exp: Experience):
        """New experiences enter at the current maximum priority."""
        p = self._priorities[:len(self._items)].max() if self._items else 1.0
        if len(self._items) < self.capacity:
            self._items.append(exp)
            self._priorities[len(self._items) - 1] = p
        else:
            self._items[self._next] = exp
            self._priorities[self._next] = p
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator):
        """(indices, experiences, importance weights), weights max-normalized."""
        n = len(self._items)
        if n == 0:
            raise ValueError("buffer is empty")
        scaled = self._priorities[:n] ** self.alpha
        probs = scaled / scaled.sum()
        idx = rng.choice(n, size=min(batch_size, n), replace=n < batch_size,
                         p=probs)
        weights = (n * probs[idx]) ** (-self.beta)
        weights = weights / weights.max()
        return idx, [self._items[i] for i in idx], weights

    def update_priorities(self, indices, td_errors):
        for i, td in zip(indices, td_errors):
            self._priorities[i] = abs(float(td)) + PRIORITY_FLOOR

    def priority(self, index: int) -> float:
        return float(self._priorities[index])
