"""Prioritized experience replay: sum-tree storage, stratified proportional
sampling with importance weights, and an n-step return accumulator.

The buffer is the synchronization point between generators and the trainer;
push/sample/update_priorities each take a coarse lock and are linearizable.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, UsageError


class SumTree:
    """Binary sum tree over a power-of-two leaf array.

    Parents are recomputed (not incrementally adjusted) on update, so the root
    stays numerically equal to the leaf sum.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.n_leaves = 1 << (capacity - 1).bit_length()
        self.nodes = np.zeros(2 * self.n_leaves)

    def set(self, leaf: int, value: float) -> None:
        if not 0 <= leaf < self.n_leaves:
            raise UsageError(f"leaf {leaf} out of range")
        if value < 0 or not np.isfinite(value):
            raise UsageError(f"invalid priority {value}")
        i = self.n_leaves + leaf
        self.nodes[i] = value
        i //= 2
        while i >= 1:
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1]
            i //= 2

    def get(self, leaf: int) -> float:
        return float(self.nodes[self.n_leaves + leaf])

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def find_prefix(self, mass: float) -> int:
        """Leaf index whose cumulative-priority interval contains `mass`."""
        mass = min(max(mass, 0.0), np.nextafter(self.total, 0.0))
        i = 1
        while i < self.n_leaves:
            left = 2 * i
            if mass <= self.nodes[left]:
                i = left
            else:
                mass -= self.nodes[left]
                i = left + 1
        return i - self.n_leaves


@dataclass
class NStepRecord:
    """An n-step transition as stored in the replay buffer.

    `reward` is the discounted sum over the lookahead, `gamma_eff` the discount
    to apply to the bootstrap value (gamma**m for an m-step lookahead).
    """

    state: Any
    action_id: int
    reward: float
    next_state: Any
    done: bool
    gamma_eff: float
    candidates: np.ndarray | None = None
    snapshot_version: int = -1


class PrioritizedBuffer:
    """Ring buffer with proportional prioritized sampling.

    Stored priorities are (|td_error| + priority_floor) ** alpha; fresh records
    enter at the maximum stored priority seen so far (initially 1). Sampling is
    stratified over equal mass segments; importance weights are
    (size * P(i)) ** -beta, normalized by the batch maximum.
    """

    def __init__(
        self,
        capacity: int,
        alpha: float = 0.9,
        beta: float = 0.1,
        priority_floor: float = 1e-3,
    ):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        if not 0.0 <= alpha <= 1.0 or not 0.0 <= beta <= 1.0:
            raise ConfigError("alpha and beta must be in [0, 1]")
        if priority_floor <= 0:
            raise ConfigError("priority_floor must be > 0")
        self.capacity = capacity
        self.alpha = alpha
        self.beta = beta
        self.priority_floor = priority_floor
        self.tree = SumTree(capacity)
        self.storage: list[Any] = [None] * capacity
        self.slot_insert_id = np.full(capacity, -1, dtype=np.int64)
        self.total_pushes = 0
        self.size = 0
        self.max_priority = 1.0
        self.stale_updates = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def push(self, record: Any) -> int:
        """Store a record at max priority; returns its insert id."""
        with self._lock:
            insert_id = self.total_pushes
            slot = insert_id % self.capacity
            self.storage[slot] = record
            self.slot_insert_id[slot] = insert_id
            self.tree.set(slot, self.max_priority)
            self.total_pushes += 1
            self.size = min(self.size + 1, self.capacity)
            return insert_id

    def sample(
        self, batch_size: int, rng: np.random.Generator
    ) -> tuple[list[Any], np.ndarray, np.ndarray]:
        """Stratified proportional sample: (records, insert_ids, weights)."""
        with self._lock:
            if self.size < batch_size:
                raise UsageError(
                    f"buffer holds {self.size} records, need {batch_size}"
                )
            total = self.tree.total
            segment = total / batch_size
            records, ids, probs = [], [], []
            for k in range(batch_size):
                mass = rng.uniform(k * segment, (k + 1) * segment)
                slot = self.tree.find_prefix(mass)
                records.append(self.storage[slot])
                ids.append(self.slot_insert_id[slot])
                probs.append(self.tree.get(slot) / total)
            probs_arr = np.asarray(probs)
            weights = (self.size * probs_arr) ** (-self.beta)
            weights = weights / weights.max()
            return records, np.asarray(ids, dtype=np.int64), weights

    def update_priorities(self, insert_ids: np.ndarray, td_errors: np.ndarray) -> None:
        """Set priorities from TD errors; updates for evicted slots are skipped."""
        with self._lock:
            for insert_id, delta in zip(insert_ids, td_errors):
                slot = int(insert_id) % self.capacity
                if self.slot_insert_id[slot] != insert_id:
                    self.stale_updates += 1
                    continue
                priority = (abs(float(delta)) + self.priority_floor) ** self.alpha
                self.tree.set(slot, priority)
                if priority > self.max_priority:
                    self.max_priority = priority


class NStepAccumulator:
    """Converts an episode's raw transitions into n-step records, in order.

    One record is emitted per raw transition; the queue is flushed fully when
    the episode terminates, truncating lookaheads at the terminal step.
    """

    def __init__(
        self,
        n: int,
        gamma: float,
        candidates: np.ndarray | None = None,
        snapshot_version: int = -1,
    ):
        if n < 1:
            raise ConfigError("n must be >= 1")
        if not 0.0 <= gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        self.n = n
        self.gamma = gamma
        self.candidates = candidates
        self.snapshot_version = snapshot_version
        self._queue: deque = deque()
        self._expected_t: int | None = None

    def _emit_front(self) -> NStepRecord:
        state, action_id, _, _, _ = self._queue[0]
        reward = 0.0
        for k, (_, _, r, _, _) in enumerate(self._queue):
            reward += (self.gamma**k) * r
        m = len(self._queue)
        _, _, _, next_state, done = self._queue[-1]
        self._queue.popleft()
        return NStepRecord(
            state,
            action_id,
            reward,
            next_state,
            done,
            self.gamma**m,
            self.candidates,
            self.snapshot_version,
        )

    def push(self, state, action_id: int, reward: float, next_state, done: bool) -> list[NStepRecord]:
        """Feed one raw transition; returns zero or more completed n-step records."""
        t = getattr(state, "t", None)
        if t is not None and self._expected_t is not None and t != self._expected_t:
            raise UsageError(f"out-of-order transition: step {t}, expected {self._expected_t}")
        self._expected_t = getattr(next_state, "t", None)
        self._queue.append((state, action_id, reward, next_state, done))
        emitted: list[NStepRecord] = []
        if done:
            while self._queue:
                emitted.append(self._emit_front())
            self._expected_t = None
        elif len(self._queue) == self.n:
            emitted.append(self._emit_front())
        return emitted
