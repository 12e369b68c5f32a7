"""Simulated session environment driven by the trained feedback model.

State holds the user embedding plus a bounded window of (item, feedback)
pairs; stepping predicts head probabilities for the chosen action, binarizes
them by threshold (deterministic, so episodes are replayable), pays the
weighted-probability reward, and terminates on a predicted exit bit or at the
horizon cap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .greedy import FeedbackNet, encode_states, heads_for_actions
from .world import EXIT, LONG_WATCH, N_FEEDBACK, SAVE, WATCH, Catalog, Dataset, UserPool


def save_indicator_weights() -> np.ndarray:
    w = np.zeros(N_FEEDBACK)
    w[SAVE] = 1.0
    return w


@dataclass
class EnvConfig:
    threshold: float = 0.5
    lookback: int = 8
    max_horizon: int = 50
    candidate_size: int = 500
    reward_weights: np.ndarray = field(default_factory=save_indicator_weights)

    def __post_init__(self):
        self.reward_weights = np.asarray(self.reward_weights, dtype=np.float64)
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must be in (0, 1)")
        if self.max_horizon < 1:
            raise ConfigError("max_horizon must be >= 1")
        if self.candidate_size < 2:
            raise ConfigError("candidate_size must be >= 2")
        if self.reward_weights.shape != (N_FEEDBACK,):
            raise ConfigError("reward_weights must cover the feedback alphabet")
        if not np.all(np.isfinite(self.reward_weights)):
            raise ConfigError("non-finite reward weights")


class SessionState:
    """User embedding plus the most recent (item, feedback) pairs of this episode."""

    __slots__ = ("user_id", "user_emb", "window", "t", "terminal")

    def __init__(self, user_id, user_emb, window, t=0, terminal=False):
        self.user_id = int(user_id)
        self.user_emb = user_emb
        self.window = window  # list of (item_id, item_emb, bits)
        self.t = int(t)
        self.terminal = bool(terminal)

    def window_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.window:
            return np.zeros((0, self.user_emb.shape[0])), np.zeros((0, N_FEEDBACK), dtype=np.uint8)
        embs = np.stack([e for (_, e, _) in self.window])
        bits = np.stack([b for (_, _, b) in self.window])
        return embs, bits


@dataclass
class FeedbackSet:
    probs: np.ndarray
    bits: np.ndarray


@dataclass
class SimArtifacts:
    """Everything an episode needs: world arrays, initial-state pool, the
    feedback net powering transitions, and the environment settings."""

    catalog: Catalog
    users: UserPool
    pool: Dataset
    net: FeedbackNet
    env: EnvConfig


@dataclass
class Transition:
    state: SessionState
    action_id: int
    action_emb: np.ndarray
    reward: float
    next_state: SessionState
    done: bool


@dataclass
class PackedState:
    """Compact state for replay storage: embeddings resolved via catalog/users."""

    user_id: int
    window_ids: np.ndarray
    window_bits: np.ndarray
    t: int


def pack_state(state: SessionState) -> PackedState:
    ids = np.asarray([i for (i, _, _) in state.window], dtype=np.int32)
    bits = (
        np.stack([b for (_, _, b) in state.window]).astype(np.uint8)
        if state.window
        else np.zeros((0, N_FEEDBACK), dtype=np.uint8)
    )
    return PackedState(state.user_id, ids, bits, state.t)


def unpack_state(packed: PackedState, catalog: Catalog, users: UserPool) -> SessionState:
    window = [
        (int(i), catalog.embeddings[int(i)], packed.window_bits[j])
        for j, i in enumerate(packed.window_ids)
    ]
    return SessionState(packed.user_id, users.embeddings[packed.user_id], window, packed.t)


def state_prefix(net: FeedbackNet, state: SessionState) -> np.ndarray:
    """[user | pooled history] row for candidate sweeps against this state."""
    L = net.config.lookback
    d = net.config.dim
    we = np.zeros((1, L, d))
    wb = np.zeros((1, L, N_FEEDBACK), dtype=np.uint8)
    mask = np.zeros((1, L))
    k = len(state.window)
    if k:
        embs, bits = state.window_arrays()
        we[0, :k] = embs
        wb[0, :k] = bits
        mask[0, :k] = 1.0
    prefix, _ = encode_states(net, state.user_emb[None, :], we, wb, mask)
    return prefix[0]


def reset(
    pool: Dataset,
    users: UserPool,
    catalog: Catalog,
    config: EnvConfig,
    seed,
) -> tuple[SessionState, np.ndarray]:
    """Draw an initial state from the logged pool and a fixed episode candidate set.

    Candidates are sampled uniformly without replacement and returned sorted by
    item id (the package-wide argmax tie-break order).
    """
    if len(pool) == 0:
        raise UsageError("initial-state pool is empty")
    if config.candidate_size > catalog.n_items:
        raise ConfigError(
            f"candidate_size {config.candidate_size} exceeds catalog size {catalog.n_items}"
        )
    rng = np.random.default_rng(seed)
    row = int(rng.integers(0, len(pool)))
    k = int(pool.window_len[row])
    window = [
        (
            int(pool.window_ids[row, j]),
            catalog.embeddings[int(pool.window_ids[row, j])],
            pool.window_bits[row, j],
        )
        for j in range(k)
    ]
    state = SessionState(int(pool.user_ids[row]), users.embeddings[int(pool.user_ids[row])], window)
    candidates = np.sort(rng.choice(catalog.n_items, size=config.candidate_size, replace=False))
    return state, candidates.astype(np.int64)


def step(
    state: SessionState,
    action_id: int,
    net: FeedbackNet,
    catalog: Catalog,
    config: EnvConfig,
) -> tuple[FeedbackSet, float, SessionState, bool]:
    """One environment transition under the feedback model."""
    if state.terminal:
        raise UsageError("cannot step a finished episode")
    action_emb = catalog.embeddings[int(action_id)]
    prefix = state_prefix(net, state)
    probs = heads_for_actions(net, prefix, action_emb[None, :])[0]
    bits = (probs > config.threshold).astype(np.uint8)
    if bits[WATCH] == 0:
        bits[LONG_WATCH] = 0
    reward = reward_of(probs, config.reward_weights)
    window = list(state.window)
    window.append((int(action_id), action_emb, bits))
    if len(window) > config.lookback:
        window.pop(0)
    done = bool(bits[EXIT] == 1 or state.t + 1 >= config.max_horizon)
    next_state = SessionState(state.user_id, state.user_emb, window, state.t + 1, done)
    return FeedbackSet(probs, bits), reward, next_state, done


def reward_of(probs: np.ndarray, weights: np.ndarray) -> float:
    """Weighted sum of feedback probabilities."""
    probs = np.asarray(probs, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if probs.shape != weights.shape:
        raise UsageError("probs and weights must cover the same feedback alphabet")
    return float(weights @ probs)


def binary_reward_of(bits: np.ndarray, weights: np.ndarray) -> float:
    """Weighted sum of feedback event indicators (the reward-function ablation)."""
    return reward_of(np.asarray(bits, dtype=np.float64), weights)


# --- episode traces -----------------------------------------------------------


def write_trace(path, initial: SessionState, candidates: np.ndarray, steps: list[dict]) -> None:
    """JSON-lines trace: one header object, then one object per transition."""
    header = {
        "user_id": initial.user_id,
        "window": [
            [int(i)] + b.tolist() for (i, _, b) in initial.window
        ],
        "candidates": np.asarray(candidates).tolist(),
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in steps:
            fh.write(json.dumps(s) + "\n")


def read_trace(path) -> tuple[dict, list[dict]]:
    with open(path) as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines:
        raise UsageError(f"empty trace file {path}")
    return lines[0], lines[1:]


def trace_step_record(action_id: int, fb: FeedbackSet, reward: float, done: bool) -> dict:
    return {
        "action_id": int(action_id),
        "probs": fb.probs.tolist(),
        "bits": fb.bits.tolist(),
        "reward": reward,
        "done": done,
    }


def state_from_trace_header(header: dict, catalog: Catalog, users: UserPool) -> SessionState:
    window = [
        (int(e[0]), catalog.embeddings[int(e[0])], np.asarray(e[1:], dtype=np.uint8))
        for e in header["window"]
    ]
    user_id = int(header["user_id"])
    return SessionState(user_id, users.embeddings[user_id], window)


def replay_trace(
    path, net: FeedbackNet, catalog: Catalog, users: UserPool, config: EnvConfig
) -> int:
    """Re-execute a trace's action sequence; returns the number of divergent steps."""
    header, steps = read_trace(path)
    state = state_from_trace_header(header, catalog, users)
    divergences = 0
    for rec in steps:
        fb, reward, state, done = step(state, rec["action_id"], net, catalog, config)
        same = (
            np.array_equal(fb.probs, np.asarray(rec["probs"]))
            and np.array_equal(fb.bits, np.asarray(rec["bits"], dtype=np.uint8))
            and reward == rec["reward"]
            and done == rec["done"]
        )
        if not same:
            divergences += 1
    return divergences
