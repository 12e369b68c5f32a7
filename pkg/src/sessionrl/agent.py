"""Q-learning side: state-action-in-value-out network, warm start from the
feedback model, epsilon/softmax exploration over candidate sets, and the
Double-DQN n-step training step with prioritized replay.

The value head consumes post-sigmoid head probabilities through an identity
dense layer, so a warm-started net satisfies Q(s, a) == P(save | s, a) exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, TrainingError, UsageError
from .greedy import (
    EncoderConfig,
    FeedbackNet,
    backward_batch,
    build_feedback_net,
    encode_states,
    heads_for_actions,
)
from .replay import NStepRecord, PrioritizedBuffer
from .simulator import PackedState, SessionState, state_prefix
from .world import N_FEEDBACK, SAVE, Catalog, UserPool

EXPLORATION_MODES = ("trunc_softmax", "all_softmax", "eps_greedy", "softmax_q")


@dataclass
class ExplorationConfig:
    epsilon: float = 0.2
    temperature: float = 0.1
    trunc_fraction: float = 0.25
    mode: str = "trunc_softmax"

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("epsilon must be in [0, 1]")
        if self.temperature <= 0.0:
            raise ConfigError("temperature must be > 0")
        if not 0.0 < self.trunc_fraction <= 1.0:
            raise ConfigError("trunc_fraction must be in (0, 1]")
        if self.mode not in EXPLORATION_MODES:
            raise ConfigError(f"mode must be one of {EXPLORATION_MODES}")


class QNet:
    """FeedbackNet body plus a heads-to-one identity layer emitting the scalar Q."""

    def __init__(self, feedback: FeedbackNet, value: nn.DenseLayer):
        if value.n_in != N_FEEDBACK or value.n_out != 1:
            raise ConfigError("value layer must map head probabilities to a scalar")
        if value.activation != "identity":
            raise ConfigError("value layer must use the identity activation")
        self.feedback = feedback
        self.value = value

    @property
    def config(self) -> EncoderConfig:
        return self.feedback.config

    def params(self) -> list[np.ndarray]:
        return self.feedback.params() + [self.value.weights, self.value.bias]

    def set_params(self, params: list[np.ndarray]) -> None:
        self.feedback.set_params(params[:-2])
        self.value.weights = np.asarray(params[-2], dtype=np.float64)
        self.value.bias = np.asarray(params[-1], dtype=np.float64)

    def copy(self) -> "QNet":
        return QNet(self.feedback.copy(), self.value.copy())


def warm_start(donor: FeedbackNet) -> QNet:
    """Copy the donor and wire the value layer to pass through the save head."""
    if donor.head_names[SAVE] != "save":
        raise ConfigError(f"donor head order {donor.head_names} lacks 'save' at index {SAVE}")
    w = np.zeros((1, N_FEEDBACK))
    w[0, SAVE] = 1.0
    return QNet(donor.copy(), nn.DenseLayer(w, np.zeros(1), "identity"))


def random_q_net(config: EncoderConfig, rng: np.random.Generator) -> QNet:
    """Scratch-initialized QNet with the same structure (the warm-start ablation control)."""
    feedback = build_feedback_net(config, rng)
    value = nn.DenseLayer.init(N_FEEDBACK, 1, "identity", rng)
    return QNet(feedback, value)


def q_for_actions(qnet: QNet, state: SessionState, action_embs: np.ndarray) -> np.ndarray:
    """Q-values of one state against many candidate actions."""
    prefix = state_prefix(qnet.feedback, state)
    heads = heads_for_actions(qnet.feedback, prefix, action_embs)
    return heads @ qnet.value.weights[0] + qnet.value.bias[0]


def q_value(qnet: QNet, state: SessionState, action_emb: np.ndarray) -> float:
    return float(q_for_actions(qnet, state, action_emb[None, :])[0])


def truncate_candidates(
    qnet: QNet,
    state: SessionState,
    candidate_ids: np.ndarray,
    catalog: Catalog,
    trunc_fraction: float,
) -> np.ndarray:
    """Top-K candidate ids by Q(s0, .), K = max(1, ceil(fraction * |C|)).

    Ties go to the smaller item id. Computed once per episode at reset and
    frozen; callers keep the returned array for the whole episode.
    """
    if len(candidate_ids) == 0:
        raise UsageError("empty candidate set")
    if not 0.0 < trunc_fraction <= 1.0:
        raise ConfigError("trunc_fraction must be in (0, 1]")
    candidate_ids = np.sort(np.asarray(candidate_ids))
    q = q_for_actions(qnet, state, catalog.embeddings[candidate_ids])
    k = max(1, math.ceil(trunc_fraction * len(candidate_ids)))
    order = np.argsort(-q, kind="stable")  # descending Q, ties by ascending id
    return np.sort(candidate_ids[order[:k]])


def _softmax_draw(q: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    logits = q / temperature
    logits = logits - logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def select_action(
    qnet: QNet,
    state: SessionState,
    candidate_ids: np.ndarray,
    truncated_ids: np.ndarray,
    config: ExplorationConfig,
    rng: np.random.Generator,
    catalog: Catalog,
) -> int:
    """Pick an item id under the configured exploration strategy.

    trunc_softmax: argmax over all candidates w.p. 1-epsilon, else softmax of
    Q/temperature restricted to the truncated set. all_softmax widens the
    softmax branch to all candidates; eps_greedy replaces it with a uniform
    draw; softmax_q always samples the full-set softmax.
    """
    candidate_ids = np.asarray(candidate_ids)
    if config.mode == "softmax_q":
        q = q_for_actions(qnet, state, catalog.embeddings[candidate_ids])
        return int(candidate_ids[_softmax_draw(q, config.temperature, rng)])
    if rng.random() >= config.epsilon:
        q = q_for_actions(qnet, state, catalog.embeddings[candidate_ids])
        return int(candidate_ids[int(np.argmax(q))])
    if config.mode == "eps_greedy":
        return int(candidate_ids[rng.integers(0, len(candidate_ids))])
    pool = truncated_ids if config.mode == "trunc_softmax" else candidate_ids
    pool = np.asarray(pool)
    q = q_for_actions(qnet, state, catalog.embeddings[pool])
    return int(pool[_softmax_draw(q, config.temperature, rng)])


def greedy_action(qnet: QNet, state: SessionState, candidate_ids: np.ndarray, catalog: Catalog) -> int:
    """Exploitation-only argmax (ties to the smaller id; candidates pre-sorted)."""
    candidate_ids = np.asarray(candidate_ids)
    q = q_for_actions(qnet, state, catalog.embeddings[candidate_ids])
    return int(candidate_ids[int(np.argmax(q))])


@dataclass
class TargetPair:
    online: QNet
    target: QNet
    updates_since_sync: int = 0

    def sync(self) -> None:
        self.target = self.online.copy()
        self.updates_since_sync = 0


def _batch_states(
    states: list, catalog: Catalog, users: UserPool, config: EncoderConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Materialize PackedState/SessionState batches into encoder inputs."""
    B = len(states)
    L, d = config.lookback, config.dim
    ue = np.empty((B, d))
    we = np.zeros((B, L, d))
    wb = np.zeros((B, L, N_FEEDBACK), dtype=np.uint8)
    mask = np.zeros((B, L))
    for i, s in enumerate(states):
        if isinstance(s, PackedState):
            ue[i] = users.embeddings[s.user_id]
            k = len(s.window_ids)
            if k:
                we[i, :k] = catalog.embeddings[s.window_ids]
                wb[i, :k] = s.window_bits
                mask[i, :k] = 1.0
        else:
            ue[i] = s.user_emb
            k = len(s.window)
            if k:
                embs, bits = s.window_arrays()
                we[i, :k] = embs
                wb[i, :k] = bits
                mask[i, :k] = 1.0
    return ue, we, wb, mask


def q_forward_batch(
    qnet: QNet,
    states: list,
    action_ids: np.ndarray,
    catalog: Catalog,
    users: UserPool,
):
    """Q for per-row (state, action) pairs; returns (q, tapes) for the backward pass."""
    ue, we, wb, mask = _batch_states(states, catalog, users, qnet.config)
    prefix, enc_tape = encode_states(qnet.feedback, ue, we, wb, mask)
    feats = np.concatenate([prefix, catalog.embeddings[np.asarray(action_ids)]], axis=1)
    heads, trunk_tape = nn.forward(qnet.feedback.trunk, feats)
    q = heads @ qnet.value.weights[0] + qnet.value.bias[0]
    return q, (enc_tape, trunk_tape, heads)


def q_backward_batch(qnet: QNet, tapes, dq: np.ndarray) -> list[np.ndarray]:
    """Gradients aligned with qnet.params() given dLoss/dQ per row."""
    enc_tape, trunk_tape, heads = tapes
    dheads = dq[:, None] * qnet.value.weights[0][None, :]
    d_value_w = (dq[None, :] @ heads).reshape(1, N_FEEDBACK)
    d_value_b = np.asarray([dq.sum()])
    feedback_grads = backward_batch(qnet.feedback, enc_tape, trunk_tape, dheads)
    return feedback_grads + [d_value_w, d_value_b]


def td_target(
    records: list[NStepRecord],
    pair: TargetPair,
    catalog: Catalog,
    users: UserPool,
) -> np.ndarray:
    """Double-Q n-step targets.

    For non-terminal records: reward + gamma_eff * Q_target(s', a*) with
    a* = argmax over the record's stored episode candidates of Q_online(s', .).
    Terminal records use the n-step reward alone.
    """
    B = len(records)
    rewards = np.asarray([r.reward for r in records])
    done = np.asarray([r.done for r in records], dtype=bool)
    gamma_eff = np.asarray([r.gamma_eff for r in records])
    live = np.flatnonzero(~done)
    targets = rewards.copy()
    if len(live) == 0:
        return targets
    live_records = [records[i] for i in live]
    next_states = [r.next_state for r in live_records]
    ue, we, wb, mask = _batch_states(next_states, catalog, users, pair.online.config)

    # argmax under the online net over each record's stored candidate set
    prefix_on, _ = encode_states(pair.online.feedback, ue, we, wb, mask)
    best_ids = np.empty(len(live), dtype=np.int64)
    cand_sizes = {len(r.candidates) for r in live_records}
    if len(cand_sizes) == 1:
        C = cand_sizes.pop()
        cand = np.stack([r.candidates for r in live_records])
        feats = np.concatenate(
            [
                np.repeat(prefix_on, C, axis=0),
                catalog.embeddings[cand.reshape(-1)],
            ],
            axis=1,
        )
        heads, _ = nn.forward(pair.online.feedback.trunk, feats)
        q = (heads @ pair.online.value.weights[0] + pair.online.value.bias[0]).reshape(len(live), C)
        best_ids = cand[np.arange(len(live)), np.argmax(q, axis=1)]
    else:
        for j, r in enumerate(live_records):
            heads = heads_for_actions(
                pair.online.feedback, prefix_on[j], catalog.embeddings[np.asarray(r.candidates)]
            )
            q = heads @ pair.online.value.weights[0] + pair.online.value.bias[0]
            best_ids[j] = np.asarray(r.candidates)[int(np.argmax(q))]

    # evaluate the chosen actions under the target net
    prefix_tg, _ = encode_states(pair.target.feedback, ue, we, wb, mask)
    feats_tg = np.concatenate([prefix_tg, catalog.embeddings[best_ids]], axis=1)
    heads_tg, _ = nn.forward(pair.target.feedback.trunk, feats_tg)
    q_tg = heads_tg @ pair.target.value.weights[0] + pair.target.value.bias[0]
    targets[live] = rewards[live] + gamma_eff[live] * q_tg
    return targets


@dataclass
class TrainParams:
    gamma: float = 0.75
    nstep: int = 3
    batch_size: int = 128
    learning_rate: float = 2.5e-4
    target_sync_every: int = 500

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1]")
        if self.nstep < 1 or self.batch_size < 1 or self.target_sync_every < 1:
            raise ConfigError("nstep, batch_size and target_sync_every must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")


def train_step(
    pair: TargetPair,
    buffer: PrioritizedBuffer,
    opt_state: nn.AdamState,
    params: TrainParams,
    catalog: Catalog,
    users: UserPool,
    rng: np.random.Generator,
) -> tuple[float, nn.AdamState]:
    """One prioritized Double-DQN update on the online net; returns (loss, opt_state)."""
    records, ids, weights = buffer.sample(params.batch_size, rng)
    targets = td_target(records, pair, catalog, users)
    states = [r.state for r in records]
    action_ids = np.asarray([r.action_id for r in records])
    q, tapes = q_forward_batch(pair.online, states, action_ids, catalog, users)
    delta = targets - q
    loss = float(np.mean(weights * delta**2))
    if not np.isfinite(loss):
        raise TrainingError(f"TD loss diverged: {loss}")
    dq = 2.0 * weights * (q - targets) / len(records)
    grads = q_backward_batch(pair.online, tapes, dq)
    new_params, opt_state = nn.adam_step(pair.online.params(), grads, opt_state)
    pair.online.set_params(new_params)
    buffer.update_priorities(ids, delta)
    pair.updates_since_sync += 1
    if pair.updates_since_sync >= params.target_sync_every:
        pair.sync()
    return loss, opt_state


# --- snapshots ----------------------------------------------------------------


def save_q_net(path, qnet: QNet, exploration: ExplorationConfig | None = None, version: int = 0) -> None:
    meta = {
        "kind": "q_net",
        "version": int(version),
        "encoder": {
            "dim": qnet.config.dim,
            "lookback": qnet.config.lookback,
            "slot_width": qnet.config.slot_width,
            "trunk_hidden": list(qnet.config.trunk_hidden),
        },
        "trunk": nn.net_meta(qnet.feedback.trunk),
    }
    if exploration is not None:
        meta["exploration"] = {
            "epsilon": exploration.epsilon,
            "temperature": exploration.temperature,
            "trunc_fraction": exploration.trunc_fraction,
            "mode": exploration.mode,
        }
    arrays = {
        "slot_w": qnet.feedback.slot_proj.weights,
        "slot_b": qnet.feedback.slot_proj.bias,
        "value_w": qnet.value.weights,
        "value_b": qnet.value.bias,
    }
    arrays.update(nn.net_to_arrays(qnet.feedback.trunk, "trunk"))
    nn.save_checkpoint(path, meta, arrays)


def load_q_net(path) -> tuple[QNet, ExplorationConfig | None, int]:
    meta, arrays = nn.load_checkpoint(path)
    if meta.get("kind") != "q_net":
        raise ConfigError(f"{path} is not a q-net checkpoint")
    enc = meta["encoder"]
    config = EncoderConfig(
        dim=enc["dim"],
        lookback=enc["lookback"],
        slot_width=enc["slot_width"],
        trunk_hidden=tuple(enc["trunk_hidden"]),
    )
    trunk = nn.net_from_arrays(meta["trunk"], arrays, "trunk")
    slot = nn.DenseLayer(arrays["slot_w"], arrays["slot_b"], "relu")
    feedback = FeedbackNet(slot, trunk, config)
    value = nn.DenseLayer(arrays["value_w"], arrays["value_b"], "identity")
    exploration = None
    if "exploration" in meta:
        exploration = ExplorationConfig(**meta["exploration"])
    return QNet(feedback, value), exploration, meta["version"]
