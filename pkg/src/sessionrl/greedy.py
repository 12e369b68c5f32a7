"""One-step feedback model: encodes (state, action), predicts all feedback heads.

The encoder projects each history slot (item embedding + feedback bits +
presence bit) through a shared dense layer, mean-pools over present slots
(zero vector for an empty history), and concatenates user + pooled history +
action embedding as the trunk input. Head order is the global FEEDBACK_NAMES
constant; checkpoints record it and the loader verifies it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import nn
from .errors import ConfigError, TrainingError
from .world import FEEDBACK_NAMES, N_FEEDBACK, Catalog, Dataset, UserPool

SLOT_EXTRA = N_FEEDBACK + 1  # feedback bits plus a presence flag


@dataclass
class EncoderConfig:
    dim: int = 16
    lookback: int = 8
    slot_width: int = 16
    trunk_hidden: tuple[int, ...] = (64, 32)

    def __post_init__(self):
        if self.dim < 1 or self.slot_width < 1 or self.lookback < 1:
            raise ConfigError("encoder widths must be >= 1")
        if any(w < 1 for w in self.trunk_hidden):
            raise ConfigError("trunk hidden widths must be >= 1")
        self.trunk_hidden = tuple(self.trunk_hidden)

    @property
    def slot_in(self) -> int:
        return self.dim + SLOT_EXTRA

    @property
    def feature_width(self) -> int:
        return self.dim + self.slot_width + self.dim


class FeedbackNet:
    """Slot projection + trunk MLP with one sigmoid head per feedback type."""

    def __init__(self, slot_proj: nn.DenseLayer, trunk: nn.MlpNet, config: EncoderConfig):
        if slot_proj.n_in != config.slot_in or slot_proj.n_out != config.slot_width:
            raise ConfigError("slot projection dims do not match encoder config")
        if trunk.n_in != config.feature_width:
            raise ConfigError("trunk input width does not match encoder config")
        if trunk.head_names != FEEDBACK_NAMES:
            raise ConfigError(f"head order must be {FEEDBACK_NAMES}")
        self.slot_proj = slot_proj
        self.trunk = trunk
        self.config = config

    @property
    def head_names(self) -> tuple[str, ...]:
        return self.trunk.head_names

    def params(self) -> list[np.ndarray]:
        return [self.slot_proj.weights, self.slot_proj.bias] + self.trunk.params()

    def set_params(self, params: list[np.ndarray]) -> None:
        self.slot_proj.weights = np.asarray(params[0], dtype=np.float64)
        self.slot_proj.bias = np.asarray(params[1], dtype=np.float64)
        self.trunk.set_params(params[2:])

    def copy(self) -> "FeedbackNet":
        return FeedbackNet(self.slot_proj.copy(), self.trunk.copy(), self.config)


def build_feedback_net(config: EncoderConfig, rng: np.random.Generator) -> FeedbackNet:
    slot = nn.DenseLayer.init(config.slot_in, config.slot_width, "relu", rng)
    trunk = nn.MlpNet.build(
        config.feature_width, list(config.trunk_hidden), FEEDBACK_NAMES, rng
    )
    return FeedbackNet(slot, trunk, config)


class EncoderTape:
    def __init__(self, slot_in_flat, slot_pre, mask, counts):
        self.slot_in_flat = slot_in_flat
        self.slot_pre = slot_pre
        self.mask = mask
        self.counts = counts


def encode_states(
    net: FeedbackNet,
    user_embs: np.ndarray,
    win_embs: np.ndarray,
    win_bits: np.ndarray,
    win_mask: np.ndarray,
) -> tuple[np.ndarray, EncoderTape]:
    """Map a batch of states to [user | pooled history] prefixes.

    Shapes: user_embs (B, d), win_embs (B, L, d), win_bits (B, L, |F|),
    win_mask (B, L) with 1 for present slots. Returns (B, d + slot_width).
    """
    B, L, d = win_embs.shape
    if d != net.config.dim or user_embs.shape != (B, d):
        raise ConfigError("state batch dims do not match encoder config")
    mask = win_mask.astype(np.float64)
    slot_in = np.concatenate(
        [win_embs, win_bits.astype(np.float64), mask[:, :, None]], axis=2
    )
    flat = slot_in.reshape(B * L, net.config.slot_in)
    pre = flat @ net.slot_proj.weights.T + net.slot_proj.bias
    z = np.maximum(pre, 0.0).reshape(B, L, net.config.slot_width)
    z = z * mask[:, :, None]
    counts = mask.sum(axis=1)
    denom = np.maximum(counts, 1.0)
    pool = z.sum(axis=1) / denom[:, None]
    prefix = np.concatenate([user_embs, pool], axis=1)
    return prefix, EncoderTape(flat, pre, mask, counts)


def heads_for_actions(
    net: FeedbackNet, prefix_row: np.ndarray, action_embs: np.ndarray
) -> np.ndarray:
    """Head probabilities for one state prefix against many candidate actions."""
    C = action_embs.shape[0]
    feats = np.concatenate(
        [np.broadcast_to(prefix_row, (C, prefix_row.shape[0])), action_embs], axis=1
    )
    probs, _ = nn.forward(net.trunk, feats)
    return probs


def forward_batch(
    net: FeedbackNet,
    user_embs: np.ndarray,
    win_embs: np.ndarray,
    win_bits: np.ndarray,
    win_mask: np.ndarray,
    action_embs: np.ndarray,
) -> tuple[np.ndarray, EncoderTape, nn.Tape]:
    """Full forward for per-row (state, action) pairs; returns probs (B, |F|)."""
    prefix, enc_tape = encode_states(net, user_embs, win_embs, win_bits, win_mask)
    feats = np.concatenate([prefix, action_embs], axis=1)
    probs, trunk_tape = nn.forward(net.trunk, feats)
    return probs, enc_tape, trunk_tape


def backward_batch(
    net: FeedbackNet,
    enc_tape: EncoderTape,
    trunk_tape: nn.Tape,
    dprobs: np.ndarray,
) -> list[np.ndarray]:
    """Gradients aligned with net.params() for a forward_batch pass."""
    trunk_grads, dfeats = nn.backward(net.trunk, trunk_tape, dprobs)
    d = net.config.dim
    p = net.config.slot_width
    dpool = dfeats[:, d : d + p]
    B, L = enc_tape.mask.shape
    denom = np.maximum(enc_tape.counts, 1.0)
    dz = (dpool / denom[:, None])[:, None, :] * enc_tape.mask[:, :, None]
    dpre = dz.reshape(B * L, p) * (enc_tape.slot_pre > 0.0)
    dW = dpre.T @ enc_tape.slot_in_flat
    db = dpre.sum(axis=0)
    return [dW, db] + trunk_grads


def predict_heads(
    net: FeedbackNet,
    user_emb: np.ndarray,
    win_embs: np.ndarray,
    win_bits: np.ndarray,
    action_emb: np.ndarray,
) -> np.ndarray:
    """Single (state, action) convenience wrapper; window arrays hold only present slots."""
    L = net.config.lookback
    k = win_embs.shape[0] if win_embs.size else 0
    we = np.zeros((1, L, net.config.dim))
    wb = np.zeros((1, L, N_FEEDBACK), dtype=np.uint8)
    mask = np.zeros((1, L))
    if k:
        we[0, :k] = win_embs
        wb[0, :k] = win_bits
        mask[0, :k] = 1.0
    prefix, _ = encode_states(net, user_emb[None, :], we, wb, mask)
    return heads_for_actions(net, prefix[0], action_emb[None, :])[0]


# --- training ----------------------------------------------------------------


def dataset_batch(
    catalog: Catalog, users: UserPool, dataset: Dataset, idx: np.ndarray
) -> tuple[np.ndarray, ...]:
    """Materialize embeddings for dataset rows: returns the forward_batch inputs plus labels."""
    L = dataset.lookback
    user_embs = users.embeddings[dataset.user_ids[idx]]
    w_ids = dataset.window_ids[idx]
    mask = (np.arange(L)[None, :] < dataset.window_len[idx][:, None]).astype(np.float64)
    win_embs = catalog.embeddings[np.clip(w_ids, 0, None)] * mask[:, :, None]
    win_bits = dataset.window_bits[idx]
    action_embs = catalog.embeddings[dataset.action_ids[idx]]
    labels = dataset.labels[idx].astype(np.float64)
    return user_embs, win_embs, win_bits, mask, action_embs, labels


def split_dataset(n_rows: int, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng((seed, 303))
    perm = rng.permutation(n_rows)
    n_hold = int(round(n_rows * holdout_fraction))
    return perm[n_hold:], perm[:n_hold]


def train_feedback_net(
    dataset: Dataset,
    catalog: Catalog,
    users: UserPool,
    config: EncoderConfig,
    epochs: int,
    seed: int,
    batch_size: int = 128,
    learning_rate: float = 1e-3,
    row_indices: np.ndarray | None = None,
) -> tuple[FeedbackNet, list[float]]:
    """BCE training over the logged rows; returns the net and per-epoch mean loss."""
    if len(dataset) == 0:
        raise ConfigError("empty dataset")
    rng = np.random.default_rng((seed, 404))
    net = build_feedback_net(config, rng)
    state = nn.AdamState.init_like(net.params(), learning_rate)
    rows = np.arange(len(dataset)) if row_indices is None else np.asarray(row_indices)
    loss_curve: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(rows)
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            ue, we, wb, mask, ae, labels = dataset_batch(catalog, users, dataset, idx)
            probs, enc_tape, trunk_tape = forward_batch(net, ue, we, wb, mask, ae)
            loss, dprobs = nn.bce_loss(probs, labels)
            if not np.isfinite(loss):
                raise TrainingError(f"feedback-model loss diverged: {loss}")
            grads = backward_batch(net, enc_tape, trunk_tape, dprobs)
            new_params, state = nn.adam_step(net.params(), grads, state)
            net.set_params(new_params)
            losses.append(loss)
        loss_curve.append(float(np.mean(losses)))
    return net, loss_curve


def predict_dataset(
    net: FeedbackNet, catalog: Catalog, users: UserPool, dataset: Dataset, idx: np.ndarray,
    batch_size: int = 4096,
) -> np.ndarray:
    out = np.empty((len(idx), N_FEEDBACK))
    for start in range(0, len(idx), batch_size):
        chunk = idx[start : start + batch_size]
        ue, we, wb, mask, ae, _ = dataset_batch(catalog, users, dataset, chunk)
        probs, _, _ = forward_batch(net, ue, we, wb, mask, ae)
        out[start : start + len(chunk)] = probs
    return out


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUC (Mann-Whitney); returns 0.5 for single-class labels."""
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def heldout_auc(
    net: FeedbackNet, catalog: Catalog, users: UserPool, dataset: Dataset, idx: np.ndarray
) -> dict[str, float]:
    probs = predict_dataset(net, catalog, users, dataset, idx)
    labels = dataset.labels[idx]
    return {
        name: auc_score(probs[:, i], labels[:, i]) for i, name in enumerate(FEEDBACK_NAMES)
    }


# --- checkpoints --------------------------------------------------------------


def save_feedback_net(path, net: FeedbackNet) -> None:
    meta = {
        "kind": "feedback_net",
        "encoder": {
            "dim": net.config.dim,
            "lookback": net.config.lookback,
            "slot_width": net.config.slot_width,
            "trunk_hidden": list(net.config.trunk_hidden),
        },
        "trunk": nn.net_meta(net.trunk),
    }
    arrays = {"slot_w": net.slot_proj.weights, "slot_b": net.slot_proj.bias}
    arrays.update(nn.net_to_arrays(net.trunk, "trunk"))
    nn.save_checkpoint(path, meta, arrays)


def load_feedback_net(path) -> FeedbackNet:
    meta, arrays = nn.load_checkpoint(path)
    if meta.get("kind") != "feedback_net":
        raise ConfigError(f"{path} is not a feedback-net checkpoint")
    enc = meta["encoder"]
    config = EncoderConfig(
        dim=enc["dim"],
        lookback=enc["lookback"],
        slot_width=enc["slot_width"],
        trunk_hidden=tuple(enc["trunk_hidden"]),
    )
    if tuple(meta["trunk"]["head_names"]) != FEEDBACK_NAMES:
        raise ConfigError(
            f"checkpoint head order {meta['trunk']['head_names']} != {list(FEEDBACK_NAMES)}"
        )
    trunk = nn.net_from_arrays(meta["trunk"], arrays, "trunk")
    slot = nn.DenseLayer(arrays["slot_w"], arrays["slot_b"], "relu")
    return FeedbackNet(slot, trunk, config)
