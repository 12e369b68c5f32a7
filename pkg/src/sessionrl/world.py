"""Synthetic ground-truth universe: users, items, a latent feedback process.

Generates the logged sessions the one-step feedback model is trained on.
The feedback alphabet and its fixed head order live here; every other module
imports them from this one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from .errors import ConfigError

FEEDBACK_NAMES = ("watch", "long_watch", "save", "hide", "exit")
N_FEEDBACK = len(FEEDBACK_NAMES)
WATCH, LONG_WATCH, SAVE, HIDE, EXIT = range(N_FEEDBACK)


class Catalog:
    """Recommendable items: dense ids [0, N) with unit-norm embeddings."""

    def __init__(self, embeddings: np.ndarray, cluster_ids: np.ndarray, centers: np.ndarray, seed: int):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.cluster_ids = np.asarray(cluster_ids, dtype=np.int32)
        self.centers = np.asarray(centers, dtype=np.float64)
        self.seed = int(seed)

    @property
    def n_items(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


class UserPool:
    """Users with unit-norm embeddings, generated near cluster centers."""

    def __init__(self, embeddings: np.ndarray, seed: int):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.seed = int(seed)

    @property
    def n_users(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class GroundTruthParams:
    """Coefficients of the latent feedback process.

    Per-head probabilities use affinity = u.a and fatigue = mean cosine of the
    action to the last L shown items (0 for an empty history):

        watch      = sigmoid(watch_gain*aff - watch_fatigue*fat + watch_bias)
        long_watch = watch * sigmoid(long_gain*aff + long_bias)
        save       = sigmoid(save_gain*aff - save_fatigue*fat + save_bias)
        hide       = sigmoid(-hide_gain*aff + hide_bias)
        exit       = sigmoid(exit_base + exit_step*t - exit_gain*aff + exit_fatigue*fat)
    """

    watch_gain: float = 2.2
    watch_fatigue: float = 1.2
    watch_bias: float = 0.4
    long_gain: float = 2.8
    long_bias: float = -1.0
    save_gain: float = 3.2
    save_fatigue: float = 2.0
    save_bias: float = -1.1
    hide_gain: float = 2.5
    hide_bias: float = -1.2
    exit_base: float = -3.0
    exit_step: float = 0.01
    exit_gain: float = 0.5
    exit_fatigue: float = 9.0
    lookback: int = 8
    log_candidates: int = 50

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v):
                raise ConfigError(f"non-finite ground-truth parameter {f.name}")
        for name in ("watch_fatigue", "save_fatigue", "exit_fatigue"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.lookback < 1:
            raise ConfigError("lookback must be >= 1")


@dataclass
class LoggedSession:
    user_id: int
    item_ids: list[int]
    feedback: list[np.ndarray]  # one uint8 vector over FEEDBACK_NAMES per step

    def __len__(self) -> int:
        return len(self.item_ids)


def _sigmoid(x: float) -> float:
    return float(nn.sigmoid(np.asarray([x]))[0])


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / norms


def gen_catalog(n_items: int, dim: int, n_clusters: int, seed: int, noise: float = 0.15) -> Catalog:
    """Clustered items on the unit sphere: center + Gaussian noise, renormalized."""
    if n_items < 1 or dim < 2 or n_clusters < 1:
        raise ConfigError("need n_items >= 1, dim >= 2, n_clusters >= 1")
    rng = np.random.default_rng((seed, 101))
    centers = _unit_rows(rng.standard_normal((n_clusters, dim)))
    cluster_ids = rng.integers(0, n_clusters, size=n_items)
    emb = centers[cluster_ids] + noise * rng.standard_normal((n_items, dim))
    return Catalog(_unit_rows(emb), cluster_ids, centers, seed)


def gen_users(
    n_users: int,
    catalog: Catalog,
    seed: int,
    noise: float = 0.12,
    secondary_weight: float = 0.55,
) -> UserPool:
    """Users near a primary cluster center with a weighted secondary interest."""
    if n_users < 1:
        raise ConfigError("need n_users >= 1")
    rng = np.random.default_rng((seed, 202))
    n_clusters, dim = catalog.centers.shape
    primary = rng.integers(0, n_clusters, size=n_users)
    secondary = (primary + 1 + rng.integers(0, max(1, n_clusters - 1), size=n_users)) % n_clusters
    emb = (
        catalog.centers[primary]
        + secondary_weight * catalog.centers[secondary]
        + noise * rng.standard_normal((n_users, dim))
    )
    return UserPool(_unit_rows(emb), seed)


def ground_truth_probs(
    user: np.ndarray,
    history_items: np.ndarray,
    action: np.ndarray,
    step_index: int,
    params: GroundTruthParams,
) -> np.ndarray:
    """Probability vector over the feedback alphabet for one (state, action)."""
    if len(history_items) > params.lookback:
        raise ConfigError("history longer than lookback window")
    affinity = float(user @ action)
    if len(history_items) == 0:
        fatigue = 0.0
    else:
        fatigue = float(np.mean(np.asarray(history_items) @ action))
    p = params
    watch = _sigmoid(p.watch_gain * affinity - p.watch_fatigue * fatigue + p.watch_bias)
    long_watch = watch * _sigmoid(p.long_gain * affinity + p.long_bias)
    save = _sigmoid(p.save_gain * affinity - p.save_fatigue * fatigue + p.save_bias)
    hide = _sigmoid(-p.hide_gain * affinity + p.hide_bias)
    exit_ = _sigmoid(
        p.exit_base + p.exit_step * step_index - p.exit_gain * affinity + p.exit_fatigue * fatigue
    )
    return np.array([watch, long_watch, save, hide, exit_])


def sample_session(
    user_id: int,
    user: np.ndarray,
    catalog: Catalog,
    params: GroundTruthParams,
    max_len: int,
    seed,
) -> LoggedSession:
    """Roll one logged session under the uniform-over-candidates logging policy.

    Feedback bits are sampled independently per head, long_watch is forced to 0
    when watch is 0, and exit is forced to 1 at max_len.
    """
    if max_len < 1:
        raise ConfigError("max_len must be >= 1")
    rng = np.random.default_rng(seed)
    n_cand = min(params.log_candidates, catalog.n_items)
    item_ids: list[int] = []
    feedback: list[np.ndarray] = []
    window: list[np.ndarray] = []
    for t in range(max_len):
        candidates = rng.choice(catalog.n_items, size=n_cand, replace=False)
        action_id = int(candidates[rng.integers(0, n_cand)])
        action = catalog.embeddings[action_id]
        probs = ground_truth_probs(user, np.asarray(window), action, t, params)
        bits = (rng.random(N_FEEDBACK) < probs).astype(np.uint8)
        if bits[WATCH] == 0:
            bits[LONG_WATCH] = 0
        if t == max_len - 1:
            bits[EXIT] = 1
        item_ids.append(action_id)
        feedback.append(bits)
        window.append(action)
        if len(window) > params.lookback:
            window.pop(0)
        if bits[EXIT] == 1:
            break
    return LoggedSession(user_id, item_ids, feedback)


class Dataset:
    """Per-step supervised rows unrolled from logged sessions.

    Columnar storage; row i's state is (user_ids[i], the first window_len[i]
    entries of window_ids[i]/window_bits[i], step t[i]). The same states double
    as the initial-state pool for simulated episodes.
    """

    def __init__(
        self,
        user_ids: np.ndarray,
        window_ids: np.ndarray,
        window_bits: np.ndarray,
        window_len: np.ndarray,
        t: np.ndarray,
        action_ids: np.ndarray,
        labels: np.ndarray,
        lookback: int,
    ):
        self.user_ids = user_ids
        self.window_ids = window_ids
        self.window_bits = window_bits
        self.window_len = window_len
        self.t = t
        self.action_ids = action_ids
        self.labels = labels
        self.lookback = lookback

    def __len__(self) -> int:
        return len(self.user_ids)

    def subset(self, row_indices: np.ndarray) -> "Dataset":
        idx = np.asarray(row_indices)
        return Dataset(
            self.user_ids[idx],
            self.window_ids[idx],
            self.window_bits[idx],
            self.window_len[idx],
            self.t[idx],
            self.action_ids[idx],
            self.labels[idx],
            self.lookback,
        )

    def restrict_users(self, max_user_id: int) -> "Dataset":
        """Rows belonging to users with id < max_user_id (the reduced ablation pool)."""
        return self.subset(np.flatnonzero(self.user_ids < max_user_id))


def build_dataset(
    catalog: Catalog,
    users: UserPool,
    params: GroundTruthParams,
    n_sessions_per_user: int,
    seed: int,
    max_len: int = 60,
) -> Dataset:
    """Sample sessions for every user and unroll them into training rows."""
    if n_sessions_per_user < 1:
        raise ConfigError("n_sessions_per_user must be >= 1")
    L = params.lookback
    user_ids, window_len, ts, action_ids = [], [], [], []
    window_ids_rows, window_bits_rows, labels = [], [], []
    for user_id in range(users.n_users):
        for s in range(n_sessions_per_user):
            session = sample_session(
                user_id,
                users.embeddings[user_id],
                catalog,
                params,
                max_len,
                (seed, user_id, s),
            )
            w_ids = np.full(L, -1, dtype=np.int32)
            w_bits = np.zeros((L, N_FEEDBACK), dtype=np.uint8)
            for t, (item_id, bits) in enumerate(zip(session.item_ids, session.feedback)):
                k = min(t, L)
                user_ids.append(user_id)
                window_ids_rows.append(w_ids.copy())
                window_bits_rows.append(w_bits.copy())
                window_len.append(k)
                ts.append(t)
                action_ids.append(item_id)
                labels.append(bits)
                if k == L:
                    w_ids[:-1] = w_ids[1:]
                    w_bits[:-1] = w_bits[1:]
                    w_ids[-1] = item_id
                    w_bits[-1] = bits
                else:
                    w_ids[k] = item_id
                    w_bits[k] = bits
    return Dataset(
        np.asarray(user_ids, dtype=np.int32),
        np.stack(window_ids_rows),
        np.stack(window_bits_rows),
        np.asarray(window_len, dtype=np.int32),
        np.asarray(ts, dtype=np.int32),
        np.asarray(action_ids, dtype=np.int32),
        np.stack(labels),
        L,
    )


def cumulative_save_probability(
    user: np.ndarray, item_ids: list[int], catalog: Catalog, params: GroundTruthParams
) -> float:
    """Sum of per-step save probabilities along a forced item sequence."""
    window: list[np.ndarray] = []
    total = 0.0
    for t, item_id in enumerate(item_ids):
        action = catalog.embeddings[item_id]
        probs = ground_truth_probs(user, np.asarray(window), action, t, params)
        total += float(probs[SAVE])
        window.append(action)
        if len(window) > params.lookback:
            window.pop(0)
    return total


# --- artifact files ---------------------------------------------------------


def save_catalog(path, catalog: Catalog) -> None:
    nn.save_checkpoint(
        path,
        {"kind": "catalog", "dim": catalog.dim, "n_items": catalog.n_items, "seed": catalog.seed},
        {"embeddings": catalog.embeddings, "cluster_ids": catalog.cluster_ids, "centers": catalog.centers},
    )


def load_catalog(path) -> Catalog:
    meta, arrays = nn.load_checkpoint(path)
    if meta.get("kind") != "catalog":
        raise ConfigError(f"{path} is not a catalog checkpoint")
    return Catalog(arrays["embeddings"], arrays["cluster_ids"], arrays["centers"], meta["seed"])


def save_users(path, users: UserPool) -> None:
    nn.save_checkpoint(
        path,
        {"kind": "users", "dim": users.dim, "n_users": users.n_users, "seed": users.seed},
        {"embeddings": users.embeddings},
    )


def load_users(path) -> UserPool:
    meta, arrays = nn.load_checkpoint(path)
    if meta.get("kind") != "users":
        raise ConfigError(f"{path} is not a user-pool checkpoint")
    return UserPool(arrays["embeddings"], meta["seed"])


def save_dataset_jsonl(path, dataset: Dataset) -> None:
    """One JSON object per training row."""
    with open(path, "w") as fh:
        for i in range(len(dataset)):
            k = int(dataset.window_len[i])
            row = {
                "user_id": int(dataset.user_ids[i]),
                "t": int(dataset.t[i]),
                "window": [
                    [int(dataset.window_ids[i, j])] + dataset.window_bits[i, j].tolist()
                    for j in range(k)
                ],
                "action_id": int(dataset.action_ids[i]),
                "labels": dataset.labels[i].tolist(),
            }
            fh.write(json.dumps(row) + "\n")


def load_dataset_jsonl(path, lookback: int) -> Dataset:
    user_ids, window_len, ts, action_ids = [], [], [], []
    window_ids_rows, window_bits_rows, labels = [], [], []
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            k = len(row["window"])
            if k > lookback:
                raise ConfigError("dataset row window exceeds lookback")
            w_ids = np.full(lookback, -1, dtype=np.int32)
            w_bits = np.zeros((lookback, N_FEEDBACK), dtype=np.uint8)
            for j, entry in enumerate(row["window"]):
                w_ids[j] = entry[0]
                w_bits[j] = entry[1:]
            user_ids.append(row["user_id"])
            window_ids_rows.append(w_ids)
            window_bits_rows.append(w_bits)
            window_len.append(k)
            ts.append(row["t"])
            action_ids.append(row["action_id"])
            labels.append(np.asarray(row["labels"], dtype=np.uint8))
    return Dataset(
        np.asarray(user_ids, dtype=np.int32),
        np.stack(window_ids_rows),
        np.stack(window_bits_rows),
        np.asarray(window_len, dtype=np.int32),
        np.asarray(ts, dtype=np.int32),
        np.asarray(action_ids, dtype=np.int32),
        np.stack(labels),
        lookback,
    )
