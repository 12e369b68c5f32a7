"""Shared test utilities: finite-difference oracles and tiny world builders."""

from __future__ import annotations

import numpy as np

from sessionrl import world
from sessionrl.config import Config
from sessionrl.greedy import EncoderConfig
from sessionrl.simulator import EnvConfig, SimArtifacts


def finite_diff_grads(loss_fn, params: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of loss_fn(params) w.r.t. every entry."""
    grads = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = loss_fn(params)
            flat[i] = orig - h
            lo = loss_fn(params)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def tiny_world(seed: int = 0, n_items: int = 60, n_users: int = 6, dim: int = 6):
    catalog = world.gen_catalog(n_items, dim, 3, seed, noise=0.2)
    users = world.gen_users(n_users, catalog, seed, noise=0.3, secondary_weight=0.5)
    params = world.GroundTruthParams(lookback=4, log_candidates=10)
    dataset = world.build_dataset(catalog, users, params, 3, seed, max_len=12)
    return catalog, users, params, dataset


def tiny_encoder(dim: int = 6, lookback: int = 4) -> EncoderConfig:
    return EncoderConfig(dim=dim, lookback=lookback, slot_width=5, trunk_hidden=(8,))


def tiny_artifacts(net, catalog, users, dataset, candidate_size: int = 12, max_horizon: int = 10) -> SimArtifacts:
    env = EnvConfig(
        lookback=dataset.lookback,
        candidate_size=candidate_size,
        max_horizon=max_horizon,
    )
    return SimArtifacts(catalog, users, dataset, net, env)


def micro_config(seed: int = 0) -> Config:
    """Config scaled way down for fast pipeline tests."""
    cfg = Config()
    cfg.seed = seed
    cfg.world.n_items = 60
    cfg.world.dim = 6
    cfg.world.n_clusters = 3
    cfg.world.n_users = 6
    cfg.world.sessions_per_user = 3
    cfg.world.log_max_len = 12
    cfg.world.dynamics.lookback = 4
    cfg.world.dynamics.log_candidates = 10
    cfg.encoder.slot_width = 5
    cfg.encoder.trunk_hidden = [8]
    cfg.env.candidate_size = 12
    cfg.env.max_horizon = 10
    cfg.replay.capacity = 2000
    cfg.greedy.epochs = 2
    cfg.training.batch_size = 16
    cfg.training.target_sync_every = 50
    cfg.run.collect_per_round = 8
    cfg.run.train_per_round = 16
    cfg.run.snapshot_every = 16
    cfg.run.n_generators = 1
    cfg.run.train_step_budget = 64
    cfg.run.min_buffer = 32
    cfg.eval.n_episodes = 20
    return cfg
