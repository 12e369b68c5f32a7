import os

# must run before numpy is imported: small-matrix BLAS threading slows the
# suite down and oversubscribes the cores the pipeline workers need
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from sessionrl import greedy, pipeline, simulator, world
from sessionrl.config import Config


@pytest.fixture(scope="session")
def default_config() -> Config:
    return Config()


@pytest.fixture(scope="session")
def default_world(default_config):
    """The default desk-scale world (10k items, 500 users) shared by the
    acceptance tests; built once per session."""
    cfg = default_config
    w = cfg.world
    catalog = world.gen_catalog(w.n_items, w.dim, w.n_clusters, cfg.seed, w.item_noise)
    users = world.gen_users(w.n_users, catalog, cfg.seed, w.user_noise, w.secondary_weight)
    dynamics = pipeline.dynamics_from(cfg)
    dataset = world.build_dataset(
        catalog, users, dynamics, w.sessions_per_user, cfg.seed, w.log_max_len
    )
    return catalog, users, dynamics, dataset


@pytest.fixture(scope="session")
def default_greedy(default_config, default_world):
    """Feedback model trained on the default world, with its held-out split."""
    cfg = default_config
    catalog, users, _, dataset = default_world
    enc = pipeline.encoder_config_from(cfg)
    train_idx, held_idx = greedy.split_dataset(
        len(dataset), cfg.greedy.holdout_fraction, cfg.seed
    )
    net, curve = greedy.train_feedback_net(
        dataset,
        catalog,
        users,
        enc,
        cfg.greedy.epochs,
        cfg.seed,
        cfg.greedy.batch_size,
        cfg.greedy.learning_rate,
        row_indices=train_idx,
    )
    return net, curve, train_idx, held_idx


@pytest.fixture(scope="session")
def default_artifacts(default_config, default_world, default_greedy):
    catalog, users, _, dataset = default_world
    net, _, _, _ = default_greedy
    return simulator.SimArtifacts(
        catalog, users, dataset, net, pipeline.env_config_from(default_config)
    )
