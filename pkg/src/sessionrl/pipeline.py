"""Simulation-and-training loops: a deterministic single-threaded mode and an
asynchronous generators-plus-trainer mode decoupled through the replay buffer.

Generators load the latest published policy snapshot at episode boundaries
(where the truncated action set is frozen), roll full episodes in the
simulator, and push n-step records; the trainer consumes prioritized batches
and publishes numbered snapshots. A lockstep flag runs the async machinery in
strict rounds so that, with one generator, it reproduces the sync mode's
transition stream exactly (used by the consistency tests).
"""

from __future__ import annotations

import csv
import multiprocessing as mp
import queue as queue_mod
import time
import traceback
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import agent as agent_mod
from . import nn, simulator
from .agent import ExplorationConfig, QNet, TargetPair, TrainParams
from .config import Config
from .errors import TrainingError
from .greedy import EncoderConfig, FeedbackNet
from .replay import NStepAccumulator, PrioritizedBuffer
from .simulator import EnvConfig, SimArtifacts
from .world import GroundTruthParams

EPISODE_STREAM = 1
TRAIN_STREAM = 2
INIT_STREAM = 3
EVAL_STREAM = 7
WORKER_STREAM_BASE = 1000

METRICS_COLUMNS = (
    "wall_time",
    "episodes",
    "train_steps",
    "mean_return_1k",
    "td_loss",
    "buffer_size",
    "snapshot_version",
)


# --- config -> component builders ----------------------------------------------


def encoder_config_from(cfg: Config) -> EncoderConfig:
    return EncoderConfig(
        dim=cfg.world.dim,
        lookback=cfg.world.dynamics.lookback,
        slot_width=cfg.encoder.slot_width,
        trunk_hidden=tuple(cfg.encoder.trunk_hidden),
    )


def env_config_from(cfg: Config) -> EnvConfig:
    return EnvConfig(
        threshold=cfg.env.threshold,
        lookback=cfg.world.dynamics.lookback,
        max_horizon=cfg.env.max_horizon,
        candidate_size=cfg.env.candidate_size,
        reward_weights=np.asarray(cfg.env.reward_weights, dtype=np.float64),
    )


def dynamics_from(cfg: Config) -> GroundTruthParams:
    d = cfg.world.dynamics
    return GroundTruthParams(
        watch_gain=d.watch_gain,
        watch_fatigue=d.watch_fatigue,
        watch_bias=d.watch_bias,
        long_gain=d.long_gain,
        long_bias=d.long_bias,
        save_gain=d.save_gain,
        save_fatigue=d.save_fatigue,
        save_bias=d.save_bias,
        hide_gain=d.hide_gain,
        hide_bias=d.hide_bias,
        exit_base=d.exit_base,
        exit_step=d.exit_step,
        exit_gain=d.exit_gain,
        exit_fatigue=d.exit_fatigue,
        lookback=d.lookback,
        log_candidates=d.log_candidates,
    )


def exploration_from(cfg: Config) -> ExplorationConfig:
    e = cfg.exploration
    return ExplorationConfig(e.epsilon, e.temperature, e.trunc_fraction, e.mode)


def train_params_from(cfg: Config) -> TrainParams:
    t = cfg.training
    return TrainParams(t.gamma, t.nstep, t.batch_size, t.learning_rate, t.target_sync_every)


def build_buffer(cfg: Config) -> PrioritizedBuffer:
    r = cfg.replay
    return PrioritizedBuffer(r.capacity, r.alpha, r.beta, r.priority_floor)


def initial_q_net(cfg: Config, donor: FeedbackNet | None) -> QNet:
    if cfg.training.warm_start:
        if donor is None:
            raise TrainingError("warm start requested but no donor net given")
        return agent_mod.warm_start(donor)
    rng = np.random.default_rng((cfg.seed, INIT_STREAM))
    return agent_mod.random_q_net(encoder_config_from(cfg), rng)


# --- episode rollout ------------------------------------------------------------


def rollout_episode(
    qnet: QNet,
    art: SimArtifacts,
    exploration: ExplorationConfig,
    reward_kind: str,
    nstep: int,
    gamma: float,
    rng: np.random.Generator,
    snapshot_version: int = -1,
):
    """One full episode; returns (n-step records, discounted return, length)."""
    state, candidates = simulator.reset(art.pool, art.users, art.catalog, art.env, rng)
    if exploration.mode == "trunc_softmax":
        truncated = agent_mod.truncate_candidates(
            qnet, state, candidates, art.catalog, exploration.trunc_fraction
        )
    else:
        truncated = candidates
    acc = NStepAccumulator(nstep, gamma, candidates, snapshot_version)
    records = []
    ep_return = 0.0
    discount = 1.0
    length = 0
    done = False
    while not done:
        action = agent_mod.select_action(
            qnet, state, candidates, truncated, exploration, rng, art.catalog
        )
        fb, reward, next_state, done = simulator.step(state, action, art.net, art.catalog, art.env)
        if reward_kind == "binary":
            reward = simulator.binary_reward_of(fb.bits, art.env.reward_weights)
        records.extend(
            acc.push(simulator.pack_state(state), action, reward, simulator.pack_state(next_state), done)
        )
        ep_return += discount * reward
        discount *= gamma
        length += 1
        state = next_state
    return records, ep_return, length


# --- metrics ---------------------------------------------------------------------


@dataclass
class MetricsRow:
    wall_time: float
    episodes: int
    train_steps: int
    mean_return_1k: float
    td_loss: float
    buffer_size: int
    snapshot_version: int


@dataclass
class RunResult:
    qnet: QNet
    metrics: list[MetricsRow]
    episode_returns: list[float]
    episode_lengths: list[int]
    staleness: Counter
    train_steps: int


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    f"{r.wall_time:.3f}",
                    r.episodes,
                    r.train_steps,
                    f"{r.mean_return_1k:.6f}",
                    f"{r.td_loss:.6f}",
                    r.buffer_size,
                    r.snapshot_version,
                ]
            )


def stabilization_check(history, window: int, tolerance: float) -> bool:
    """True when the last two window means differ by <= tolerance * running std."""
    if len(history) < 2 * window:
        return False
    arr = np.asarray(history, dtype=np.float64)
    last = arr[-window:].mean()
    prev = arr[-2 * window : -window].mean()
    return bool(abs(last - prev) <= tolerance * arr.std())


def _mean_tail(values, k: int = 1000) -> float:
    if not values:
        return 0.0
    return float(np.mean(values[-k:]))


# --- synchronous mode --------------------------------------------------------------


def run_sync(
    cfg: Config,
    art: SimArtifacts,
    donor: FeedbackNet | None = None,
    qnet_init: QNet | None = None,
    checkpoint_every: int | None = None,
    checkpoint_hook=None,
    progress: bool = False,
) -> RunResult:
    """Alternate collection and training rounds, single-threaded and seeded.

    checkpoint_hook(train_steps, qnet), when given, fires at step 0 and every
    checkpoint_every training steps; it must not touch the run's RNG streams.
    """
    qnet = qnet_init.copy() if qnet_init is not None else initial_q_net(cfg, donor)
    pair = TargetPair(qnet, qnet.copy())
    buffer = build_buffer(cfg)
    opt = nn.AdamState.init_like(qnet.params(), cfg.training.learning_rate)
    params = train_params_from(cfg)
    exploration = exploration_from(cfg)
    run = cfg.run
    returns: list[float] = []
    lengths: list[int] = []
    metrics: list[MetricsRow] = []
    episodes = 0
    steps_done = 0
    version = 0
    t0 = time.monotonic()
    if checkpoint_hook is not None:
        checkpoint_hook(0, pair.online)
    while steps_done < run.train_step_budget:
        for _ in range(run.collect_per_round):
            rng = np.random.default_rng((cfg.seed, EPISODE_STREAM, episodes))
            records, ep_return, length = rollout_episode(
                pair.online,
                art,
                exploration,
                cfg.training.reward_kind,
                params.nstep,
                params.gamma,
                rng,
                snapshot_version=version,
            )
            for rec in records:
                buffer.push(rec)
            returns.append(ep_return)
            lengths.append(length)
            episodes += 1
        round_losses = []
        for _ in range(run.train_per_round):
            if steps_done >= run.train_step_budget:
                break
            if len(buffer) < max(params.batch_size, run.min_buffer):
                break
            rng_t = np.random.default_rng((cfg.seed, TRAIN_STREAM, steps_done))
            loss, opt = agent_mod.train_step(pair, buffer, opt, params, art.catalog, art.users, rng_t)
            steps_done += 1
            round_losses.append(loss)
            if steps_done % run.snapshot_every == 0:
                version += 1
            if (
                checkpoint_hook is not None
                and checkpoint_every
                and steps_done % checkpoint_every == 0
            ):
                checkpoint_hook(steps_done, pair.online)
        metrics.append(
            MetricsRow(
                time.monotonic() - t0,
                episodes,
                steps_done,
                _mean_tail(returns),
                float(np.mean(round_losses)) if round_losses else float("nan"),
                len(buffer),
                version,
            )
        )
        if progress:
            r = metrics[-1]
            print(
                f"[sync] episodes={r.episodes} steps={r.train_steps} "
                f"return_1k={r.mean_return_1k:.4f} loss={r.td_loss:.5f}",
                flush=True,
            )
        if stabilization_check(returns, run.stabilization_window, run.stabilization_tolerance):
            break
    if checkpoint_hook is not None and checkpoint_every and steps_done % checkpoint_every != 0:
        checkpoint_hook(steps_done, pair.online)
    return RunResult(pair.online, metrics, returns, lengths, Counter(), steps_done)


# --- asynchronous mode ---------------------------------------------------------------


def _build_worker_qnet(cfg: Config) -> QNet:
    rng = np.random.default_rng((cfg.seed, INIT_STREAM))
    return agent_mod.random_q_net(encoder_config_from(cfg), rng)


def _generator_main(
    worker_id: int,
    cfg: Config,
    art: SimArtifacts,
    orders_q,
    results_q,
    snapshot_q,
    stop_event,
    lockstep: bool,
):
    """Generator process: roll whole episodes under the latest snapshot."""
    try:
        qnet = _build_worker_qnet(cfg)
        exploration = exploration_from(cfg)
        params = train_params_from(cfg)
        if lockstep:
            while True:
                msg = orders_q.get()
                if msg is None:
                    break
                net_params, version, ep_indices = msg
                qnet.set_params(net_params)
                for idx in ep_indices:
                    rng = np.random.default_rng((cfg.seed, EPISODE_STREAM, idx))
                    records, ep_return, length = rollout_episode(
                        qnet, art, exploration, cfg.training.reward_kind,
                        params.nstep, params.gamma, rng, snapshot_version=version,
                    )
                    results_q.put(("episode", worker_id, idx, version, records, ep_return, length))
        else:
            msg = orders_q.get()
            net_params, version = msg
            qnet.set_params(net_params)
            counter = 0
            while not stop_event.is_set():
                while True:  # keep only the newest published snapshot
                    try:
                        net_params, version = snapshot_q.get_nowait()
                    except queue_mod.Empty:
                        break
                qnet.set_params(net_params)
                rng = np.random.default_rng(
                    (cfg.seed, WORKER_STREAM_BASE + worker_id, counter)
                )
                records, ep_return, length = rollout_episode(
                    qnet, art, exploration, cfg.training.reward_kind,
                    params.nstep, params.gamma, rng, snapshot_version=version,
                )
                results_q.put(("episode", worker_id, counter, version, records, ep_return, length))
                counter += 1
    except Exception:
        results_q.put(("error", worker_id, traceback.format_exc()))
        raise


class _AsyncState:
    """Trainer-side bookkeeping shared by the lockstep and free-running paths."""

    def __init__(self, cfg: Config, art: SimArtifacts, donor, qnet_init):
        qnet = qnet_init.copy() if qnet_init is not None else initial_q_net(cfg, donor)
        self.pair = TargetPair(qnet, qnet.copy())
        self.buffer = build_buffer(cfg)
        self.opt = nn.AdamState.init_like(qnet.params(), cfg.training.learning_rate)
        self.params = train_params_from(cfg)
        self.returns: list[float] = []
        self.lengths: list[int] = []
        self.metrics: list[MetricsRow] = []
        self.staleness: Counter = Counter()
        self.episodes = 0
        self.steps_done = 0
        self.version = 0

    def snapshot_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.pair.online.params()]

    def ingest(self, msg, current_version: int) -> None:
        _, _, _, version, records, ep_return, length = msg
        for rec in records:
            self.buffer.push(rec)
        self.staleness[current_version - version] += 1
        self.returns.append(ep_return)
        self.lengths.append(length)
        self.episodes += 1


def run_async(
    cfg: Config,
    art: SimArtifacts,
    donor: FeedbackNet | None = None,
    qnet_init: QNet | None = None,
    lockstep: bool = False,
    collect_only_seconds: float | None = None,
    progress: bool = False,
) -> RunResult:
    """Generators in separate processes feeding the replay buffer; one trainer.

    lockstep=True runs strict rounds (collect, then train, then publish) so a
    single generator reproduces run_sync exactly; the default free-running mode
    accepts snapshot staleness and records its histogram.
    """
    ctx = mp.get_context("fork")
    run = cfg.run
    n_gen = run.n_generators
    results_q = ctx.Queue()
    orders_qs = [ctx.Queue() for _ in range(n_gen)]
    snapshot_qs = [ctx.Queue() for _ in range(n_gen)]
    stop_event = ctx.Event()
    workers = [
        ctx.Process(
            target=_generator_main,
            args=(i, cfg, art, orders_qs[i], results_q, snapshot_qs[i], stop_event, lockstep),
            daemon=True,
        )
        for i in range(n_gen)
    ]
    for w in workers:
        w.start()
    state = _AsyncState(cfg, art, donor, qnet_init)
    t0 = time.monotonic()

    def fail(reason: str):
        stop_event.set()
        for w in workers:
            w.terminate()
        raise TrainingError(reason)

    def handle(msg):
        if msg[0] == "error":
            fail(f"generator {msg[1]} failed:\n{msg[2]}")
        state.ingest(msg, state.version)

    try:
        if lockstep:
            while state.steps_done < run.train_step_budget:
                base = state.episodes
                chunks = np.array_split(np.arange(base, base + run.collect_per_round), n_gen)
                params_out = state.snapshot_params()
                for q, chunk in zip(orders_qs, chunks):
                    q.put((params_out, state.version, [int(i) for i in chunk]))
                pending = {}
                while len(pending) < run.collect_per_round:
                    msg = results_q.get()
                    if msg[0] == "error":
                        fail(f"generator {msg[1]} failed:\n{msg[2]}")
                    pending[msg[2]] = msg
                for idx in sorted(pending):
                    handle(pending[idx])
                round_losses = []
                for _ in range(run.train_per_round):
                    if state.steps_done >= run.train_step_budget:
                        break
                    if len(state.buffer) < max(state.params.batch_size, run.min_buffer):
                        break
                    rng_t = np.random.default_rng((cfg.seed, TRAIN_STREAM, state.steps_done))
                    loss, state.opt = agent_mod.train_step(
                        state.pair, state.buffer, state.opt, state.params,
                        art.catalog, art.users, rng_t,
                    )
                    state.steps_done += 1
                    round_losses.append(loss)
                    if state.steps_done % run.snapshot_every == 0:
                        state.version += 1
                state.metrics.append(
                    MetricsRow(
                        time.monotonic() - t0,
                        state.episodes,
                        state.steps_done,
                        _mean_tail(state.returns),
                        float(np.mean(round_losses)) if round_losses else float("nan"),
                        len(state.buffer),
                        state.version,
                    )
                )
                if stabilization_check(
                    state.returns, run.stabilization_window, run.stabilization_tolerance
                ):
                    break
        else:
            params_out = state.snapshot_params()
            for q in orders_qs:
                q.put((params_out, state.version))
            last_metrics_steps = 0
            last_metrics_time = t0
            while True:
                now = time.monotonic()
                if collect_only_seconds is not None:
                    if now - t0 >= collect_only_seconds:
                        break
                elif state.steps_done >= run.train_step_budget:
                    break
                drained = 0
                while drained < 512:
                    try:
                        msg = results_q.get_nowait()
                    except queue_mod.Empty:
                        break
                    handle(msg)
                    drained += 1
                trained = False
                if (
                    collect_only_seconds is None
                    and len(state.buffer) >= max(state.params.batch_size, run.min_buffer)
                ):
                    rng_t = np.random.default_rng((cfg.seed, TRAIN_STREAM, state.steps_done))
                    loss, state.opt = agent_mod.train_step(
                        state.pair, state.buffer, state.opt, state.params,
                        art.catalog, art.users, rng_t,
                    )
                    state.steps_done += 1
                    trained = True
                    if state.steps_done % run.snapshot_every == 0:
                        state.version += 1
                        params_out = state.snapshot_params()
                        for q in snapshot_qs:
                            q.put((params_out, state.version))
                    if stabilization_check(
                        state.returns, run.stabilization_window, run.stabilization_tolerance
                    ):
                        break
                else:
                    loss = float("nan")
                if not trained and drained == 0:
                    time.sleep(0.002)
                if (
                    state.steps_done - last_metrics_steps >= run.train_per_round
                    or now - last_metrics_time >= 1.0
                ):
                    state.metrics.append(
                        MetricsRow(
                            now - t0,
                            state.episodes,
                            state.steps_done,
                            _mean_tail(state.returns),
                            loss,
                            len(state.buffer),
                            state.version,
                        )
                    )
                    if progress:
                        r = state.metrics[-1]
                        print(
                            f"[async] episodes={r.episodes} steps={r.train_steps} "
                            f"return_1k={r.mean_return_1k:.4f}",
                            flush=True,
                        )
                    last_metrics_steps = state.steps_done
                    last_metrics_time = now
    finally:
        stop_event.set()
        for q in orders_qs:
            q.put(None)
        deadline = time.monotonic() + 30.0
        while any(w.is_alive() for w in workers) and time.monotonic() < deadline:
            try:
                msg = results_q.get(timeout=0.05)
            except queue_mod.Empty:
                continue
            if msg[0] == "episode":
                state.ingest(msg, state.version)
        for w in workers:
            w.join(timeout=5.0)
            if w.is_alive():
                w.terminate()
    failed = [w for w in workers if w.exitcode not in (0, None, -15)]
    if failed:
        raise TrainingError(f"{len(failed)} generator(s) exited abnormally")
    state.metrics.append(
        MetricsRow(
            time.monotonic() - t0,
            state.episodes,
            state.steps_done,
            _mean_tail(state.returns),
            float("nan"),
            len(state.buffer),
            state.version,
        )
    )
    return RunResult(
        state.pair.online,
        state.metrics,
        state.returns,
        state.lengths,
        state.staleness,
        state.steps_done,
    )
