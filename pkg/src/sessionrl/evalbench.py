"""Policy evaluation and ablation harness.

Runs greedy-baseline and value policies over matched simulated episodes
(identical per-episode seeds, hence identical initial states and candidate
sets), counts feedback events and session depth, and drives the warm-start /
reward-function / exploration ablations with aligned learning-curve export.
"""

from __future__ import annotations

import copy
import csv
import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np

from . import agent as agent_mod
from . import pipeline, simulator
from .agent import QNet
from .config import Config
from .errors import ConfigError, UsageError
from .greedy import FeedbackNet, heads_for_actions
from .simulator import SimArtifacts, state_prefix
from .world import HIDE, LONG_WATCH, SAVE, WATCH

EVAL_STREAM = pipeline.EVAL_STREAM
ABLATION_EVAL_SEED = 991  # shared by every variant so checkpoints stay paired

DEPTH_BUCKETS = (1, 2, 3, 10)


class BaselinePolicy:
    """One-step greedy: argmax of the save head over the candidate set."""

    def __init__(self, net: FeedbackNet):
        self.net = net

    def select(self, state, candidate_ids, catalog) -> int:
        prefix = state_prefix(self.net, state)
        heads = heads_for_actions(self.net, prefix, catalog.embeddings[candidate_ids])
        return int(candidate_ids[int(np.argmax(heads[:, SAVE]))])


class ValuePolicy:
    """RL policy: argmax of Q over the candidate set."""

    def __init__(self, qnet: QNet):
        self.qnet = qnet

    def select(self, state, candidate_ids, catalog) -> int:
        return agent_mod.greedy_action(self.qnet, state, candidate_ids, catalog)


@dataclass
class MetricCounts:
    watch: int = 0
    long_watch: int = 0
    save: int = 0
    hide: int = 0
    depth_hist: dict[int, int] = field(default_factory=dict)
    return_sum: float = 0.0
    n_episodes: int = 0

    @property
    def mean_return(self) -> float:
        return self.return_sum / self.n_episodes if self.n_episodes else 0.0

    def depth_at_least(self, k: int) -> int:
        return sum(c for depth, c in self.depth_hist.items() if depth >= k)

    def merge(self, other: "MetricCounts") -> None:
        self.watch += other.watch
        self.long_watch += other.long_watch
        self.save += other.save
        self.hide += other.hide
        for depth, c in other.depth_hist.items():
            self.depth_hist[depth] = self.depth_hist.get(depth, 0) + c
        self.return_sum += other.return_sum
        self.n_episodes += other.n_episodes


def _evaluate_range(policy, art: SimArtifacts, episode_indices, seed: int, gamma: float) -> MetricCounts:
    counts = MetricCounts()
    for idx in episode_indices:
        rng = np.random.default_rng((seed, EVAL_STREAM, int(idx)))
        state, candidates = simulator.reset(art.pool, art.users, art.catalog, art.env, rng)
        done = False
        discount = 1.0
        ep_return = 0.0
        depth = 0
        while not done:
            action = policy.select(state, candidates, art.catalog)
            fb, reward, state, done = simulator.step(state, action, art.net, art.catalog, art.env)
            counts.watch += int(fb.bits[WATCH])
            counts.long_watch += int(fb.bits[LONG_WATCH])
            counts.save += int(fb.bits[SAVE])
            counts.hide += int(fb.bits[HIDE])
            ep_return += discount * reward
            discount *= gamma
            depth += 1
        counts.depth_hist[depth] = counts.depth_hist.get(depth, 0) + 1
        counts.return_sum += ep_return
        counts.n_episodes += 1
    return counts


def evaluate_policy(
    policy,
    art: SimArtifacts,
    n_episodes: int,
    seed: int,
    gamma: float,
    n_jobs: int = 1,
) -> MetricCounts:
    """Exploitation-only rollouts with per-episode derived seeds.

    Results are independent of n_jobs: episode i always uses the same RNG.
    """
    if n_episodes < 1:
        raise UsageError("n_episodes must be >= 1")
    indices = np.arange(n_episodes)
    if n_jobs <= 1:
        return _evaluate_range(policy, art, indices, seed, gamma)
    chunks = np.array_split(indices, n_jobs)
    ctx = mp.get_context("fork")
    with ctx.Pool(n_jobs) as pool_proc:
        parts = pool_proc.starmap(
            _evaluate_range, [(policy, art, chunk, seed, gamma) for chunk in chunks]
        )
    total = MetricCounts()
    for part in parts:
        total.merge(part)
    return total


@dataclass
class ComparisonResult:
    rl: MetricCounts
    greedy: MetricCounts
    deltas: dict[str, float | None]


def _delta(rl_count: float, greedy_count: float) -> float | None:
    if greedy_count == 0:
        return None
    return (rl_count - greedy_count) / greedy_count


def compare_policies(
    rl_policy,
    greedy_policy,
    art: SimArtifacts,
    n_episodes: int,
    seed: int,
    gamma: float,
    n_jobs: int = 1,
) -> ComparisonResult:
    """Paired evaluation; both policies see identical (initial state, candidates)."""
    rl = evaluate_policy(rl_policy, art, n_episodes, seed, gamma, n_jobs)
    greedy = evaluate_policy(greedy_policy, art, n_episodes, seed, gamma, n_jobs)
    deltas: dict[str, float | None] = {
        "watch": _delta(rl.watch, greedy.watch),
        "long_watch": _delta(rl.long_watch, greedy.long_watch),
        "save": _delta(rl.save, greedy.save),
        "hide": _delta(rl.hide, greedy.hide),
        "mean_return": _delta(rl.mean_return, greedy.mean_return),
    }
    for k in DEPTH_BUCKETS:
        deltas[f"depth_ge_{k}"] = _delta(rl.depth_at_least(k), greedy.depth_at_least(k))
    return ComparisonResult(rl, greedy, deltas)


def format_comparison(result: ComparisonResult) -> str:
    lines = [
        f"{'metric':<14}{'rl':>12}{'greedy':>12}{'delta':>10}",
        "-" * 48,
    ]
    rows = [
        ("watch", result.rl.watch, result.greedy.watch),
        ("long_watch", result.rl.long_watch, result.greedy.long_watch),
        ("save", result.rl.save, result.greedy.save),
        ("hide", result.rl.hide, result.greedy.hide),
        ("mean_return", f"{result.rl.mean_return:.4f}", f"{result.greedy.mean_return:.4f}"),
    ] + [
        (f"depth_ge_{k}", result.rl.depth_at_least(k), result.greedy.depth_at_least(k))
        for k in DEPTH_BUCKETS
    ]
    for name, arl, agr in rows:
        delta = result.deltas[name]
        delta_s = "undefined" if delta is None else f"{100 * delta:+.2f}%"
        lines.append(f"{name:<14}{arl!s:>12}{agr!s:>12}{delta_s:>10}")
    return "\n".join(lines)


def comparison_to_json(result: ComparisonResult) -> dict:
    return {
        "rl": {
            "watch": result.rl.watch,
            "long_watch": result.rl.long_watch,
            "save": result.rl.save,
            "hide": result.rl.hide,
            "mean_return": result.rl.mean_return,
            "n_episodes": result.rl.n_episodes,
            "depth_hist": {str(k): v for k, v in sorted(result.rl.depth_hist.items())},
        },
        "greedy": {
            "watch": result.greedy.watch,
            "long_watch": result.greedy.long_watch,
            "save": result.greedy.save,
            "hide": result.greedy.hide,
            "mean_return": result.greedy.mean_return,
            "n_episodes": result.greedy.n_episodes,
            "depth_hist": {str(k): v for k, v in sorted(result.greedy.depth_hist.items())},
        },
        "deltas": result.deltas,
    }


# --- ablations ------------------------------------------------------------------

ABLATION_AXES = ("warm_start", "reward", "exploration")


@dataclass
class AblationSpec:
    axis: str
    step_budget: int
    eval_every: int
    eval_episodes: int
    seeds: list[int]

    def __post_init__(self):
        if self.axis not in ABLATION_AXES:
            raise ConfigError(f"axis must be one of {ABLATION_AXES}")
        if self.step_budget < 1 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigError("ablation budgets must be >= 1")
        if not self.seeds:
            raise ConfigError("need at least one seed")


def ablation_variants(axis: str) -> list[str]:
    if axis == "warm_start":
        return ["applied", "removed"]
    if axis == "reward":
        return ["probability", "binary"]
    return list(agent_mod.EXPLORATION_MODES)


def _variant_config(cfg: Config, axis: str, variant: str, seed: int, budget: int) -> Config:
    out = copy.deepcopy(cfg)
    out.seed = seed
    out.run.train_step_budget = budget
    if axis == "warm_start":
        out.training.warm_start = variant == "applied"
    elif axis == "reward":
        out.training.reward_kind = variant
    else:
        out.exploration.mode = variant
    return out


@dataclass
class AblationResult:
    axis: str
    steps: list[int]
    series: dict[str, np.ndarray]  # variant -> (n_seeds, n_checkpoints) eval returns
    spec: AblationSpec

    def mean(self, variant: str) -> np.ndarray:
        return self.series[variant].mean(axis=0)

    def std(self, variant: str) -> np.ndarray:
        return self.series[variant].std(axis=0)


def run_ablation(
    spec: AblationSpec,
    cfg: Config,
    art: SimArtifacts,
    donor: FeedbackNet,
    progress: bool = False,
) -> AblationResult:
    """Train every variant with identical seeds/budgets, evaluating at fixed
    checkpoints with exploitation-only rollouts on a shared eval seed."""
    variants = ablation_variants(spec.axis)
    steps_ref: list[int] | None = None
    series: dict[str, np.ndarray] = {}
    for variant in variants:
        per_seed = []
        for seed in spec.seeds:
            vcfg = _variant_config(cfg, spec.axis, variant, seed, spec.step_budget)
            steps: list[int] = []
            values: list[float] = []

            def hook(step_count: int, qnet: QNet) -> None:
                counts = evaluate_policy(
                    ValuePolicy(qnet),
                    art,
                    spec.eval_episodes,
                    ABLATION_EVAL_SEED,
                    vcfg.training.gamma,
                )
                steps.append(step_count)
                values.append(counts.mean_return)

            pipeline.run_sync(
                vcfg,
                art,
                donor,
                checkpoint_every=spec.eval_every,
                checkpoint_hook=hook,
            )
            if progress:
                print(
                    f"[ablate:{spec.axis}] {variant} seed={seed} "
                    f"start={values[0]:.4f} final={values[-1]:.4f}",
                    flush=True,
                )
            if steps_ref is None:
                steps_ref = steps
            elif steps != steps_ref:
                raise UsageError("ablation runs produced misaligned checkpoints")
            per_seed.append(values)
        series[variant] = np.asarray(per_seed)
    assert steps_ref is not None
    return AblationResult(spec.axis, steps_ref, series, spec)


def emit_curves(result: AblationResult, path) -> None:
    """CSV rows (step, variant, mean, std) across seeds, plotting-tool friendly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "variant", "mean", "std"])
        for variant in result.series:
            means = result.mean(variant)
            stds = result.std(variant)
            for step, m, s in zip(result.steps, means, stds):
                writer.writerow([step, variant, f"{m:.10g}", f"{s:.10g}"])


def read_curves(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {
                "step": int(row["step"]),
                "variant": row["variant"],
                "mean": float(row["mean"]),
                "std": float(row["std"]),
            }
            for row in csv.DictReader(fh)
        ]
