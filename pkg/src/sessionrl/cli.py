"""Command-line entry point wiring the stages together.

Subcommands: gen-world, train-greedy, train-rl, evaluate, ablate,
replay-episode. Each reads the artifacts of earlier stages from the run
directory (--out), writes its own artifacts there, echoes the resolved config,
and records a manifest with artifact hashes. Exit codes: 0 success, 1
usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

# matrices here are small; BLAS thread pools cost more than they save, and
# single-threaded math keeps generator processes from fighting over cores
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np

from . import __version__, agent, config as config_mod, evalbench, greedy, pipeline, plots, simulator, world
from .errors import ConfigError, MissingArtifactError, TrainingError, UsageError

WORLD_DIR = "world"
GREEDY_MODEL = "greedy/model.npz"
QNET_MODEL = "rl/qnet.npz"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(parser) -> None:
    parser.add_argument("--config", help="JSON config file (comments allowed)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config field, e.g. --set training.gamma=0.5",
    )
    parser.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    parser.add_argument("--out", help="run directory (default runs/default, or runs/<ts>-<tag>)")
    parser.add_argument("--tag", help="tag for a fresh timestamped run directory")


def build_parser() -> _Parser:
    parser = _Parser(prog="sessionrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-world", help="generate catalog, users and logged sessions")
    _add_common(p)

    p = sub.add_parser("train-greedy", help="train the one-step feedback model")
    _add_common(p)

    p = sub.add_parser("train-rl", help="train the Q-network in the simulator")
    _add_common(p)
    p.add_argument("--mode", choices=["sync", "async"], default="sync")

    p = sub.add_parser("evaluate", help="paired greedy-vs-RL evaluation")
    _add_common(p)
    p.add_argument("--episodes", type=int, help="override eval.n_episodes")
    p.add_argument("--jobs", type=int, help="override eval.n_jobs")
    p.add_argument("--traces", type=int, default=0, help="export N RL episode traces")

    p = sub.add_parser("ablate", help="run one ablation axis")
    _add_common(p)
    p.add_argument("--axis", choices=list(evalbench.ABLATION_AXES), required=True)
    p.add_argument("--budget", type=int, default=4000, help="train steps per variant")
    p.add_argument("--eval-every", type=int, default=800)
    p.add_argument("--eval-episodes", type=int, default=150)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--users", type=int, default=100, help="reduced user pool size")
    p.add_argument("--candidates", type=int, default=100, help="reduced candidate set size")

    p = sub.add_parser("replay-episode", help="re-execute an exported trace and verify it")
    _add_common(p)
    p.add_argument("--trace", required=True)
    return parser


def _load_config(args) -> config_mod.Config:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return config_mod.load_config(args.config, overrides)


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    if args.tag:
        return Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{args.tag}"
    return Path("runs") / "default"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(stage_dir: Path, command: str, cfg, files: list[Path]) -> None:
    manifest = {
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "seed": cfg.seed,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "config": cfg.to_dict(),
        "artifact_hashes": {str(p): _sha256(p) for p in files if p.exists()},
    }
    with open(stage_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _stage_dir(out: Path, name: str, cfg) -> Path:
    stage = out / name
    stage.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(stage / "config.json", cfg)
    return stage


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, produced_by)
    return path


def _load_world(out: Path, cfg):
    catalog = world.load_catalog(_require(out / WORLD_DIR / "catalog.npz", "gen-world"))
    users = world.load_users(_require(out / WORLD_DIR / "users.npz", "gen-world"))
    dataset = world.load_dataset_jsonl(
        _require(out / WORLD_DIR / "dataset.jsonl", "gen-world"),
        cfg.world.dynamics.lookback,
    )
    return catalog, users, dataset


def _artifacts(out: Path, cfg) -> simulator.SimArtifacts:
    catalog, users, dataset = _load_world(out, cfg)
    net = greedy.load_feedback_net(_require(out / GREEDY_MODEL, "train-greedy"))
    return simulator.SimArtifacts(catalog, users, dataset, net, pipeline.env_config_from(cfg))


# --- subcommands -----------------------------------------------------------------


def cmd_gen_world(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    stage = _stage_dir(out, WORLD_DIR, cfg)
    w = cfg.world
    catalog = world.gen_catalog(w.n_items, w.dim, w.n_clusters, cfg.seed, w.item_noise)
    users = world.gen_users(w.n_users, catalog, cfg.seed, w.user_noise, w.secondary_weight)
    dynamics = pipeline.dynamics_from(cfg)
    dataset = world.build_dataset(catalog, users, dynamics, w.sessions_per_user, cfg.seed, w.log_max_len)
    world.save_catalog(stage / "catalog.npz", catalog)
    world.save_users(stage / "users.npz", users)
    world.save_dataset_jsonl(stage / "dataset.jsonl", dataset)
    _write_manifest(stage, "gen-world", cfg, [stage / "catalog.npz", stage / "users.npz", stage / "dataset.jsonl"])
    print(
        f"world: {catalog.n_items} items, {users.n_users} users, "
        f"{len(dataset)} logged rows ({len(dataset) / (w.n_users * w.sessions_per_user):.1f} steps/session)"
    )
    return 0


def cmd_train_greedy(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    catalog, users, dataset = _load_world(out, cfg)
    stage = _stage_dir(out, "greedy", cfg)
    enc = pipeline.encoder_config_from(cfg)
    train_idx, held_idx = greedy.split_dataset(len(dataset), cfg.greedy.holdout_fraction, cfg.seed)
    net, loss_curve = greedy.train_feedback_net(
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
    aucs = greedy.heldout_auc(net, catalog, users, dataset, held_idx) if len(held_idx) else {}
    greedy.save_feedback_net(stage / "model.npz", net)
    with open(stage / "loss_curve.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, loss in enumerate(loss_curve):
            fh.write(f"{i},{loss:.8f}\n")
    metrics = {
        "loss_curve": loss_curve,
        "heldout_auc": aucs,
        "mean_auc": float(np.mean(list(aucs.values()))) if aucs else None,
    }
    with open(stage / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2)
        fh.write("\n")
    _write_manifest(stage, "train-greedy", cfg, [stage / "model.npz", stage / "loss_curve.csv"])
    auc_str = " ".join(f"{k}={v:.3f}" for k, v in aucs.items())
    print(f"feedback model: final loss {loss_curve[-1]:.4f}; held-out AUC {auc_str}")
    return 0


def cmd_train_rl(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    art = _artifacts(out, cfg)
    stage = _stage_dir(out, "rl", cfg)
    if args.mode == "sync":
        result = pipeline.run_sync(cfg, art, art.net, progress=True)
    else:
        result = pipeline.run_async(cfg, art, art.net, progress=True)
    exploration = pipeline.exploration_from(cfg)
    agent.save_q_net(stage / "qnet.npz", result.qnet, exploration, version=result.train_steps)
    pipeline.write_metrics_csv(stage / "metrics.csv", result.metrics)
    plots.plot_training_metrics(result.metrics, stage / "training.png")
    _write_manifest(stage, "train-rl", cfg, [stage / "qnet.npz", stage / "metrics.csv"])
    tail = pipeline._mean_tail(result.episode_returns)
    print(
        f"rl ({args.mode}): {result.train_steps} train steps, "
        f"{len(result.episode_returns)} episodes, tail return {tail:.4f}"
    )
    if result.staleness:
        lags = dict(sorted(result.staleness.items()))
        print(f"snapshot staleness histogram: {lags}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    art = _artifacts(out, cfg)
    qnet, _, _ = agent.load_q_net(_require(out / QNET_MODEL, "train-rl"))
    stage = _stage_dir(out, "eval", cfg)
    n_episodes = args.episodes or cfg.eval.n_episodes
    n_jobs = args.jobs or cfg.eval.n_jobs
    result = evalbench.compare_policies(
        evalbench.ValuePolicy(qnet),
        evalbench.BaselinePolicy(art.net),
        art,
        n_episodes,
        cfg.seed,
        cfg.training.gamma,
        n_jobs,
    )
    text = evalbench.format_comparison(result)
    print(text)
    with open(stage / "summary.txt", "w") as fh:
        fh.write(text + "\n")
    with open(stage / "summary.json", "w") as fh:
        json.dump(evalbench.comparison_to_json(result), fh, indent=2)
        fh.write("\n")
    plots.plot_comparison(result, stage / "comparison.png")
    files = [stage / "summary.json", stage / "summary.txt"]
    if args.traces > 0:
        trace_dir = stage / "traces"
        trace_dir.mkdir(exist_ok=True)
        policy = evalbench.ValuePolicy(qnet)
        for i in range(args.traces):
            rng = np.random.default_rng((cfg.seed, 8, i))
            state, candidates = simulator.reset(art.pool, art.users, art.catalog, art.env, rng)
            initial = state
            steps = []
            done = False
            while not done:
                action = policy.select(state, candidates, art.catalog)
                fb, reward, state, done = simulator.step(state, action, art.net, art.catalog, art.env)
                steps.append(simulator.trace_step_record(action, fb, reward, done))
            path = trace_dir / f"trace_{i}.jsonl"
            simulator.write_trace(path, initial, candidates, steps)
            files.append(path)
        print(f"wrote {args.traces} traces to {trace_dir}")
    _write_manifest(stage, "evaluate", cfg, files)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    art = _artifacts(out, cfg)
    stage = _stage_dir(out, "ablate", cfg)
    reduced_env = simulator.EnvConfig(
        threshold=art.env.threshold,
        lookback=art.env.lookback,
        max_horizon=art.env.max_horizon,
        candidate_size=min(args.candidates, art.catalog.n_items),
        reward_weights=art.env.reward_weights,
    )
    reduced = simulator.SimArtifacts(
        art.catalog,
        art.users,
        art.pool.restrict_users(args.users),
        art.net,
        reduced_env,
    )
    spec = evalbench.AblationSpec(
        axis=args.axis,
        step_budget=args.budget,
        eval_every=args.eval_every,
        eval_episodes=args.eval_episodes,
        seeds=[int(s) for s in args.seeds.split(",") if s.strip()],
    )
    result = evalbench.run_ablation(spec, cfg, reduced, art.net, progress=True)
    curves_csv = stage / f"{args.axis}_curves.csv"
    evalbench.emit_curves(result, curves_csv)
    plots.plot_ablation_curves(result, stage / f"{args.axis}_curves.png")
    _write_manifest(stage, "ablate", cfg, [curves_csv])
    for variant in result.series:
        final = result.mean(variant)[-1]
        print(f"{args.axis}/{variant}: final mean return {final:.4f}")
    return 0


def cmd_replay_episode(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    art = _artifacts(out, cfg)
    divergences = simulator.replay_trace(args.trace, art.net, art.catalog, art.users, art.env)
    header, steps = simulator.read_trace(args.trace)
    if divergences:
        raise TrainingError(f"{divergences}/{len(steps)} transitions diverged for {args.trace}")
    print(f"replayed {len(steps)} transitions with zero divergence")
    return 0


COMMANDS = {
    "gen-world": cmd_gen_world,
    "train-greedy": cmd_train_greedy,
    "train-rl": cmd_train_rl,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "replay-episode": cmd_replay_episode,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
