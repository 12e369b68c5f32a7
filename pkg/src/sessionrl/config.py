"""Layered run configuration: code defaults <- JSON file <- --set overrides.

The JSON may carry // and /* */ comments. Unknown keys are rejected with the
full field path; range checks run on construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .errors import ConfigError


@dataclass
class DynamicsConfig:
    """Ground-truth feedback coefficients (world.dynamics.*).

    Tuned once so that repetition measurably depresses save probability and
    drives session exit, which is what leaves cumulative headroom over the
    one-step-greedy policy.
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


@dataclass
class WorldConfig:
    n_items: int = 10_000
    dim: int = 16
    n_clusters: int = 8
    item_noise: float = 0.15
    n_users: int = 500
    user_noise: float = 0.12
    secondary_weight: float = 0.55
    sessions_per_user: int = 16
    log_max_len: int = 60
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)

    def validate(self) -> None:
        if self.n_items < 1 or self.dim < 2 or self.n_clusters < 1:
            raise ConfigError("world: need n_items >= 1, dim >= 2, n_clusters >= 1")
        if self.n_users < 1 or self.sessions_per_user < 1 or self.log_max_len < 1:
            raise ConfigError("world: counts must be >= 1")


@dataclass
class EncoderSection:
    slot_width: int = 16
    trunk_hidden: list[int] = field(default_factory=lambda: [64, 32])

    def validate(self) -> None:
        if self.slot_width < 1 or any(w < 1 for w in self.trunk_hidden):
            raise ConfigError("encoder: widths must be >= 1")


@dataclass
class EnvSection:
    threshold: float = 0.5
    max_horizon: int = 50
    candidate_size: int = 500
    reward_weights: list[float] = field(default_factory=lambda: [0.0, 0.0, 1.0, 0.0, 0.0])

    def validate(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("env.threshold must be in (0, 1)")
        if self.max_horizon < 1 or self.candidate_size < 2:
            raise ConfigError("env: max_horizon >= 1 and candidate_size >= 2 required")
        if len(self.reward_weights) != 5:
            raise ConfigError("env.reward_weights must have 5 entries")


@dataclass
class ExplorationSection:
    epsilon: float = 0.2
    temperature: float = 0.1
    trunc_fraction: float = 0.25
    mode: str = "trunc_softmax"

    def validate(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("exploration.epsilon must be in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("exploration.temperature must be > 0")
        if not 0.0 < self.trunc_fraction <= 1.0:
            raise ConfigError("exploration.trunc_fraction must be in (0, 1]")


@dataclass
class ReplaySection:
    capacity: int = 100_000
    alpha: float = 0.9
    beta: float = 0.1
    priority_floor: float = 1e-3

    def validate(self) -> None:
        if self.capacity < 1:
            raise ConfigError("replay.capacity must be >= 1")
        if not 0.0 <= self.alpha <= 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ConfigError("replay.alpha and replay.beta must be in [0, 1]")
        if self.priority_floor <= 0:
            raise ConfigError("replay.priority_floor must be > 0")


@dataclass
class GreedySection:
    epochs: int = 12
    batch_size: int = 128
    learning_rate: float = 1e-3
    holdout_fraction: float = 0.1

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("greedy: epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("greedy.learning_rate must be > 0")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("greedy.holdout_fraction must be in [0, 1)")


@dataclass
class TrainingSection:
    gamma: float = 0.75
    nstep: int = 3
    batch_size: int = 128
    learning_rate: float = 2.5e-4
    target_sync_every: int = 500
    reward_kind: str = "probability"
    warm_start: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("training.gamma must be in [0, 1]")
        if self.nstep < 1 or self.batch_size < 1 or self.target_sync_every < 1:
            raise ConfigError("training: nstep, batch_size, target_sync_every must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("training.learning_rate must be > 0")
        if self.reward_kind not in ("probability", "binary"):
            raise ConfigError("training.reward_kind must be 'probability' or 'binary'")


@dataclass
class RunSection:
    collect_per_round: int = 64
    train_per_round: int = 256
    snapshot_every: int = 200
    n_generators: int = 4
    train_step_budget: int = 20_000
    min_buffer: int = 1_000
    stabilization_window: int = 5_000
    stabilization_tolerance: float = 0.05

    def validate(self) -> None:
        if min(self.collect_per_round, self.train_per_round, self.snapshot_every, self.n_generators) < 1:
            raise ConfigError("run: round sizes, snapshot_every and n_generators must be >= 1")
        if self.train_step_budget < 0 or self.min_buffer < 1:
            raise ConfigError("run: train_step_budget >= 0 and min_buffer >= 1 required")
        if self.stabilization_window < 1 or self.stabilization_tolerance < 0:
            raise ConfigError("run: bad stabilization settings")


@dataclass
class EvalSection:
    n_episodes: int = 10_000
    n_jobs: int = 1

    def validate(self) -> None:
        if self.n_episodes < 1 or self.n_jobs < 1:
            raise ConfigError("eval: n_episodes and n_jobs must be >= 1")


@dataclass
class Config:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    env: EnvSection = field(default_factory=EnvSection)
    exploration: ExplorationSection = field(default_factory=ExplorationSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    greedy: GreedySection = field(default_factory=GreedySection)
    training: TrainingSection = field(default_factory=TrainingSection)
    run: RunSection = field(default_factory=RunSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if is_dataclass(v) and hasattr(v, "validate"):
                v.validate()

    def to_dict(self) -> dict:
        return asdict(self)


def strip_json_comments(text: str) -> str:
    """Remove // line and /* */ block comments outside of string literals."""
    out = []
    i, n = 0, len(text)
    in_string = False
    while i < n:
        c = text[i]
        if in_string:
            out.append(c)
            if c == "\\" and i + 1 < n:
                out.append(text[i + 1])
                i += 1
            elif c == '"':
                in_string = False
            i += 1
        elif c == '"':
            in_string = True
            out.append(c)
            i += 1
        elif c == "/" and i + 1 < n and text[i + 1] == "/":
            while i < n and text[i] != "\n":
                i += 1
        elif c == "/" and i + 1 < n and text[i + 1] == "*":
            i += 2
            while i + 1 < n and not (text[i] == "*" and text[i + 1] == "/"):
                i += 1
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def _coerce(value, target_type, path: str):
    if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return int(value)
    if target_type is bool and isinstance(value, bool):
        return value
    if target_type is str and isinstance(value, str):
        return value
    if target_type in (float, str, bool):
        raise ConfigError(f"{path}: expected {target_type.__name__}, got {value!r}")
    return value


def _apply_dict(obj, data: dict, path: str = "") -> None:
    known = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key: {where}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected an object")
            _apply_dict(current, value, where)
        elif isinstance(current, list):
            if not isinstance(value, list):
                raise ConfigError(f"{where}: expected a list")
            setattr(obj, key, list(value))
        else:
            setattr(obj, key, _coerce(value, type(current), where))


def _apply_override(cfg: Config, key: str, raw: str) -> None:
    parts = key.split(".")
    obj = cfg
    for part in parts[:-1]:
        if not hasattr(obj, part) or not is_dataclass(getattr(obj, part)):
            raise ConfigError(f"unknown config key: {key}")
        obj = getattr(obj, part)
    leaf = parts[-1]
    if not hasattr(obj, leaf):
        raise ConfigError(f"unknown config key: {key}")
    current = getattr(obj, leaf)
    if is_dataclass(current):
        raise ConfigError(f"{key} is a section, not a field")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a JSON list, got {raw!r}")
        setattr(obj, leaf, value)
    else:
        setattr(obj, leaf, _coerce(value, type(current), key))


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    """Resolve defaults <- file <- key=value overrides, then validate."""
    cfg = Config()
    if path is not None:
        with open(path) as fh:
            text = strip_json_comments(fh.read())
        text = text.strip()
        if text:
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            if not isinstance(data, dict):
                raise ConfigError(f"{path}: top level must be an object")
            _apply_dict(cfg, data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _apply_override(cfg, key.strip(), raw.strip())
    cfg.validate()
    return cfg


def save_config(path, cfg: Config) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
