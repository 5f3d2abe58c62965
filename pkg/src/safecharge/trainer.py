"""Training and evaluation harness.

Per seed, every episode draws one battery configuration uniformly, rolls the
exploring policy through the (optionally) safety-projected action, stores the
executed action in the replay buffer and performs one DDPG + one safety update
per environment step once the warm-up is filled.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Sequence

import numpy as np

from . import battery_env as env
from . import nn_core
from .battery_env import BatteryConfig, ConfigError, tomllib
from .ddpg import AgentConfig, DDPGAgent, ReplayBuffer, Transition, noise_scale, select_action
from .nn_core import CheckpointError, MlpParams
from .safety import INACTIVE, SafetyLayer, safety_targets

logger = logging.getLogger(__name__)

METRICS_HEADER = [
    "episode",
    "seed",
    "config_id",
    "return",
    "max_t_violation_k",
    "max_v_violation_v",
    "violation_count",
    "charging_time_min",
    "steps",
]
TRAJECTORY_HEADER = ["t_s", "current_a", "soc", "temp_k", "voltage_v", "reward", "unsafe"]
STEP_LOG_HEADER = ["episode", "step", "raw_current_a", *TRAJECTORY_HEADER, "t_violation_k", "v_violation_v"]
EVENT_HEADER = ["episode", "step", "raw_current_a", "safe_current_a", "g", "c", "status"]
NOT_REACHED = "NA"
MANIFEST_FORMAT = "safecharge-agent-v1"


class TrainingAborted(RuntimeError):
    pass


def fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# Metrics helpers
# ---------------------------------------------------------------------------


def moving_average(series: Sequence[float], window: int = 10) -> list[float]:
    """Trailing mean over the last min(i + 1, window) values."""
    if window < 1:
        raise ValueError("window must be >= 1")
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        return []
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(values.size)
    start = np.maximum(0, idx + 1 - window)
    return list((csum[idx + 1] - csum[start]) / (idx + 1 - start))


def charging_time(socs: Sequence[float], soc_target: float, dt_s: float) -> float | None:
    """Minutes until the first sample with soc >= soc_target; socs[0] is the reset state at t = 0.

    None when the target is never reached.
    """
    if len(socs) == 0:
        raise ValueError("empty trajectory")
    for i, soc in enumerate(socs):
        if soc >= soc_target:
            return i * dt_s / 60.0
    return None


@dataclass
class EpisodeMetrics:
    episode: int
    seed: int
    config_id: int
    cumulative_return: float
    max_t_violation: float
    max_v_violation: float
    violation_count: int
    charging_time_min: float | None
    steps: int

    def to_row(self) -> list[str]:
        ct = NOT_REACHED if self.charging_time_min is None else fmt(self.charging_time_min)
        return [
            str(self.episode),
            str(self.seed),
            str(self.config_id),
            fmt(self.cumulative_return),
            fmt(self.max_t_violation),
            fmt(self.max_v_violation),
            str(self.violation_count),
            ct,
            str(self.steps),
        ]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "EpisodeMetrics":
        ct = row["charging_time_min"]
        return cls(
            episode=int(row["episode"]),
            seed=int(row["seed"]),
            config_id=int(row["config_id"]),
            cumulative_return=float(row["return"]),
            max_t_violation=float(row["max_t_violation_k"]),
            max_v_violation=float(row["max_v_violation_v"]),
            violation_count=int(row["violation_count"]),
            charging_time_min=None if ct == NOT_REACHED else float(ct),
            steps=int(row["steps"]),
        )


def read_metrics(path: str | Path) -> list[EpisodeMetrics]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: header {reader.fieldnames} does not match {METRICS_HEADER}")
        return [EpisodeMetrics.from_row(row) for row in reader]


# ---------------------------------------------------------------------------
# Run description
# ---------------------------------------------------------------------------


@dataclass
class TrainRun:
    seeds: list[int]
    episodes: int
    configs: list[BatteryConfig]
    safety_enabled: bool = True
    agent_config: AgentConfig = field(default_factory=AgentConfig)
    output_dir: Path = Path("runs/out")
    checkpoint_interval: int = 0
    log_steps: bool = False
    workers: int = 1

    def __post_init__(self) -> None:
        self.output_dir = Path(self.output_dir)
        if self.episodes <= 0:
            raise ValueError("episodes must be positive")
        if not self.configs:
            raise ValueError("at least one battery configuration is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    @property
    def mode(self) -> str:
        return "safe" if self.safety_enabled else "baseline"

    @property
    def metrics_path(self) -> Path:
        return self.output_dir / f"metrics_{self.mode}.csv"

    def seed_dir(self, seed: int) -> Path:
        return self.output_dir / f"seed_{seed}"


def load_run(path: str | Path, overrides: dict[str, Any] | None = None) -> TrainRun:
    """Build a TrainRun from a TOML run file.

    Layout::

        [run]
        seeds = [0, 1, 2]
        episodes = 300
        safety_enabled = true
        output_dir = "out/desk"              # relative to the run file
        battery_configs = ["../configs/train_a.toml", ...]
        checkpoint_interval = 100
        log_steps = true

        [agent]                              # any AgentConfig field
        warmup = 1000

    ``overrides`` replaces keys of the ``[run]`` table after loading.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc), line=getattr(exc, "lineno", None)) from None

    unknown_tables = sorted(set(data) - {"run", "agent"})
    if unknown_tables:
        raise ConfigError("unknown table", unknown_tables[0])
    run = dict(data.get("run", {}))
    run.update({k: v for k, v in (overrides or {}).items() if v is not None})
    allowed = {"seeds", "episodes", "safety_enabled", "output_dir", "battery_configs", "checkpoint_interval", "log_steps", "workers"}
    unknown = sorted(set(run) - allowed)
    if unknown:
        raise ConfigError("unknown run field", unknown[0])

    base = path.parent
    seeds = run.get("seeds")
    if seeds is None:
        env_seed = os.environ.get("SAFECHARGE_SEED")
        if env_seed is None:
            raise ConfigError("no seeds given and SAFECHARGE_SEED is unset", "seeds")
        seeds = [int(env_seed)]
    if isinstance(seeds, int):
        seeds = [seeds]
    if "battery_configs" not in run:
        raise ConfigError("missing required field", "battery_configs")
    configs = []
    for p in run["battery_configs"]:
        p = Path(p)
        configs.append(env.load_config(p if p.is_absolute() else base / p))
    try:
        agent = AgentConfig.from_dict(data.get("agent", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "agent") from None
    out = Path(run.get("output_dir", "out"))
    try:
        return TrainRun(
            seeds=[int(s) for s in seeds],
            episodes=int(run.get("episodes", 300)),
            configs=configs,
            safety_enabled=bool(run.get("safety_enabled", True)),
            agent_config=agent,
            output_dir=out if out.is_absolute() else base / out,
            checkpoint_interval=int(run.get("checkpoint_interval", 0)),
            log_steps=bool(run.get("log_steps", False)),
            workers=int(run.get("workers", 1)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), "run") from None


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(
    directory: Path,
    agent: DDPGAgent,
    safety: SafetyLayer | None,
    seed: int,
    episode: int,
) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "actor.npz": (agent.actor, agent.actor_opt),
        "critic.npz": (agent.critic, agent.critic_opt),
        "actor_target.npz": (agent.actor_target, None),
        "critic_target.npz": (agent.critic_target, None),
    }
    if safety is not None:
        files["safety.npz"] = (safety.net, safety.opt)
    for name, (params, opt) in files.items():
        nn_core.save_params(directory / name, params, opt, seed)
    (directory / "agent_config.json").write_text(json.dumps(agent.config.to_dict(), indent=2, sort_keys=True) + "\n")
    names = sorted([*files, "agent_config.json"])
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "episode": episode,
        "safety_enabled": safety is not None,
        "files": {name: _sha256(directory / name) for name in names},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


@dataclass
class LoadedPolicy:
    actor: MlpParams
    safety: SafetyLayer | None
    config: AgentConfig
    seed: int


def load_checkpoint(directory: str | Path) -> LoadedPolicy:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{directory}: unreadable manifest ({exc})") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise CheckpointError(f"{directory}: manifest format {manifest.get('format')!r} is not {MANIFEST_FORMAT}")
    for name, digest in manifest.get("files", {}).items():
        p = directory / name
        if not p.exists() or _sha256(p) != digest:
            raise CheckpointError(f"{directory}: checksum mismatch for {name}")
    try:
        config = AgentConfig.from_dict(json.loads((directory / "agent_config.json").read_text()))
    except (OSError, ValueError, TypeError) as exc:
        raise CheckpointError(f"{directory}: bad agent config ({exc})") from None
    actor, _, _ = nn_core.load_params(directory / "actor.npz")
    if actor.layer_sizes[0] != 3 or actor.layer_sizes[-1] != 1 or actor.output_activation != "tanh":
        raise CheckpointError(f"{directory}: actor layout {actor.layer_sizes} is not a charging policy")
    safety = None
    if manifest.get("safety_enabled"):
        net, opt, _ = nn_core.load_params(directory / "safety.npz")
        if opt is None:
            opt = nn_core.OptimizerState.for_params(net, config.safety_lr)
        safety = SafetyLayer(net, opt, config.max_current_a, config.safety_threshold)
    return LoadedPolicy(actor, safety, config, int(manifest.get("seed", -1)))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


class _CsvAppender:
    def __init__(self, path: Path, header: list[str]):
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(header)

    def write(self, row: list[str]) -> None:
        self.writer.writerow(row)

    def close(self) -> None:
        self.fh.close()


def _check_writable(directory: Path) -> None:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        probe = directory / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {directory} is not writable: {exc}") from None


class SafetyMemory:
    """Labeled (observation, action) pairs kept for rehearsal, sampled class-balanced.

    Unsafe transitions are a fraction of a percent of the replay buffer, so
    shared DDPG minibatches almost never contain one, and the safety network
    drifts to "always safe". Rehearsing pre-training examples of both classes
    also keeps the low-current-in-a-hot-cell cases that tell the network how
    much the action matters.
    """

    def __init__(self, state_dim: int = 3):
        self._rows: dict[bool, list[np.ndarray]] = {True: [], False: []}
        self._cache: dict[bool, np.ndarray] = {}
        self.state_dim = state_dim

    def __len__(self) -> int:
        return len(self._rows[True]) + len(self._rows[False])

    def count(self, unsafe: bool) -> int:
        return len(self._rows[unsafe])

    def add(self, state: np.ndarray, action: float, unsafe: bool) -> None:
        self._rows[bool(unsafe)].append(np.append(np.asarray(state, dtype=np.float64), action))

    def _table(self, unsafe: bool) -> np.ndarray:
        rows = self._rows[unsafe]
        if len(self._cache.get(unsafe, ())) != len(rows):
            self._cache[unsafe] = np.array(rows).reshape(len(rows), self.state_dim + 1)
        return self._cache[unsafe]

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Draw ``n`` rows with replacement, half from each class when both exist."""
        classes = [c for c in (True, False) if self._rows[c]]
        if not classes:
            raise ValueError("empty memory")
        sizes = [n // len(classes) + (i < n % len(classes)) for i in range(len(classes))]
        parts, targets = [], []
        for c, k in zip(classes, sizes):
            table = self._table(c)
            parts.append(table[rng.integers(len(table), size=k)])
            targets.append(np.full(k, float(c)))
        rows = np.vstack(parts)
        return rows[:, : self.state_dim], rows[:, self.state_dim], np.concatenate(targets)


def pretrain_safety(
    safety: SafetyLayer,
    configs: Sequence[BatteryConfig],
    transitions: int,
    rng: np.random.Generator,
    minibatch: int,
    switch_prob: float = 0.05,
    jitter_a: float = 0.3,
    epochs: int = 10,
    memory: SafetyMemory | None = None,
    margin_k: float = 0.0,
    margin_v: float = 0.0,
) -> float:
    """Fit the safety network on random-policy rollouts; returns the last loss.

    The random policy holds a uniformly drawn current level, jittered by
    ``jitter_a`` each step, and redraws the level with probability
    ``switch_prob``. Per-step i.i.d. currents average out thermally and
    almost never reach an unsafe state, so they teach the network nothing
    about the boundary. Every pre-training example is copied into ``memory`` if given.
    """
    states, actions, targets = [], [], []
    while len(states) < transitions:
        cfg = configs[int(rng.integers(len(configs)))]
        a_max = min(cfg.i_max_a, safety.max_current_a)
        state = env.reset(cfg)
        level = float(rng.uniform(-a_max, 0.0))
        done = False
        while not done and len(states) < transitions:
            if rng.random() < switch_prob:
                level = float(rng.uniform(-a_max, 0.0))
            current = float(np.clip(level + jitter_a * rng.standard_normal(), -a_max, 0.0))
            obs = env.observe(state)
            state, out = env.step(state, current, cfg)
            states.append(obs)
            actions.append(current)
            targets.append(safety_targets(state, cfg, margin_k, margin_v))
            done = out.done
    S, A, K = np.array(states), np.array(actions), np.array(targets, dtype=np.float64)
    # Unsafe transitions are rare; draw half of each minibatch from them when any exist.
    pos, neg = np.flatnonzero(K == 1.0), np.flatnonzero(K == 0.0)
    if memory is not None:
        for i in range(len(S)):
            memory.add(S[i], A[i], K[i] == 1.0)
    half = minibatch // 2
    loss = float("nan")
    for _ in range(transitions // minibatch * epochs):
        if pos.size and neg.size:
            idx = np.concatenate([rng.choice(pos, size=half), rng.choice(neg, size=minibatch - half)])
        else:
            idx = rng.choice(len(S), size=min(minibatch, len(S)), replace=False)
        loss = safety.update(S[idx], A[idx], K[idx])
    return loss


def train_seed(run: TrainRun, seed: int) -> Iterator[EpisodeMetrics]:
    """Run the full training loop for one seed, yielding metrics after each episode."""
    cfg = run.agent_config
    config_rng, agent_rng, buffer_rng, safety_rng = np.random.default_rng(seed).spawn(4)
    agent = DDPGAgent(cfg, agent_rng)
    buffer = ReplayBuffer(cfg.buffer_capacity, buffer_rng)
    safety = None
    if run.safety_enabled:
        safety = SafetyLayer.create(cfg.safety_hidden, cfg.safety_lr, safety_rng, cfg.max_current_a, cfg.safety_threshold)
    memory = SafetyMemory() if safety is not None and cfg.safety_rehearsal > 0 else None
    if safety is not None and cfg.safety_pretrain_steps > 0:
        pretrain_safety(
            safety, run.configs, cfg.safety_pretrain_steps, safety_rng, cfg.minibatch,
            memory=memory, margin_k=cfg.safety_margin_k, margin_v=cfg.safety_margin_v,
        )

    seed_dir = run.seed_dir(seed)
    seed_dir.mkdir(parents=True, exist_ok=True)
    events = _CsvAppender(seed_dir / "events.csv", EVENT_HEADER) if safety is not None else None
    steps_log = _CsvAppender(seed_dir / "steps.csv", STEP_LOG_HEADER) if run.log_steps else None
    last_good = _snapshot(agent, safety)

    try:
        for episode in range(run.episodes):
            config_id = int(config_rng.integers(len(run.configs)))
            bcfg = run.configs[config_id]
            a_max = min(bcfg.i_max_a, cfg.max_current_a)
            state = env.reset(bcfg)
            obs = env.observe(state)
            agent.noise.reset()
            sigma_mult = noise_scale(cfg, episode, run.episodes)
            socs = [state.soc]
            ret = 0.0
            max_t = max_v = 0.0
            n_unsafe = 0
            done = False
            while not done:
                raw = max(agent.act(obs, explore=True, noise_multiplier=sigma_mult), -a_max)
                if not math.isfinite(raw):
                    _abort(agent, safety, last_good, seed_dir, seed, episode)
                action = raw
                if safety is not None:
                    result, sig = safety.project(obs, raw, a_lo=-a_max)
                    action = result.action
                    if result.status != INACTIVE:
                        events.write([str(episode), str(state.step_count), fmt(raw), fmt(action), fmt(sig.g), fmt(sig.c), result.status])
                state, out = env.step(state, action, bcfg)
                # The buffer's unsafe column is the safety network's training label.
                label = out.unsafe
                if safety is not None:
                    label = bool(safety_targets(state, bcfg, cfg.safety_margin_k, cfg.safety_margin_v))
                buffer.add(Transition(obs, action, out.reward, out.next_observation, out.terminal, label))
                if steps_log is not None:
                    steps_log.write(
                        [str(episode), str(state.step_count), fmt(raw), fmt(state.time_s), fmt(action), fmt(state.soc),
                         fmt(state.temp_k), fmt(state.voltage_v), fmt(out.reward), str(int(out.unsafe)),
                         fmt(out.t_violation), fmt(out.v_violation)]
                    )
                ret += out.reward
                max_t = max(max_t, out.t_violation)
                max_v = max(max_v, out.v_violation)
                n_unsafe += int(out.unsafe)
                if memory is not None and label:
                    memory.add(obs, action, True)
                socs.append(state.soc)
                obs = out.next_observation
                done = out.done

                if len(buffer) >= max(cfg.warmup, cfg.minibatch):
                    batch = buffer.sample(cfg.minibatch)
                    agent.update(batch)
                    if safety is not None:
                        S, A, K = batch.states, batch.actions, batch.unsafe.astype(np.float64)
                        if memory:
                            mS, mA, mK = memory.sample(cfg.safety_rehearsal, safety_rng)
                            S, A, K = np.vstack([S, mS]), np.concatenate([A, mA]), np.concatenate([K, mK])
                        safety.update(S, A, K)

            if not (agent.is_finite() and (safety is None or safety.net.is_finite())):
                _abort(agent, safety, last_good, seed_dir, seed, episode)
            last_good = _snapshot(agent, safety)

            yield EpisodeMetrics(
                episode=episode,
                seed=seed,
                config_id=config_id,
                cumulative_return=ret,
                max_t_violation=max_t,
                max_v_violation=max_v,
                violation_count=n_unsafe,
                charging_time_min=charging_time(socs, bcfg.soc_target, bcfg.dt_s),
                steps=state.step_count,
            )
            if run.checkpoint_interval and (episode + 1) % run.checkpoint_interval == 0 and episode + 1 < run.episodes:
                save_checkpoint(seed_dir / f"checkpoint_ep{episode + 1}", agent, safety, seed, episode)
        save_checkpoint(seed_dir / "checkpoint", agent, safety, seed, run.episodes - 1)
    finally:
        for log in (events, steps_log):
            if log is not None:
                log.close()


def _abort(agent: DDPGAgent, safety: SafetyLayer | None, last_good: list[np.ndarray], seed_dir: Path, seed: int, episode: int) -> None:
    _restore(agent, safety, last_good)
    save_checkpoint(seed_dir / "checkpoint", agent, safety, seed, episode - 1)
    raise TrainingAborted(f"seed {seed}: non-finite network parameters in episode {episode}; last good state checkpointed")


def _snapshot(agent: DDPGAgent, safety: SafetyLayer | None) -> list[np.ndarray]:
    nets = [agent.actor, agent.critic, agent.actor_target, agent.critic_target]
    if safety is not None:
        nets.append(safety.net)
    return [p.flat.copy() for p in nets]


def _restore(agent: DDPGAgent, safety: SafetyLayer | None, snap: list[np.ndarray]) -> None:
    nets = [agent.actor, agent.critic, agent.actor_target, agent.critic_target]
    if safety is not None:
        nets.append(safety.net)
    for p, flat in zip(nets, snap):
        p.flat[...] = flat
        p.touch()


def _train_seed_list(run: TrainRun, seed: int) -> list[EpisodeMetrics]:
    return list(train_seed(run, seed))


def _write_run_manifest(run: TrainRun) -> None:
    info = {
        "mode": run.mode,
        "seeds": run.seeds,
        "episodes": run.episodes,
        "configs": [c.name for c in run.configs],
        "agent": run.agent_config.to_dict(),
    }
    (run.output_dir / f"run_{run.mode}.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


def iter_training(run: TrainRun) -> Iterator[EpisodeMetrics]:
    """Train every seed and stream EpisodeMetrics; also written to ``run.metrics_path``.

    Seeds run one after another unless ``run.workers > 1``, in which case
    each seed trains in its own process and rows are written in seed order.
    """
    _check_writable(run.output_dir)
    _write_run_manifest(run)
    metrics = _CsvAppender(run.metrics_path, METRICS_HEADER)
    try:
        if run.workers > 1 and len(run.seeds) > 1:
            with ProcessPoolExecutor(max_workers=run.workers) as pool:
                futures = [pool.submit(_train_seed_list, run, s) for s in run.seeds]
                for fut in futures:
                    for m in fut.result():
                        metrics.write(m.to_row())
                        yield m
        else:
            for s in run.seeds:
                for m in train_seed(run, s):
                    metrics.write(m.to_row())
                    metrics.fh.flush()
                    yield m
    finally:
        metrics.close()


def run_training(run: TrainRun) -> list[EpisodeMetrics]:
    return list(iter_training(run))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvaluationSummary:
    config_name: str
    charging_time_min: float | None
    violation_count: int
    max_t_violation: float
    max_v_violation: float
    peak_temp_k: float
    peak_voltage_v: float
    cumulative_return: float
    steps: int
    perturbed_steps: int

    def line(self) -> str:
        ct = NOT_REACHED if self.charging_time_min is None else f"{self.charging_time_min:.2f}"
        return (
            f"config={self.config_name} charging_time_min={ct} violations={self.violation_count} "
            f"peak_temp_k={self.peak_temp_k:.3f} peak_voltage_v={self.peak_voltage_v:.4f} "
            f"return={self.cumulative_return:.4f} steps={self.steps} perturbed_steps={self.perturbed_steps}"
        )

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


def evaluate_policy(
    actor: MlpParams,
    safety: SafetyLayer | None,
    config: BatteryConfig,
    max_current_a: float = 4.2,
) -> tuple[list[list[str]], EvaluationSummary]:
    """Deterministic rollout (no exploration noise). Returns trajectory CSV rows and a summary."""
    a_max = min(config.i_max_a, max_current_a)
    state = env.reset(config)
    obs = env.observe(state)
    rows: list[list[str]] = []
    socs = [state.soc]
    peak_t, peak_v = state.temp_k, state.voltage_v
    ret, max_t, max_v, n_unsafe, perturbed = 0.0, 0.0, 0.0, 0, 0
    done = False
    while not done:
        action = max(select_action(actor, obs, None, False, max_current_a), -a_max)
        if safety is not None:
            result, _ = safety.project(obs, action, a_lo=-a_max)
            perturbed += int(result.status != INACTIVE)
            action = result.action
        state, out = env.step(state, action, config)
        rows.append([fmt(state.time_s), fmt(action), fmt(state.soc), fmt(state.temp_k), fmt(state.voltage_v), fmt(out.reward), str(int(out.unsafe))])
        socs.append(state.soc)
        peak_t, peak_v = max(peak_t, state.temp_k), max(peak_v, state.voltage_v)
        ret += out.reward
        max_t, max_v = max(max_t, out.t_violation), max(max_v, out.v_violation)
        n_unsafe += int(out.unsafe)
        obs = out.next_observation
        done = out.done
    summary = EvaluationSummary(
        config_name=config.name,
        charging_time_min=charging_time(socs, config.soc_target, config.dt_s),
        violation_count=n_unsafe,
        max_t_violation=max_t,
        max_v_violation=max_v,
        peak_temp_k=peak_t,
        peak_voltage_v=peak_v,
        cumulative_return=ret,
        steps=state.step_count,
        perturbed_steps=perturbed,
    )
    return rows, summary


def write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------


def summarize(metrics: Sequence[EpisodeMetrics], horizon_min: float | None = None, last: int | None = None) -> dict[str, Any]:
    """Per-run means. Charging time is averaged over episodes that reached the target;
    ``charging_time_censored_min`` counts the others at ``horizon_min``."""
    if last is not None:
        cutoff = max(m.episode for m in metrics) + 1 - last
        metrics = [m for m in metrics if m.episode >= cutoff]
    reached = [m.charging_time_min for m in metrics if m.charging_time_min is not None]
    out: dict[str, Any] = {
        "episodes": len(metrics),
        "mean_return": float(np.mean([m.cumulative_return for m in metrics])),
        "mean_violations_per_episode": float(np.mean([m.violation_count for m in metrics])),
        "mean_max_t_violation_k": float(np.mean([m.max_t_violation for m in metrics])),
        "mean_max_v_violation_v": float(np.mean([m.max_v_violation for m in metrics])),
        "reach_rate": len(reached) / len(metrics),
        "mean_charging_time_min": float(np.mean(reached)) if reached else None,
    }
    if horizon_min is not None:
        censored = [horizon_min if m.charging_time_min is None else m.charging_time_min for m in metrics]
        out["charging_time_censored_min"] = float(np.mean(censored))
    return out


def violation_curve(metrics: Sequence[EpisodeMetrics], window: int = 10) -> list[float]:
    """Violations per episode averaged across seeds, then smoothed with a trailing window."""
    by_episode: dict[int, list[int]] = {}
    for m in metrics:
        by_episode.setdefault(m.episode, []).append(m.violation_count)
    series = [float(np.mean(by_episode[e])) for e in sorted(by_episode)]
    return moving_average(series, window)


def compare_runs(runs: dict[str, Sequence[EpisodeMetrics]], window: int = 10, horizon_min: float = 30.0) -> dict[str, Any]:
    names = list(runs)
    summaries = {name: summarize(runs[name], horizon_min) for name in names}
    ref = summaries[names[0]]
    deltas = {}
    for name in names[1:]:
        deltas[name] = {
            key: (summaries[name][key] - ref[key])
            if isinstance(ref[key], (int, float)) and isinstance(summaries[name][key], (int, float))
            else None
            for key in ref
        }
    return {
        "reference": names[0],
        "window": window,
        "runs": summaries,
        "deltas_vs_reference": deltas,
        "violation_moving_average": {name: violation_curve(runs[name], window) for name in names},
    }

