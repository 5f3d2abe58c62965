"""DDPG agent: actor, critic, their target copies, replay buffer and OU noise.

Networks work in normalized action units ``u = current / max_current_a``; the
actor ends in a tanh rescaled onto [-1, 0], the charging interval. Everything
crossing the public boundary is in amperes.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, NamedTuple

import numpy as np

from . import nn_core
from .nn_core import MlpParams, OptimizerState

logger = logging.getLogger(__name__)

STATE_DIM = 3


@dataclass(frozen=True)
class AgentConfig:
    gamma: float = 0.99
    buffer_capacity: int = 100_000
    minibatch: int = 64
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    safety_lr: float = 1e-3
    tau: float = 1e-3
    actor_hidden: tuple[int, ...] = (400, 300)
    critic_hidden: tuple[int, ...] = (400, 300)
    safety_hidden: tuple[int, ...] = (128, 128)
    max_current_a: float = 4.2
    ou_theta: float = 0.15
    # In normalized action units (fraction of max_current_a).
    ou_sigma: float = 0.2
    ou_mu: float = 0.0
    warmup: int = 1000
    noise_decay: bool = True
    noise_final_fraction: float = 0.1
    noise_decay_span: float = 0.5
    # Safety score at or above which an action counts as unsafe (the QP's d).
    safety_threshold: float = 0.5
    safety_pretrain_steps: int = 0
    # Class-balanced remembered (state, action) pairs appended to each online
    # safety minibatch; 0 trains on the shared DDPG minibatch alone.
    safety_rehearsal: int = 0
    # Teach the safety network limits tightened by these margins (K, V).
    safety_margin_k: float = 0.0
    safety_margin_v: float = 0.0

    def __post_init__(self) -> None:
        for key in ("actor_hidden", "critic_hidden", "safety_hidden"):
            object.__setattr__(self, key, tuple(int(n) for n in getattr(self, key)))
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < self.minibatch <= self.buffer_capacity:
            raise ValueError("minibatch must be positive and no larger than buffer_capacity")
        if self.max_current_a <= 0:
            raise ValueError("max_current_a must be positive")
        if min(self.actor_lr, self.critic_lr, self.safety_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.ou_theta < 0 or self.ou_sigma < 0:
            raise ValueError("OU theta and sigma must be non-negative")
        if not 0.0 <= self.noise_final_fraction <= 1.0 or not 0.0 < self.noise_decay_span <= 1.0:
            raise ValueError("noise decay settings out of range")
        if self.safety_pretrain_steps < 0 or self.safety_rehearsal < 0:
            raise ValueError("safety_pretrain_steps and safety_rehearsal must be non-negative")
        if self.safety_margin_k < 0 or self.safety_margin_v < 0:
            raise ValueError("safety margins must be non-negative")

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        for key in ("actor_hidden", "critic_hidden", "safety_hidden"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown agent field '{unknown[0]}'")
        return cls(**data)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: float
    reward: float
    next_state: np.ndarray
    done: bool
    unsafe: bool


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    unsafe: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer stored column-wise."""

    def __init__(self, capacity: int, rng: np.random.Generator, state_dim: int = STATE_DIM):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity, dtype=bool)
        self.unsafe = np.zeros(capacity, dtype=bool)
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, t: Transition) -> None:
        i = self.inserted % self.capacity
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.dones[i] = t.done
        self.unsafe[i] = t.unsafe
        self.inserted += 1

    def sample_indices(self, batch_size: int) -> np.ndarray:
        n = len(self)
        if batch_size > n:
            raise ValueError(f"cannot draw {batch_size} distinct transitions from {n}")
        return self.rng.choice(n, size=batch_size, replace=False)

    def sample(self, batch_size: int) -> Batch:
        idx = self.sample_indices(batch_size)
        return Batch(
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.dones[idx],
            self.unsafe[idx],
        )


class OUNoise:
    """Ornstein-Uhlenbeck process: x <- x + theta (mu - x) + sigma * N(0, 1)."""

    def __init__(self, theta: float, sigma: float, mu: float, rng: np.random.Generator):
        self.theta = theta
        self.sigma = sigma
        self.mu = mu
        self.rng = rng
        self.x = mu

    def reset(self) -> None:
        self.x = self.mu

    def sample(self) -> float:
        self.x = self.x + self.theta * (self.mu - self.x) + self.sigma * self.rng.standard_normal()
        return self.x


def noise_scale(config: AgentConfig, episode: int, episodes: int) -> float:
    """Linear decay of the OU sigma multiplier from 1 to noise_final_fraction."""
    if not config.noise_decay:
        return 1.0
    span = max(1.0, config.noise_decay_span * episodes)
    frac = min(1.0, episode / span)
    return 1.0 - (1.0 - config.noise_final_fraction) * frac


def select_action(
    actor: MlpParams,
    state: np.ndarray,
    noise: OUNoise | None,
    explore: bool,
    max_current_a: float,
    noise_multiplier: float = 1.0,
) -> float:
    """Policy output (+ one OU draw when exploring), clamped to [-max_current_a, 0] amperes."""
    u = float(nn_core.predict(actor, state)[0])
    if explore and noise is not None:
        u += noise_multiplier * noise.sample()
    return float(np.clip(u * max_current_a, -max_current_a, 0.0))


def soft_update(network: MlpParams, target: MlpParams, tau: float) -> MlpParams:
    return nn_core.soft_update(network, target, tau)


class DDPGAgent:
    def __init__(self, config: AgentConfig, rng: np.random.Generator):
        self.config = config
        init_rng, noise_rng = rng.spawn(2)
        a_sizes = (STATE_DIM, *config.actor_hidden, 1)
        c_sizes = (STATE_DIM + 1, *config.critic_hidden, 1)
        self.actor = nn_core.init_mlp(
            a_sizes, init_rng, output_activation="tanh", output_scale=0.5, output_shift=-0.5, final_scale=3e-3
        )
        self.critic = nn_core.init_mlp(c_sizes, init_rng, final_scale=3e-3)
        self.actor_target = self.actor.copy()
        self.critic_target = self.critic.copy()
        self.actor_opt = OptimizerState.for_params(self.actor, config.actor_lr)
        self.critic_opt = OptimizerState.for_params(self.critic, config.critic_lr)
        self.noise = OUNoise(config.ou_theta, config.ou_sigma, config.ou_mu, noise_rng)
        self.skipped_updates = 0
        self._actor_grads = nn_core.zeros_like(self.actor)
        self._critic_grads = nn_core.zeros_like(self.critic)

    def act(self, state: np.ndarray, explore: bool, noise_multiplier: float = 1.0) -> float:
        return select_action(self.actor, state, self.noise, explore, self.config.max_current_a, noise_multiplier)

    def update(self, batch: Batch) -> tuple[float, float]:
        """One critic step on the TD targets, one actor step along dQ/da, then soft target updates.

        Returns (critic_loss, actor_objective) where the objective is the mean
        critic value of the pre-update policy's actions. A non-finite loss or
        gradient skips the whole update and returns NaNs.
        """
        cfg = self.config
        n = len(batch.rewards)
        u = (batch.actions / cfg.max_current_a)[:, None]

        next_u = nn_core.predict(self.actor_target, batch.next_states)
        next_q = nn_core.predict(self.critic_target, np.hstack([batch.next_states, next_u]))[:, 0]
        y = batch.rewards + cfg.gamma * np.where(batch.dones, 0.0, next_q)

        pi, a_cache = nn_core.forward(self.actor, batch.states)
        # Rows [0, n): replayed actions (critic loss). Rows [n, 2n): current policy (actor objective).
        x = np.empty((2 * n, STATE_DIM + 1))
        x[:n, :STATE_DIM] = batch.states
        x[:n, STATE_DIM:] = u
        x[n:, :STATE_DIM] = batch.states
        x[n:, STATE_DIM:] = pi
        q, c_cache = nn_core.forward(self.critic, x)
        err = q[:n, 0] - y
        critic_loss = float(np.mean(err * err))
        actor_objective = float(np.mean(q[n:]))
        if not (np.isfinite(critic_loss) and np.isfinite(actor_objective)):
            return self._skip("non-finite loss")

        out_grad = np.empty((2 * n, 1))
        out_grad[:n, 0] = (2.0 / n) * err
        # Ascend Q: dLoss/dQ = -1/n for the loss -mean(Q).
        out_grad[n:, 0] = -1.0 / n
        critic_grads, dq_dinput = nn_core.backward(
            self.critic, c_cache, out_grad, input_gradient=True, out=self._critic_grads, param_rows=slice(0, n)
        )
        actor_grads = nn_core.backward(self.actor, a_cache, dq_dinput[n:, STATE_DIM:], out=self._actor_grads)
        if not (nn_core.all_finite(critic_grads.flat) and nn_core.all_finite(actor_grads.flat)):
            return self._skip("non-finite gradient")
        nn_core.apply_gradients(self.critic, critic_grads, self.critic_opt)
        nn_core.apply_gradients(self.actor, actor_grads, self.actor_opt)

        soft_update(self.critic, self.critic_target, cfg.tau)
        soft_update(self.actor, self.actor_target, cfg.tau)
        return critic_loss, actor_objective

    def _skip(self, reason: str) -> tuple[float, float]:
        self.skipped_updates += 1
        logger.warning("DDPG update skipped: %s", reason)
        return float("nan"), float("nan")

    def is_finite(self) -> bool:
        return all(p.is_finite() for p in (self.actor, self.critic, self.actor_target, self.critic_target))
