"""On-policy collection buffers, GAE, and minibatch iteration.

Storage is step-major [n_steps, n_envs, ...] for the backward GAE sweep.
Episodes that end inside a rollout are handled in lockstep: finished envs
are reset by the collector, and pure time-limit endings are bootstrapped by
folding gamma * V(final_obs) into the reward of the truncated step (the
stored done still cuts the GAE recursion there, so no value leaks across
the reset boundary).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError, ContractError

__all__ = [
    "EpisodeTracker",
    "GaeConfig",
    "RolloutBuffer",
    "collect_rollout",
    "compute_gae",
    "minibatches",
    "normalize_advantages",
]


@dataclass(frozen=True)
class GaeConfig:
    # gamma = 1 is undiscounted; allowed so the telescoping identities hold
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("discount gamma must lie in [0, 1]")
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError("gae lambda must lie in [0, 1]")


@dataclass
class RolloutBuffer:
    """One collection phase; dummy_actions stores (x, y) concatenated to 2d
    columns. advantages/returns stay None until compute_gae fills them."""

    states: np.ndarray  # [N, E, obs_dim]
    dummy_actions: np.ndarray  # [N, E, 2d]
    old_logp: np.ndarray  # [N, E]
    rewards: np.ndarray  # [N, E]
    dones: np.ndarray  # [N, E] bool
    values: np.ndarray  # [N, E]
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]

    @property
    def n_envs(self) -> int:
        return self.states.shape[1]

    @property
    def total(self) -> int:
        return self.n_steps * self.n_envs

    def flat(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        return arr.reshape(self.total, *arr.shape[2:])


@dataclass
class EpisodeTracker:
    """Per-env return accumulators that survive across rollouts (episodes
    span collection boundaries)."""

    running_return: np.ndarray
    completed: list = field(default_factory=list)

    @classmethod
    def for_envs(cls, n_envs: int) -> "EpisodeTracker":
        return cls(np.zeros(n_envs))

    def add_step(self, rewards: np.ndarray, dones: np.ndarray) -> None:
        self.running_return = self.running_return + rewards
        for i in np.flatnonzero(dones):
            self.completed.append(float(self.running_return[i]))
            self.running_return[i] = 0.0

    def drain_completed(self) -> list[float]:
        done, self.completed = self.completed, []
        return done


def collect_rollout(policy, envs, n_steps: int, rng, value_fn, gamma: float,
                    tracker: EpisodeTracker | None = None):
    """Step all envs in lockstep for n_steps under the (frozen) policy.

    value_fn maps an observation batch to a value vector; it is used for the
    stored per-step values, the truncation bootstrap, and the final
    bootstrap. Returns (buffer, bootstrap_values).
    """
    if n_steps < 0:
        raise ContractError("n_steps must be non-negative")
    n_envs = envs.n_envs
    obs = envs.observe()
    obs_dim = obs.shape[1]
    two_d = 2 * policy.cfg.action_dim

    states = np.zeros((n_steps, n_envs, obs_dim))
    dummy = np.zeros((n_steps, n_envs, two_d))
    old_logp = np.zeros((n_steps, n_envs))
    rewards = np.zeros((n_steps, n_envs))
    dones = np.zeros((n_steps, n_envs), dtype=bool)
    truncation_events = []  # (step, env indices, final observations)

    for t in range(n_steps):
        env_actions, dummy_t, logp = policy.act(obs, rng)
        try:
            next_obs, r, done = envs.step(env_actions)
        except Exception as err:
            raise RuntimeError(f"environment failed at rollout step {t}") from err
        states[t] = obs
        dummy[t, :, : policy.cfg.action_dim] = dummy_t.x
        dummy[t, :, policy.cfg.action_dim :] = dummy_t.y
        old_logp[t] = logp
        rewards[t] = r
        dones[t] = done
        if tracker is not None:
            tracker.add_step(r, done)
        truncated = envs.phys.last_truncated & done
        if truncated.any():
            idx = np.flatnonzero(truncated)
            truncation_events.append((t, idx, next_obs[idx].copy()))
        if done.any():
            done_idx = np.flatnonzero(done)
            next_obs = next_obs.copy()
            next_obs[done_idx] = envs.reset(rng, done_idx)
        obs = next_obs

    if n_steps == 0:
        empty = np.zeros((0, n_envs))
        buffer = RolloutBuffer(
            states=np.zeros((0, n_envs, obs_dim)),
            dummy_actions=np.zeros((0, n_envs, two_d)),
            old_logp=empty,
            rewards=empty.copy(),
            dones=np.zeros((0, n_envs), dtype=bool),
            values=empty.copy(),
        )
        return buffer, value_fn(obs)

    values = value_fn(states.reshape(n_steps * n_envs, obs_dim)).reshape(n_steps, n_envs)
    for t, idx, final_obs in truncation_events:
        rewards[t, idx] += gamma * value_fn(final_obs)
    bootstrap_values = value_fn(obs)

    buffer = RolloutBuffer(states, dummy, old_logp, rewards, dones, values)
    return buffer, bootstrap_values


def compute_gae(rewards, values, dones, bootstrap_values, cfg: GaeConfig):
    """Backward generalized-advantage sweep.

    delta_t = r_t + gamma*(1-done_t)*V_{t+1} - V_t
    A_t = delta_t + gamma*lam*(1-done_t)*A_{t+1};  R_t = A_t + V_t
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    bootstrap_values = np.asarray(bootstrap_values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ContractError("rewards, values, dones must share shape [N, E]")
    if bootstrap_values.shape != rewards.shape[1:]:
        raise ContractError("bootstrap_values must have one entry per env")

    n_steps = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    next_adv = np.zeros_like(bootstrap_values)
    next_value = bootstrap_values
    for t in range(n_steps - 1, -1, -1):
        not_done = 1.0 - dones[t].astype(np.float64)
        delta = rewards[t] + cfg.gamma * not_done * next_value - values[t]
        next_adv = delta + cfg.gamma * cfg.lam * not_done * next_adv
        advantages[t] = next_adv
        next_value = values[t]
    returns = advantages + values
    return advantages, returns


def minibatches(buffer: RolloutBuffer, batch_size: int, rng) -> list[np.ndarray]:
    """Shuffled index chunks over the flattened buffer. Every element appears
    exactly once per epoch; the final chunk may be short."""
    if batch_size <= 0:
        raise ContractError("batch_size must be positive")
    perm = rng.permutation(buffer.total)
    return [perm[i : i + batch_size] for i in range(0, buffer.total, batch_size)]


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """(adv - mean) / (std + 1e-8); passes through with a warning for n < 2."""
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        warnings.warn("advantage normalization skipped: fewer than 2 samples")
        return adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)
