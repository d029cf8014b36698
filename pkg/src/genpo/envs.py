"""Vectorized toy continuous-control environments.

Deterministic, seedable, lockstep-vectorized. Dynamics are shared
point-mass physics: vel' = vel + clip(a)*dt - drag*vel*dt, pos' = pos +
vel'*dt. All rewards are non-positive. step() is a pure function of
(state, action); randomness lives in reset() only, so finished envs are
reset by the caller (the collector), not by step().
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import ContractError

__all__ = [
    "BimodalReachConfig",
    "BimodalReachEnv",
    "EnvSpec",
    "PointMassConfig",
    "PointMassEnv",
    "make_env",
    "scripted_controller",
]


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    act_dim: int
    max_episode_steps: int
    action_bound: float


@dataclass(frozen=True)
class PointMassConfig:
    physics_dt: float = 0.05
    drag: float = 0.1
    goal: tuple[float, float] = (1.0, 1.0)
    start_radius: float = 0.5
    horizon: int = 100
    goal_tolerance: float = 0.05
    action_bound: float = 1.0

    def __post_init__(self):
        if self.physics_dt <= 0.0 or self.horizon < 1:
            raise ValueError("physics_dt must be positive and horizon >= 1")


@dataclass(frozen=True)
class BimodalReachConfig:
    physics_dt: float = 0.05
    drag: float = 0.1
    goal: tuple[float, float] = (1.0, 0.0)
    horizon: int = 50
    goal_tolerance: float = 0.05
    action_bound: float = 1.0

    def __post_init__(self):
        if self.goal == (0.0, 0.0):
            raise ValueError("bimodal goals must be distinct from the origin")
        if self.physics_dt <= 0.0 or self.horizon < 1:
            raise ValueError("physics_dt must be positive and horizon >= 1")


class _PointPhysics:
    """Shared state arrays and integrator for the two tasks."""

    def __init__(self, n_envs: int, dt: float, drag: float, bound: float):
        if n_envs < 1:
            raise ContractError("need at least one environment")
        self.n_envs = n_envs
        self._dt = dt
        self._drag = drag
        self._bound = bound
        self.pos = np.zeros((n_envs, 2))
        self.vel = np.zeros((n_envs, 2))
        self.t = np.zeros(n_envs, dtype=np.int64)
        # which of the most recent dones were pure time-limit truncations
        self.last_truncated = np.zeros(n_envs, dtype=bool)

    def integrate(self, actions: np.ndarray) -> None:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.n_envs, 2):
            raise ContractError(f"actions must have shape ({self.n_envs}, 2)")
        if not np.all(np.isfinite(actions)):
            raise ContractError("actions must be finite")
        a = np.clip(actions, -self._bound, self._bound)
        self.vel = self.vel + a * self._dt - self._drag * self.vel * self._dt
        self.pos = self.pos + self.vel * self._dt
        self.t = self.t + 1

    def state_arrays(self) -> dict:
        return {"pos": self.pos.copy(), "vel": self.vel.copy(), "t": self.t.copy()}

    def set_state_arrays(self, state: dict) -> None:
        self.pos = np.asarray(state["pos"], dtype=np.float64).copy()
        self.vel = np.asarray(state["vel"], dtype=np.float64).copy()
        self.t = np.asarray(state["t"], dtype=np.int64).copy()


class PointMassEnv:
    """Reach a fixed goal from a random start in a disk around the origin.

    obs = (pos, vel, goal - pos); reward = -||pos' - goal||^2;
    done when within goal_tolerance or at the horizon.
    """

    def __init__(self, cfg: PointMassConfig = PointMassConfig(), n_envs: int = 1):
        self.cfg = cfg
        self.phys = _PointPhysics(n_envs, cfg.physics_dt, cfg.drag, cfg.action_bound)
        self.goal = np.asarray(cfg.goal, dtype=np.float64)

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(6, 2, self.cfg.horizon, self.cfg.action_bound)

    @property
    def n_envs(self) -> int:
        return self.phys.n_envs

    def with_n_envs(self, n_envs: int) -> "PointMassEnv":
        return PointMassEnv(self.cfg, n_envs)

    def observe(self) -> np.ndarray:
        return np.concatenate(
            [self.phys.pos, self.phys.vel, self.goal - self.phys.pos], axis=1
        )

    def reset(self, rng: np.random.Generator, indices=None) -> np.ndarray:
        idx = np.arange(self.n_envs) if indices is None else np.asarray(indices)
        r = self.cfg.start_radius * np.sqrt(rng.uniform(size=idx.size))
        theta = rng.uniform(0.0, 2.0 * np.pi, size=idx.size)
        self.phys.pos[idx, 0] = r * np.cos(theta)
        self.phys.pos[idx, 1] = r * np.sin(theta)
        self.phys.vel[idx] = 0.0
        self.phys.t[idx] = 0
        return self.observe()[idx]

    def step(self, actions: np.ndarray):
        """Advance one step. Does not reset finished envs; callers resolve
        dones (env.phys.last_truncated marks pure time-limit endings)."""
        self.phys.integrate(actions)
        dist = np.linalg.norm(self.phys.pos - self.goal, axis=1)
        rewards = -(dist**2)
        reached = dist < self.cfg.goal_tolerance
        timeout = self.phys.t >= self.cfg.horizon
        dones = reached | timeout
        self.phys.last_truncated = timeout & ~reached
        return self.observe(), rewards, dones


class BimodalReachEnv:
    """Reach either of two goals at +-g; start exactly at the origin.

    obs = (pos, vel); reward = max(-||pos' - g||^2, -||pos' + g||^2);
    done when within tolerance of either goal or at the horizon.
    """

    def __init__(self, cfg: BimodalReachConfig = BimodalReachConfig(), n_envs: int = 1):
        self.cfg = cfg
        self.phys = _PointPhysics(n_envs, cfg.physics_dt, cfg.drag, cfg.action_bound)
        self.goal = np.asarray(cfg.goal, dtype=np.float64)

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(4, 2, self.cfg.horizon, self.cfg.action_bound)

    @property
    def n_envs(self) -> int:
        return self.phys.n_envs

    def with_n_envs(self, n_envs: int) -> "BimodalReachEnv":
        return BimodalReachEnv(self.cfg, n_envs)

    def observe(self) -> np.ndarray:
        return np.concatenate([self.phys.pos, self.phys.vel], axis=1)

    def reset(self, rng: np.random.Generator, indices=None) -> np.ndarray:
        idx = np.arange(self.n_envs) if indices is None else np.asarray(indices)
        self.phys.pos[idx] = 0.0
        self.phys.vel[idx] = 0.0
        self.phys.t[idx] = 0
        return self.observe()[idx]

    def step(self, actions: np.ndarray):
        self.phys.integrate(actions)
        d_pos = np.linalg.norm(self.phys.pos - self.goal, axis=1)
        d_neg = np.linalg.norm(self.phys.pos + self.goal, axis=1)
        nearest = np.minimum(d_pos, d_neg)
        rewards = -(nearest**2)
        reached = nearest < self.cfg.goal_tolerance
        timeout = self.phys.t >= self.cfg.horizon
        dones = reached | timeout
        self.phys.last_truncated = timeout & ~reached
        return self.observe(), rewards, dones

    def nearer_positive_goal(self, pos: np.ndarray) -> np.ndarray:
        """Mode label per row: True when nearer +g than -g."""
        return np.linalg.norm(pos - self.goal, axis=1) < np.linalg.norm(pos + self.goal, axis=1)


def scripted_controller(env: PointMassEnv) -> np.ndarray:
    """Proportional-derivative action toward the goal, clipped by the env.

    Serves as the reference baseline for training acceptance. Only defined
    for the point-mass task.
    """
    if not isinstance(env, PointMassEnv):
        raise ContractError("scripted controller only supports the point-mass task")
    kp, kd = 1.0, 0.9
    raw = kp * (env.goal - env.phys.pos) - kd * env.phys.vel
    return np.clip(raw, -env.cfg.action_bound, env.cfg.action_bound)


def scripted_episode_returns(cfg: PointMassConfig, episodes: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Episode returns of the PD controller from the start distribution;
    their mean is the reference return for training acceptance."""
    env = PointMassEnv(cfg, episodes)
    obs = env.reset(rng)
    active = np.ones(episodes, dtype=bool)
    totals = np.zeros(episodes)
    for _ in range(cfg.horizon):
        _, rewards, dones = env.step(scripted_controller(env))
        totals[active] += rewards[active]
        active &= ~dones
        if not active.any():
            break
    return totals


def make_env(kind: str, n_envs: int, **overrides):
    if kind == "pointmass":
        return PointMassEnv(PointMassConfig(**overrides), n_envs)
    if kind == "bimodal":
        return BimodalReachEnv(BimodalReachConfig(**overrides), n_envs)
    raise ValueError(f"unknown environment kind {kind!r}")
