"""Outer training loop: collect, estimate advantages, run K update epochs
with a KL-adaptive learning rate, update the policy and the critic.

The learning-rate rule halves alpha when the measured KL reaches twice the
target and doubles it when the KL falls below half the target, clamped to
[lr_min, lr_max]. KL is measured once per update epoch on the whole buffer.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .envs import BimodalReachEnv
from .flow import (
    DummyAction,
    FlowConfig,
    FlowPolicy,
    NoisePair,
    init_velocity_net,
    log_prob,
    sample_pathwise,
)
from .numerics import (
    ConfigError,
    GradTape,
    Mlp,
    Tensor,
    apply_mlp,
    init_mlp,
    make_rng,
    mlp_parameters,
    mlp_with_parameters,
    no_grad,
    reshape,
)
from .objectives import (
    LossConfig,
    compression_loss,
    entropy_loss,
    kl_estimate,
    ppo_clip_loss,
    total_policy_loss,
    value_loss,
)
from .rollout import (
    EpisodeTracker,
    GaeConfig,
    collect_rollout,
    compute_gae,
    minibatches,
    normalize_advantages,
)

__all__ = [
    "AdamState",
    "EvalReport",
    "TrainConfig",
    "TrainState",
    "Trainer",
    "adapt_lr",
    "adam_step",
    "clip_global_norm",
    "evaluate",
    "init_adam",
    "train",
    "update_epochs",
]


@dataclass
class TrainConfig:
    flow: FlowConfig
    iterations: int = 300
    steps_per_env: int = 64
    update_epochs: int = 5
    minibatch_size: int = 128
    learning_rate: float = 1e-3
    kl_target: float = 0.01
    lr_min: float = 1e-5
    lr_max: float = 1e-2
    loss: LossConfig = field(default_factory=LossConfig)
    gae: GaeConfig = field(default_factory=GaeConfig)
    seed: int = 0
    n_envs: int = 4
    normalize_adv: bool = True
    grad_clip_norm: float = 1.0
    actor_hidden: tuple[int, ...] = (32, 32)
    critic_hidden: tuple[int, ...] = (64, 64)
    time_embed_dim: int = 16
    time_embed_hidden: tuple[int, ...] = (32,)

    def __post_init__(self):
        if self.iterations < 0 or self.steps_per_env < 0 or self.update_epochs < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.minibatch_size <= 0 or self.n_envs <= 0:
            raise ConfigError("minibatch_size and n_envs must be positive")
        if self.learning_rate <= 0 or self.kl_target <= 0:
            raise ConfigError("learning_rate and kl_target must be positive")
        if not (0 < self.lr_min <= self.learning_rate <= self.lr_max):
            raise ConfigError("need lr_min <= learning_rate <= lr_max, all positive")
        if self.grad_clip_norm <= 0:
            raise ConfigError("grad_clip_norm must be positive")


@dataclass
class TrainState:
    policy: FlowPolicy
    value_net: Mlp
    actor_opt: "AdamState"
    critic_opt: "AdamState"
    lr: float
    iteration: int = 0
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def init_adam(params: list[Tensor]) -> AdamState:
    return AdamState(
        [np.zeros_like(p.data) for p in params],
        [np.zeros_like(p.data) for p in params],
    )


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> list[Tensor]:
    """One adaptive-moment update; returns fresh parameter tensors."""
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    updated = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        updated.append(Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps)))
    return updated


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return [g * scale for g in grads]


# ---------------------------------------------------------------------------
# learning-rate adaptation

def adapt_lr(kl: float, lr: float, kl_target: float,
             lr_min: float = 1e-5, lr_max: float = 1e-2) -> float:
    """Halve when kl >= 2*target, double when kl <= target/2, else keep."""
    if lr <= 0.0:
        raise ConfigError("learning rate must be positive")
    if not math.isfinite(kl):
        warnings.warn("non-finite KL estimate; leaving the learning rate unchanged")
        return lr
    if kl >= 2.0 * kl_target:
        lr = lr / 2.0
    elif kl <= 0.5 * kl_target:
        lr = 2.0 * lr
    return min(max(lr, lr_min), lr_max)


# ---------------------------------------------------------------------------
# update phase

def _value_batch(value_net: Mlp, obs: np.ndarray) -> np.ndarray:
    with no_grad():
        out = apply_mlp(value_net, Tensor(np.asarray(obs, dtype=np.float64)))
    return out.data[:, 0]


def update_epochs(buffer, state: TrainState, cfg: TrainConfig, rng) -> dict:
    """K epochs of minibatch steps on the policy and value losses.

    Mutates ``state`` (parameters are replaced functionally); returns the
    iteration's update statistics.
    """
    if buffer.advantages is None or buffer.returns is None:
        raise ConfigError("buffer needs advantages/returns; run compute_gae first")
    fcfg = state.policy.cfg
    d = fcfg.action_dim
    flat_states = buffer.flat("states")
    flat_dummy = buffer.flat("dummy_actions")
    actions = DummyAction(flat_dummy[:, :d].copy(), flat_dummy[:, d:].copy())
    flat_old = buffer.flat("old_logp")
    adv = buffer.flat("advantages")
    if cfg.normalize_adv:
        adv = normalize_advantages(adv)
    rets = buffer.flat("returns")

    parts_acc = {"ppo": 0.0, "entropy": 0.0, "compression": 0.0, "value": 0.0, "total": 0.0}
    n_batches = 0
    kl = 0.0
    for epoch in range(cfg.update_epochs):
        with no_grad():
            current_logp = log_prob(state.policy.params, flat_states, actions, fcfg).data
        kl = kl_estimate(flat_old, current_logp)
        state.lr = adapt_lr(kl, state.lr, cfg.kl_target, cfg.lr_min, cfg.lr_max)

        for batch_idx, idx in enumerate(minibatches(buffer, cfg.minibatch_size, rng)):
            mb_states = flat_states[idx]
            mb_actions = DummyAction(actions.x[idx], actions.y[idx])
            noise = NoisePair(
                rng.standard_normal((idx.size, d)), rng.standard_normal((idx.size, d))
            )
            try:
                with GradTape() as tape:
                    new_logp = log_prob(state.policy.params, mb_states, mb_actions, fcfg)
                    ppo = ppo_clip_loss(new_logp, flat_old[idx], adv[idx], cfg.loss.clip)
                    ent = entropy_loss(new_logp, flat_old[idx])
                    x1, y1 = sample_pathwise(state.policy.params, mb_states, noise, fcfg)
                    comp = compression_loss(x1, y1)
                    total = total_policy_loss(ppo, ent, comp, cfg.loss)
                actor_params = state.policy.params.parameters()
                grads = clip_global_norm(
                    tape.gradient(total, actor_params), cfg.grad_clip_norm
                )
                state.policy.params = state.policy.params.with_parameters(
                    adam_step(actor_params, grads, state.actor_opt, state.lr)
                )

                with GradTape() as tape:
                    v_pred = reshape(apply_mlp(state.value_net, Tensor(mb_states)), (idx.size,))
                    v_loss = cfg.loss.value_coeff * value_loss(v_pred, rets[idx])
                critic_params = mlp_parameters(state.value_net)
                vgrads = clip_global_norm(
                    tape.gradient(v_loss, critic_params), cfg.grad_clip_norm
                )
                state.value_net = mlp_with_parameters(
                    state.value_net, iter(adam_step(critic_params, vgrads, state.critic_opt, state.lr))
                )
            except FloatingPointError as err:
                raise RuntimeError(
                    f"numeric failure in epoch {epoch}, minibatch {batch_idx}: {err}"
                ) from err

            parts_acc["ppo"] += float(ppo.data)
            parts_acc["entropy"] += float(ent.data)
            parts_acc["compression"] += float(comp.data)
            parts_acc["value"] += float(v_loss.data)
            parts_acc["total"] += float(total.data)
            n_batches += 1

    stats = {k: (v / n_batches if n_batches else 0.0) for k, v in parts_acc.items()}
    stats["kl"] = kl
    return stats


# ---------------------------------------------------------------------------
# trainer

class Trainer:
    """Owns the run: parameters, optimizer moments, env state, and the RNG
    chain. All randomness after construction flows through ``self.rng`` in a
    fixed order, which makes runs and checkpoint resumes bit-reproducible."""

    def __init__(self, cfg: TrainConfig, env):
        spec = env.spec
        if spec.obs_dim != cfg.flow.state_dim or spec.act_dim != cfg.flow.action_dim:
            raise ConfigError(
                f"flow dims ({cfg.flow.state_dim}, {cfg.flow.action_dim}) do not match "
                f"env dims ({spec.obs_dim}, {spec.act_dim})"
            )
        if env.n_envs != cfg.n_envs:
            raise ConfigError("env instance and config disagree on n_envs")
        self.cfg = cfg
        self.env = env
        init_ss, run_ss = np.random.SeedSequence(cfg.seed).spawn(2)
        init_rng = make_rng(init_ss)
        self.rng = make_rng(run_ss)

        params = init_velocity_net(
            init_rng, cfg.flow, cfg.actor_hidden, cfg.time_embed_dim, cfg.time_embed_hidden
        )
        value_net = init_mlp(init_rng, [spec.obs_dim, *cfg.critic_hidden, 1])
        self.state = TrainState(
            policy=FlowPolicy(params, cfg.flow),
            value_net=value_net,
            actor_opt=init_adam(params.parameters()),
            critic_opt=init_adam(mlp_parameters(value_net)),
            lr=cfg.learning_rate,
        )
        self.tracker = EpisodeTracker.for_envs(cfg.n_envs)
        self._last_return_mean: float | None = None
        env.reset(self.rng)

    def value_fn(self, obs: np.ndarray) -> np.ndarray:
        return _value_batch(self.state.value_net, obs)

    def train_iteration(self) -> dict:
        cfg = self.cfg
        buffer, bootstrap = collect_rollout(
            self.state.policy, self.env, cfg.steps_per_env, self.rng,
            self.value_fn, cfg.gae.gamma, self.tracker,
        )
        buffer.advantages, buffer.returns = compute_gae(
            buffer.rewards, buffer.values, buffer.dones, bootstrap, cfg.gae
        )
        try:
            stats = update_epochs(buffer, self.state, cfg, self.rng)
        except RuntimeError as err:
            raise RuntimeError(f"iteration {self.state.iteration}: {err}") from err

        completed = self.tracker.drain_completed()
        if completed:
            self._last_return_mean = float(np.mean(completed))
        d = cfg.flow.action_dim
        flat_dummy = buffer.flat("dummy_actions")
        gap = flat_dummy[:, :d] - flat_dummy[:, d:]
        row = {
            "iteration": self.state.iteration,
            "return_mean": self._last_return_mean,
            "episodes_completed": len(completed),
            "kl": stats["kl"],
            "entropy_estimate": float(-buffer.flat("old_logp").mean()) if buffer.total else 0.0,
            "loss_ppo": stats["ppo"],
            "loss_entropy": stats["entropy"],
            "loss_compression": stats["compression"],
            "loss_value": stats["value"],
            "loss_total": stats["total"],
            "lr": self.state.lr,
            "mean_sq_gap": float((gap * gap).mean()) if buffer.total else 0.0,
        }
        self.state.iteration += 1
        self.state.history.append(row)
        return row

    def run(self, n_iterations: int | None = None, sink=None) -> list[dict]:
        n = self.cfg.iterations if n_iterations is None else n_iterations
        for _ in range(n):
            row = self.train_iteration()
            if sink is not None:
                sink(row)
        return self.state.history

    # -- checkpointable state (saved at iteration boundaries) --------------

    def state_dict(self) -> dict:
        s = self.state
        return {
            "iteration": s.iteration,
            "lr": s.lr,
            "params": {
                "velocity_trunk": [t.data for t in mlp_parameters(s.policy.params.trunk)],
                "time_embed_mlp": [t.data for t in mlp_parameters(s.policy.params.time_mlp)],
                "value_net": [t.data for t in mlp_parameters(s.value_net)],
            },
            "optimizer": {
                "actor": {"m": s.actor_opt.m, "v": s.actor_opt.v, "step": s.actor_opt.step},
                "critic": {"m": s.critic_opt.m, "v": s.critic_opt.v, "step": s.critic_opt.step},
            },
            "rng": self.rng.bit_generator.state,
            "env": self.env.phys.state_arrays(),
            "episode_returns": self.tracker.running_return,
            "last_return_mean": self._last_return_mean,
        }

    def load_state_dict(self, sd: dict) -> None:
        s = self.state
        s.iteration = int(sd["iteration"])
        s.lr = float(sd["lr"])
        tensors = [Tensor(a) for a in sd["params"]["time_embed_mlp"]] + [
            Tensor(a) for a in sd["params"]["velocity_trunk"]
        ]
        s.policy.params = s.policy.params.with_parameters(tensors)
        s.value_net = mlp_with_parameters(
            s.value_net, iter(Tensor(a) for a in sd["params"]["value_net"])
        )
        for opt, key in ((s.actor_opt, "actor"), (s.critic_opt, "critic")):
            opt.m = [np.asarray(a, dtype=np.float64) for a in sd["optimizer"][key]["m"]]
            opt.v = [np.asarray(a, dtype=np.float64) for a in sd["optimizer"][key]["v"]]
            opt.step = int(sd["optimizer"][key]["step"])
        self.rng.bit_generator.state = sd["rng"]
        self.env.phys.set_state_arrays(sd["env"])
        self.tracker.running_return = np.asarray(sd["episode_returns"], dtype=np.float64).copy()
        self._last_return_mean = sd["last_return_mean"]


def train(cfg: TrainConfig, env, sink=None) -> list[dict]:
    """Run the full configured loop; returns the metrics history."""
    return Trainer(cfg, env).run(sink=sink)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    mean_return: float
    returns: np.ndarray
    mode_fractions: tuple[float, float] | None = None


def evaluate(policy: FlowPolicy, env, episodes: int, rng) -> EvalReport:
    """Stochastic rollouts, one vectorized episode per requested slot. For
    the bimodal task also reports the fraction of episodes ending nearer
    each of the two goals."""
    if episodes == 0:
        return EvalReport(float("nan"), np.zeros(0), None)
    arena = env.with_n_envs(episodes)
    obs = arena.reset(rng)
    active = np.ones(episodes, dtype=bool)
    ep_return = np.zeros(episodes)
    endpoint = np.zeros((episodes, 2))
    for _ in range(arena.spec.max_episode_steps):
        actions, _, _ = policy.act(obs, rng)
        obs, rewards, dones = arena.step(actions)
        ep_return[active] += rewards[active]
        finishing = active & dones
        endpoint[finishing] = arena.phys.pos[finishing]
        active &= ~dones
        if not active.any():
            break
    fractions = None
    if isinstance(arena, BimodalReachEnv):
        pos_frac = float(arena.nearer_positive_goal(endpoint).mean())
        fractions = (pos_frac, 1.0 - pos_frac)
    return EvalReport(float(ep_return.mean()), ep_return, fractions)
