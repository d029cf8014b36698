"""Scalar training losses.

Sign conventions: the trainer minimizes. The clipped surrogate is the
negated maximization objective; the entropy term is the importance-weighted
expectation of the new log-density transcribed literally (minimizing it
raises entropy); the compression term penalizes the squared gap between the
two dummy-action halves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    ConfigError,
    ContractError,
    Tensor,
    as_tensor,
    clamp,
    exp,
    mean,
    minimum,
    mul,
    square,
)

__all__ = [
    "LossConfig",
    "RATIO_CLAMP",
    "compression_loss",
    "entropy_loss",
    "kl_estimate",
    "ppo_clip_loss",
    "total_policy_loss",
    "value_loss",
]

# overflow guard on exp(new - old); the densities themselves are exact
RATIO_CLAMP = 20.0


@dataclass(frozen=True)
class LossConfig:
    clip: float = 0.2
    entropy_coeff: float = 0.01
    compression_coeff: float = 0.01
    value_coeff: float = 1.0

    def __post_init__(self):
        if self.clip <= 0.0:
            raise ConfigError("surrogate clip must be positive")
        if self.entropy_coeff < 0.0 or self.compression_coeff < 0.0 or self.value_coeff < 0.0:
            raise ConfigError("loss coefficients must be non-negative")


def _check_lengths(a, b, name: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{name}: lengths {a.shape} and {b.shape} differ")


def _ratio(new_logp: Tensor, old_logp: np.ndarray) -> Tensor:
    return exp(clamp(new_logp - Tensor(old_logp), -RATIO_CLAMP, RATIO_CLAMP))


def ppo_clip_loss(new_logp, old_logp, adv, clip: float) -> Tensor:
    """Negated clipped surrogate: -mean(min(r*A, clip(r, 1-eps, 1+eps)*A)).

    old_logp and adv are treated as constants.
    """
    new_t = as_tensor(new_logp)
    old = np.asarray(old_logp, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    _check_lengths(new_t.data, old, "ppo_clip_loss")
    _check_lengths(old, adv, "ppo_clip_loss")
    ratio = _ratio(new_t, old)
    adv_t = Tensor(adv)
    surrogate = minimum(mul(ratio, adv_t), mul(clamp(ratio, 1.0 - clip, 1.0 + clip), adv_t))
    return -mean(surrogate)


def entropy_loss(new_logp, old_logp) -> Tensor:
    """Importance-weighted new log-density: mean(exp(new-old) * new).

    Differentiated through both the weight and the log term.
    """
    new_t = as_tensor(new_logp)
    old = np.asarray(old_logp, dtype=np.float64)
    _check_lengths(new_t.data, old, "entropy_loss")
    return mean(mul(_ratio(new_t, old), new_t))


def kl_estimate(old_logp, new_logp) -> float:
    """Monte Carlo KL(old || new) on samples from the old policy:
    mean(old - new). Monitoring only, no gradients."""
    old = old_logp.data if isinstance(old_logp, Tensor) else np.asarray(old_logp, np.float64)
    new = new_logp.data if isinstance(new_logp, Tensor) else np.asarray(new_logp, np.float64)
    _check_lengths(old, new, "kl_estimate")
    return float(np.mean(old - new))


def compression_loss(x1, y1) -> Tensor:
    """Mean squared gap between the dummy-action halves, over all entries.

    Inputs must be fresh pathwise-differentiable samples from the current
    policy for the gradient to be meaningful.
    """
    xt, yt = as_tensor(x1), as_tensor(y1)
    _check_lengths(xt.data, yt.data, "compression_loss")
    return mean(square(xt - yt))


def total_policy_loss(ppo: Tensor, entropy: Tensor, compression: Tensor, cfg: LossConfig) -> Tensor:
    return ppo + cfg.entropy_coeff * entropy + cfg.compression_coeff * compression


def value_loss(v_pred, returns) -> Tensor:
    """Mean squared error of the critic against the estimated returns."""
    vt = as_tensor(v_pred)
    ret = np.asarray(returns, dtype=np.float64)
    _check_lengths(vt.data, ret, "value_loss")
    return mean(square(vt - Tensor(ret)))
