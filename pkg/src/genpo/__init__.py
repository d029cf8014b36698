"""On-policy RL with an exactly invertible coupled-flow policy.

The policy maps a doubled Gaussian noise vector through alternating shear
and mixing steps, which makes the action density exact (change of
variables with a constant Jacobian determinant) and lets PPO-style updates
use true log-likelihoods, unbiased entropy/KL estimates, a KL-adaptive
learning rate, and a compression penalty on the two action halves.
"""

from .envs import (
    BimodalReachConfig,
    BimodalReachEnv,
    EnvSpec,
    PointMassConfig,
    PointMassEnv,
    make_env,
    scripted_controller,
)
from .flow import (
    DummyAction,
    FlowConfig,
    FlowPolicy,
    NoisePair,
    VelocityNetParams,
    act,
    dummy_entropy,
    forward_invert,
    init_velocity_net,
    log_prob,
    reverse_sample,
    sample_pathwise,
    time_embed,
    velocity,
)
from .numerics import (
    ConfigError,
    ContractError,
    DimensionError,
    GradTape,
    Mlp,
    NumericError,
    Tensor,
    make_rng,
    no_grad,
    sample_standard_normal,
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
    RolloutBuffer,
    collect_rollout,
    compute_gae,
    minibatches,
    normalize_advantages,
)
from .trainer import (
    EvalReport,
    TrainConfig,
    TrainState,
    Trainer,
    adapt_lr,
    evaluate,
    train,
    update_epochs,
)

__version__ = "0.1.0"
