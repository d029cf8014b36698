import hypothesis
import numpy as np
import pytest

from genpo.flow import VelocityNetParams, init_velocity_net
from genpo.numerics import Tensor

hypothesis.settings.register_profile(
    "default", deadline=None, max_examples=40, derandomize=True
)
hypothesis.settings.load_profile("default")


def zero_final_layer(params: VelocityNetParams, bias: float = 0.0) -> VelocityNetParams:
    """Make the velocity field constant: zero the trunk output layer's
    weights and set its bias (v == bias everywhere)."""
    ps = params.parameters()
    ps[-2] = Tensor(np.zeros_like(ps[-2].data))
    ps[-1] = Tensor(np.full_like(ps[-1].data, bias))
    return params.with_parameters(ps)


def constant_velocity_net(rng, cfg, bias_vector) -> VelocityNetParams:
    """Net whose velocity is a fixed vector, independent of all inputs."""
    params = init_velocity_net(rng, cfg, hidden=(8,), embed_dim=4, embed_hidden=(4,))
    ps = params.parameters()
    ps[-2] = Tensor(np.zeros_like(ps[-2].data))
    ps[-1] = Tensor(np.asarray(bias_vector, dtype=np.float64))
    return params.with_parameters(ps)


@pytest.fixture
def rng():
    from genpo.numerics import make_rng

    return make_rng(2024)
