import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import constant_velocity_net, zero_final_layer
from genpo.flow import FlowConfig, FlowPolicy, init_velocity_net
from genpo.numerics import ContractError, GradTape, Tensor, make_rng
from genpo.objectives import (
    LossConfig,
    compression_loss,
    entropy_loss,
    kl_estimate,
    ppo_clip_loss,
    total_policy_loss,
    value_loss,
)

LOG_2PI_E = math.log(2.0 * math.pi * math.e)


def test_loss_config_defaults_and_validation():
    cfg = LossConfig()
    assert (cfg.clip, cfg.entropy_coeff, cfg.compression_coeff, cfg.value_coeff) == (
        0.2,
        0.01,
        0.01,
        1.0,
    )
    with pytest.raises(Exception):
        LossConfig(clip=0.0)
    with pytest.raises(Exception):
        LossConfig(entropy_coeff=-1.0)


# ---------------------------------------------------------------------------
# clipped surrogate

def test_ppo_clip_unit_ratio():
    loss = ppo_clip_loss([0.0, 0.0], [0.0, 0.0], [2.0, 2.0], 0.2)
    assert loss.item() == -2.0


def test_ppo_clip_upper_branch():
    # ratio 2 clipped to 1.2 with A = 1
    loss = ppo_clip_loss([math.log(2.0)], [0.0], [1.0], 0.2)
    assert loss.item() == -1.2


def test_ppo_clip_pessimistic_branch():
    # ratio 0.5 with A = -1: min(-0.5, -0.8) = -0.8
    loss = ppo_clip_loss([math.log(0.5)], [0.0], [-1.0], 0.2)
    assert loss.item() == 0.8


def test_ppo_clip_length_mismatch():
    with pytest.raises(ContractError):
        ppo_clip_loss([0.0, 0.0], [0.0], [1.0], 0.2)


def test_ppo_clip_gradient_at_anchor_matches_unclipped_surrogate():
    # at new == old the clip is inactive: gradient equals that of -mean(r*A)
    rng = make_rng(0)
    old = rng.standard_normal(16)
    adv = rng.standard_normal(16)
    new = Tensor(old.copy())
    with GradTape() as tape:
        loss = ppo_clip_loss(new, old, adv, 0.2)
    (g_clip,) = tape.gradient(loss, [new])
    new2 = Tensor(old.copy())
    with GradTape() as tape:
        from genpo.numerics import exp, mean, mul

        plain = -mean(mul(exp(new2 - Tensor(old)), Tensor(adv)))
    (g_plain,) = tape.gradient(plain, [new2])
    npt.assert_allclose(g_clip, g_plain, atol=1e-12)


# ---------------------------------------------------------------------------
# entropy estimator

def test_entropy_loss_unit_ratios():
    assert entropy_loss([-1.0, -3.0], [-1.0, -3.0]).item() == -2.0


@given(st.floats(-5.0, 5.0))
def test_entropy_loss_single_sample_ratio_two(o):
    out = entropy_loss([o + math.log(2.0)], [o])
    assert out.item() == pytest.approx(2.0 * (o + math.log(2.0)), rel=1e-12, abs=1e-12)


def test_entropy_loss_identity_policy_converges_to_gaussian_entropy():
    # v == 0, p = 1, d = 1: on-policy -entropy_loss -> log(2*pi*e) within 1%
    rng = make_rng(1)
    cfg = FlowConfig(state_dim=3, action_dim=1, steps=2, mixing=1.0)
    policy = FlowPolicy(
        zero_final_layer(init_velocity_net(rng, cfg, hidden=(8,), embed_dim=4, embed_hidden=(4,))),
        cfg,
    )
    states = np.zeros((100_000, 3))
    _, _, logp = policy.act(states, rng)
    est = -entropy_loss(logp, logp).item()
    assert est == pytest.approx(1.0 * LOG_2PI_E, rel=0.01)


def test_entropy_loss_length_mismatch():
    with pytest.raises(ContractError):
        entropy_loss([0.0], [0.0, 1.0])


# ---------------------------------------------------------------------------
# KL estimator

def test_kl_estimate_identical_policies_exactly_zero():
    logp = make_rng(2).standard_normal(1000)
    assert kl_estimate(logp, logp) == 0.0


def test_kl_estimate_hand_arithmetic():
    assert kl_estimate([0.0, -1.0], [-1.0, -1.0]) == pytest.approx(0.5)


def test_kl_estimate_constant_shift_flow_pair():
    # identity flows differing by constant velocity mu in one action
    # coordinate: both dummy halves shift by mu, so the true KL is
    # ||(mu, mu)||^2 / 2 = mu^2 (closed-form Gaussian KL)
    rng = make_rng(3)
    mu = 0.5
    cfg = FlowConfig(state_dim=3, action_dim=1, steps=4, mixing=1.0)
    old_net = constant_velocity_net(rng, cfg, [0.0])
    new_net = constant_velocity_net(rng, cfg, [mu])
    old_policy = FlowPolicy(old_net, cfg)
    new_policy = FlowPolicy(new_net, cfg)
    states = np.zeros((100_000, 3))
    dummy = old_policy.sample(states, rng)
    old_lp = old_policy.log_prob(states, dummy).data
    new_lp = new_policy.log_prob(states, dummy).data
    est = kl_estimate(old_lp, new_lp)
    se = float(np.std(old_lp - new_lp, ddof=1) / math.sqrt(states.shape[0]))
    assert abs(est - mu * mu) <= 3.0 * se


def test_kl_estimate_gibbs_nonnegative_for_distinct_policies():
    # E[old - new] >= 0 for samples from old, any fixed pair (3-sigma band)
    rng = make_rng(4)
    cfg = FlowConfig(state_dim=3, action_dim=2, steps=3, mixing=0.9)
    old_policy = FlowPolicy(
        init_velocity_net(rng, cfg, hidden=(8,), embed_dim=4, embed_hidden=(4,)), cfg
    )
    new_policy = FlowPolicy(
        init_velocity_net(rng, cfg, hidden=(8,), embed_dim=4, embed_hidden=(4,)), cfg
    )
    states = np.zeros((100_000, 3))
    dummy = old_policy.sample(states, rng)
    old_lp = old_policy.log_prob(states, dummy).data
    new_lp = new_policy.log_prob(states, dummy).data
    se = float(np.std(old_lp - new_lp, ddof=1) / math.sqrt(states.shape[0]))
    assert kl_estimate(old_lp, new_lp) >= -3.0 * se


# ---------------------------------------------------------------------------
# compression

def test_compression_loss_examples():
    assert compression_loss(np.ones((3, 2)), np.ones((3, 2))).item() == 0.0
    assert compression_loss([[1.0]], [[0.0]]).item() == 1.0
    assert compression_loss([[1.0, 0.0]], [[0.0, 0.0]]).item() == 0.5


@given(st.integers(0, 1000))
def test_compression_loss_nonnegative_zero_iff_equal(seed):
    rng = make_rng(seed)
    x = rng.standard_normal((4, 3))
    y = rng.standard_normal((4, 3))
    val = compression_loss(x, y).item()
    assert val >= 0.0
    assert (val == 0.0) == bool(np.array_equal(x, y))


# ---------------------------------------------------------------------------
# total loss

def test_total_policy_loss_reduces_to_ppo():
    cfg = LossConfig(entropy_coeff=0.0, compression_coeff=0.0)
    total = total_policy_loss(Tensor(1.5), Tensor(9.0), Tensor(-3.0), cfg)
    assert total.item() == 1.5


def test_total_policy_loss_arithmetic():
    cfg = LossConfig(entropy_coeff=0.01, compression_coeff=0.01)
    total = total_policy_loss(Tensor(1.0), Tensor(2.0), Tensor(3.0), cfg)
    assert total.item() == pytest.approx(1.05)


def test_total_policy_loss_gradient_is_sum_of_part_gradients():
    rng = make_rng(5)
    cfg = FlowConfig(state_dim=3, action_dim=2, steps=2, mixing=0.9)
    net = init_velocity_net(rng, cfg, hidden=(8,), embed_dim=4, embed_hidden=(4,))
    policy = FlowPolicy(net, cfg)
    states = rng.standard_normal((16, 3))
    dummy = policy.sample(states, rng)
    old_lp = policy.log_prob(states, dummy).data
    adv = rng.standard_normal(16)
    lcfg = LossConfig(entropy_coeff=0.3, compression_coeff=0.7)
    from genpo.flow import NoisePair, sample_pathwise

    noise = NoisePair(rng.standard_normal((16, 2)), rng.standard_normal((16, 2)))
    params = net.parameters()

    def forward():
        new_lp = policy.log_prob(states, dummy)
        ppo = ppo_clip_loss(new_lp, old_lp, adv, lcfg.clip)
        ent = entropy_loss(new_lp, old_lp)
        x1, y1 = sample_pathwise(net, states, noise, cfg)
        comp = compression_loss(x1, y1)
        return ppo, ent, comp

    with GradTape() as tape:
        ppo, ent, comp = forward()
        total = total_policy_loss(ppo, ent, comp, lcfg)
    g_total = tape.gradient(total, params)

    separate = []
    for which in range(3):
        with GradTape() as tape:
            parts = forward()
            loss = parts[which]
        separate.append(tape.gradient(loss, params))
    for gt, g0, g1, g2 in zip(g_total, *separate):
        npt.assert_allclose(gt, g0 + 0.3 * g1 + 0.7 * g2, atol=1e-10)


# ---------------------------------------------------------------------------
# value regression

def test_value_loss_examples():
    assert value_loss([1.0, 2.0], [1.0, 2.0]).item() == 0.0
    assert value_loss([0.0], [2.0]).item() == 4.0
    assert value_loss([1.0, 3.0], [0.0, 0.0]).item() == 5.0


def test_value_loss_length_mismatch():
    with pytest.raises(ContractError):
        value_loss([0.0], [1.0, 2.0])


# ---------------------------------------------------------------------------
# batch-axis symmetry

@given(st.integers(0, 500))
def test_losses_are_permutation_invariant(seed):
    rng = make_rng(seed)
    n = 12
    new = rng.standard_normal(n)
    old = rng.standard_normal(n)
    adv = rng.standard_normal(n)
    perm = rng.permutation(n)
    assert ppo_clip_loss(new, old, adv, 0.2).item() == pytest.approx(
        ppo_clip_loss(new[perm], old[perm], adv[perm], 0.2).item(), rel=1e-12
    )
    assert entropy_loss(new, old).item() == pytest.approx(
        entropy_loss(new[perm], old[perm]).item(), rel=1e-12
    )
    assert kl_estimate(old, new) == pytest.approx(kl_estimate(old[perm], new[perm]), rel=1e-12)
    x = rng.standard_normal((n, 2))
    y = rng.standard_normal((n, 2))
    assert compression_loss(x, y).item() == pytest.approx(
        compression_loss(x[perm], y[perm]).item(), rel=1e-12
    )
