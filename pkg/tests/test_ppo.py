import numpy as np
import pytest
import torch

from diffusion import DiffusionAgent, DiffusionConfig
from evaluation import build_evaluation_set
from helpers import CheckpointError, ConfigError, DivergenceError
from nets import DTYPE, gradient_check, make_adam
from oracle import OracleConfig
import ppo
from ppo import (
    GaussianPolicy,
    PPOAgent,
    PPOConfig,
    RolloutBatch,
    act,
    clipped_surrogate,
    compute_gae,
    greedy_action,
    normalize_advantages,
    ppo_update,
    squash_correction,
    train_ppo,
)

S, A = 7, 4
TINY = PPOConfig(hidden=(16,), activation="tanh", rollout_steps=16, epochs=2, minibatch=8)


def _gen(seed=0):
    return torch.Generator().manual_seed(seed)


def _rollout(rewards, values, last_value=0.0):
    n = len(rewards)
    return RolloutBatch(
        states=np.zeros((n, S)),
        pre_squash=np.zeros((n, A)),
        actions=np.zeros((n, A)),
        log_probs=np.zeros(n),
        rewards=np.asarray(rewards, dtype=float),
        values=np.asarray(values, dtype=float),
        last_value=last_value,
    )


def _collect(policy, count, seed=0):
    states = np.random.default_rng(seed).uniform(0, 1, (count, S))
    gen = _gen(seed)
    steps = [act(policy, s, gen) for s in states]
    return RolloutBatch(
        states=states,
        pre_squash=np.stack([p.pre_squash for p in steps]),
        actions=np.stack([p.action for p in steps]),
        log_probs=np.array([p.log_prob for p in steps]),
        rewards=np.linspace(-1, 1, count),
        values=np.array([p.value for p in steps]),
    )


# ---------------- policy ----------------
def test_floor_log_std_acts_like_tanh_of_mean():
    policy = GaussianPolicy(S, A, (16,), generator=_gen())
    with torch.no_grad():
        policy.log_std.fill_(-50.0)
    s = np.full(S, 0.3)
    step = act(policy, s, _gen(1))
    assert np.allclose(step.action, greedy_action(policy, s), atol=0.05)
    assert policy.std().min().item() == pytest.approx(np.exp(-5.0))


def test_actions_stay_in_box_and_log_prob_is_finite():
    policy = GaussianPolicy(S, A, (16,), log_std_init=2.0, generator=_gen())
    gen = _gen(2)
    for s in np.random.default_rng(0).uniform(0, 1, (200, S)):
        step = act(policy, s, gen)
        assert np.all(np.abs(step.action) <= 1.0)
        assert np.isfinite(step.log_prob)


def test_squash_correction_is_finite_for_saturated_samples():
    u = torch.tensor([[30.0, -30.0, 0.0, 5.0]], dtype=DTYPE)
    out = squash_correction(u)
    assert torch.isfinite(out).all()
    assert squash_correction(torch.zeros((1, A), dtype=DTYPE)).item() == pytest.approx(0.0, abs=1e-12)


def test_act_is_reproducible():
    policy = GaussianPolicy(S, A, (16,), generator=_gen())
    s = np.full(S, 0.5)
    a, b = act(policy, s, _gen(9)), act(policy, s, _gen(9))
    assert np.array_equal(a.action, b.action) and a.log_prob == b.log_prob


def test_default_policy_gradient_matches_finite_differences():
    cfg = PPOConfig()
    gen = _gen(3)
    policy = GaussianPolicy(S, A, cfg.hidden, cfg.activation, generator=gen)
    states = torch.rand((16, S), generator=gen, dtype=DTYPE)
    u = torch.randn((16, A), generator=gen, dtype=DTYPE)
    err = gradient_check(
        lambda: -policy.log_prob(states, u)[0].mean() + policy.values(states).pow(2).mean(),
        policy.parameters(), generator=gen,
    )
    assert err <= 1e-4


def test_recomputed_log_prob_matches_rollout():
    policy = GaussianPolicy(S, A, (16,), generator=_gen())
    rollout = _collect(policy, 1000)
    logp, _ = policy.log_prob(torch.as_tensor(rollout.states), torch.as_tensor(rollout.pre_squash))
    ratio = torch.exp(logp - torch.as_tensor(rollout.log_probs))
    assert (ratio - 1.0).abs().max().item() <= 1e-9


# ---------------- advantages ----------------
def test_gae_with_zero_lambda_is_one_step_td():
    r = _rollout([1.0, 0.0, 2.0], [0.5, 0.25, 1.0], last_value=0.5)
    adv, ret = compute_gae(r, gamma=0.5, lam=0.0)
    assert adv.tolist() == [1.0 + 0.125 - 0.5, 0.0 + 0.5 - 0.25, 2.0 + 0.25 - 1.0]
    assert np.array_equal(ret, adv + r.values)


def test_gae_with_zero_discount_is_reward_minus_value():
    r = _rollout([1.0, 0.0, 2.0], [0.5, 0.25, 1.0])
    adv, _ = compute_gae(r, gamma=0.0, lam=0.95)
    assert adv.tolist() == [0.5, -0.25, 1.0]


def test_gae_vanishes_at_the_value_fixed_point():
    # V = r / (1 - gamma) = 2 for r = 1, gamma = 0.5
    r = _rollout([1.0] * 5, [2.0] * 5, last_value=2.0)
    adv, ret = compute_gae(r, gamma=0.5, lam=0.9)
    assert adv.tolist() == [0.0] * 5
    assert ret.tolist() == [2.0] * 5


def test_gae_fixed_point_property():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        gamma, lam = rng.uniform(0.0, 0.99), rng.uniform(0.0, 1.0)
        value = rng.uniform(-10.0, 10.0)
        n = int(rng.integers(1, 20))
        r = _rollout([value * (1.0 - gamma)] * n, [value] * n, last_value=value)
        adv, ret = compute_gae(r, gamma=gamma, lam=lam)
        assert np.abs(adv).max() <= 1e-9
        assert np.allclose(ret, value, atol=1e-9)


def test_gae_hand_computed():
    r = _rollout([1.0, 0.0, 2.0], [0.5, 0.25, 1.0])
    adv, ret = compute_gae(r, gamma=0.5, lam=0.5)
    assert adv.tolist() == [0.75, 0.5, 1.0]
    assert ret.tolist() == [1.25, 0.75, 2.0]
    assert r.advantages is adv


def test_rollout_validation():
    with pytest.raises(ValueError):
        RolloutBatch(np.zeros((2, S)), np.zeros((2, A)), np.zeros((2, A)), np.zeros(2), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        compute_gae(_rollout([], []), 0.9, 0.9)


def test_normalize_advantages():
    out = normalize_advantages(np.array([1.0, 2.0, 3.0, 4.0]))
    assert out.mean() == pytest.approx(0.0, abs=1e-12)
    assert out.std() == pytest.approx(1.0, rel=1e-6)
    assert normalize_advantages(np.full(3, 5.0)).tolist() == [0.0, 0.0, 0.0]


# ---------------- surrogate ----------------
def test_surrogate_at_unit_ratio_is_mean_advantage():
    adv = torch.tensor([1.0, -2.0, 4.0], dtype=DTYPE)
    assert clipped_surrogate(torch.ones(3, dtype=DTYPE), adv, 0.2).item() == pytest.approx(1.0)
    assert clipped_surrogate(torch.ones(3, dtype=DTYPE), torch.zeros(3, dtype=DTYPE), 0.2).item() == 0.0


def test_zero_clip_range_blocks_gradient_on_the_clipped_side():
    ratio = torch.tensor([0.5, 1.5], dtype=DTYPE, requires_grad=True)
    adv = torch.ones(2, dtype=DTYPE)
    clipped_surrogate(ratio, adv, 0.0).backward()
    assert ratio.grad.tolist() == [0.5, 0.0]


def test_positive_advantage_gain_is_capped():
    adv = torch.ones(1, dtype=DTYPE)
    assert clipped_surrogate(torch.tensor([3.0], dtype=DTYPE), adv, 0.2).item() == pytest.approx(1.2)


# ---------------- update ----------------
def test_ppo_update_diagnostics():
    policy = GaussianPolicy(S, A, (16,), "tanh", generator=_gen())
    rollout = _collect(policy, 32)
    diag = ppo_update(policy, rollout, TINY, make_adam(policy.parameters(), 1e-3), np.random.default_rng(0))
    assert diag.first_ratio_deviation <= 1e-9
    assert all(np.isfinite(v) for v in (diag.policy_loss, diag.value_loss, diag.entropy, diag.approx_kl))
    assert 0.0 <= diag.clip_fraction <= 1.0


def test_ppo_update_with_zero_learning_rate_keeps_parameters():
    policy = GaussianPolicy(S, A, (16,), generator=_gen())
    before = [p.detach().clone() for p in policy.parameters()]
    ppo_update(policy, _collect(policy, 16), TINY, make_adam(policy.parameters(), 0.0), np.random.default_rng(0))
    assert all(torch.equal(b, p) for b, p in zip(before, policy.parameters()))


def test_config_validation():
    with pytest.raises(ConfigError, match="ppo.gamma"):
        PPOConfig(gamma=1.0)
    with pytest.raises(ConfigError, match="log_std_init"):
        PPOConfig(log_std_init=3.0)


# ---------------- training ----------------
@pytest.fixture
def tiny_eval(sampler, econ):
    return build_evaluation_set(np.random.default_rng(5), sampler, 5, econ, OracleConfig(L_grid_points=8, refine_rounds=0))


def test_training_smoke(sampler, econ, tiny_eval):
    result = train_ppo(sampler, econ, TINY, seed=0, steps=40, eval_set=tiny_eval, eval_every=20)
    assert [row.step for row in result.curves] == [20, 40]
    assert {row.algo for row in result.curves} == {"ppo"}
    # rollouts of 16, 16 and a final partial 8
    assert len(result.losses["policy"]) == 3
    assert all(np.isfinite(v) for v in result.losses["value"])


def test_training_is_deterministic(sampler, econ, tiny_eval):
    a = train_ppo(sampler, econ, TINY, seed=1, steps=32, eval_set=tiny_eval, eval_every=16)
    b = train_ppo(sampler, econ, TINY, seed=1, steps=32, eval_set=tiny_eval, eval_every=16)
    assert a.curves == b.curves


def test_checkpoint_round_trip(tmp_path, sampler, econ, tiny_eval):
    agent = PPOAgent(sampler, econ, TINY, seed=2)
    with torch.no_grad():
        agent.policy.log_std.fill_(-1.25)
    path = agent.save(tmp_path / "ppo_seed2.npz")
    loaded = PPOAgent.load(path, sampler, econ, TINY)
    assert loaded.policy.log_std.tolist() == [-1.25] * A
    assert loaded.propose_menus(tiny_eval.states) == agent.propose_menus(tiny_eval.states)


def test_loading_a_diffusion_checkpoint_as_ppo_fails(tmp_path, sampler, econ):
    cfg = DiffusionConfig(hidden=(8,), critic_hidden=(8,), batch_size=4, buffer_capacity=8)
    path = DiffusionAgent(sampler, econ, cfg).save(tmp_path / "d.npz")
    with pytest.raises(CheckpointError):
        PPOAgent.load(path, sampler, econ, TINY)


def test_training_stops_on_non_finite_parameters(monkeypatch, sampler, econ, tiny_eval):
    real_update = ppo.ppo_update

    def poisoned(policy, *args, **kwargs):
        diag = real_update(policy, *args, **kwargs)
        with torch.no_grad():
            policy.value.layers[0].weight.fill_(float("nan"))
        return diag

    monkeypatch.setattr(ppo, "ppo_update", poisoned)
    with pytest.raises(DivergenceError, match="step 20"):
        train_ppo(sampler, econ, TINY, seed=0, steps=40, eval_set=tiny_eval, eval_every=20)
