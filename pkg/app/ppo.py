"""
PPO baseline over the same state encoding, action box and reward signal as
the diffusion policy.

Actions are tanh-squashed Gaussians; rollouts store the pre-squash sample u
so the log-density (with its tanh correction) is recomputed exactly at
update time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from evaluation import CurveRow, EvaluationSet, TrainingResult, curve_row, evaluate_policy
from helpers import CheckpointError, ConfigError, DivergenceError, derive_seed
from market import (
    ContractMenu,
    EconParams,
    MarketState,
    SamplerConfig,
    action_to_menu,
    encode_state,
    reward_signal,
    sample_state,
)
from nets import DTYPE, adam_step, as_tensor, load_checkpoint, make_adam, mlp, save_checkpoint

logger = logging.getLogger(__name__)

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG2 = math.log(2.0)


@dataclass(frozen=True)
class PPOConfig:
    hidden: Tuple[int, ...] = (256, 256)
    activation: str = "relu"
    lr: float = 3e-4
    gamma: float = 0.95
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    rollout_steps: int = 2048
    epochs: int = 10
    minibatch: int = 256
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    log_std_init: float = 0.0
    reward_scale: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.lr < 0:
            raise ConfigError(f"ppo.lr must be >= 0, got {self.lr}")
        if not 0 <= self.gamma < 1:
            raise ConfigError(f"ppo.gamma must lie in [0, 1), got {self.gamma}")
        if not 0 <= self.gae_lambda <= 1:
            raise ConfigError(f"ppo.gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.clip_eps < 0:
            raise ConfigError(f"ppo.clip_eps must be >= 0, got {self.clip_eps}")
        if self.rollout_steps < 1 or self.epochs < 1 or self.minibatch < 1:
            raise ConfigError("ppo.rollout_steps, ppo.epochs and ppo.minibatch must be >= 1")
        if self.max_grad_norm <= 0:
            raise ConfigError(f"ppo.max_grad_norm must be > 0, got {self.max_grad_norm}")
        if not LOG_STD_MIN <= self.log_std_init <= LOG_STD_MAX:
            raise ConfigError(f"ppo.log_std_init must lie in [{LOG_STD_MIN}, {LOG_STD_MAX}], got {self.log_std_init}")
        if self.reward_scale <= 0:
            raise ConfigError(f"ppo.reward_scale must be > 0, got {self.reward_scale}")


class GaussianPolicy:
    """Actor mean net, state-independent log-std and a value net."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden: Sequence[int] = (256, 256),
        activation: str = "relu",
        log_std_init: float = 0.0,
        generator: Optional[torch.Generator] = None,
    ):
        self.actor = mlp(state_dim, hidden, action_dim, activation, generator=generator)
        self.value = mlp(state_dim, hidden, 1, activation, generator=generator)
        self.log_std = torch.nn.Parameter(torch.full((action_dim,), float(log_std_init), dtype=DTYPE))

    def parameters(self) -> List[torch.Tensor]:
        return [*self.actor.parameters(), self.log_std, *self.value.parameters()]

    def std(self) -> torch.Tensor:
        return self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX).exp()

    def distribution(self, states: torch.Tensor) -> torch.distributions.Normal:
        mean = self.actor(states)
        return torch.distributions.Normal(mean, self.std().expand_as(mean))

    def log_prob(self, states: torch.Tensor, pre_squash: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Log-density of tanh(u) and the Gaussian entropy, both summed over action dims."""
        dist = self.distribution(states)
        return dist.log_prob(pre_squash).sum(-1) - squash_correction(pre_squash), dist.entropy().sum(-1)

    def values(self, states: torch.Tensor) -> torch.Tensor:
        return self.value(states).squeeze(-1)


def squash_correction(u: torch.Tensor) -> torch.Tensor:
    """sum log(1 - tanh(u)^2), written in the overflow-free form."""
    return (2.0 * (LOG2 - u - F.softplus(-2.0 * u))).sum(-1)


class PolicyStep(NamedTuple):
    action: np.ndarray
    log_prob: float
    value: float
    pre_squash: np.ndarray


@torch.no_grad()
def act(policy: GaussianPolicy, state_enc, generator: Optional[torch.Generator] = None) -> PolicyStep:
    s = as_tensor(state_enc).reshape(1, -1)
    dist = policy.distribution(s)
    u = dist.mean + dist.stddev * torch.randn(dist.mean.shape, generator=generator, dtype=DTYPE)
    log_prob = dist.log_prob(u).sum(-1) - squash_correction(u)
    action = torch.tanh(u).clamp(-1.0, 1.0)
    return PolicyStep(
        action=action[0].numpy(),
        log_prob=float(log_prob.item()),
        value=float(policy.values(s).item()),
        pre_squash=u[0].numpy(),
    )


@torch.no_grad()
def greedy_action(policy: GaussianPolicy, state_enc) -> np.ndarray:
    """tanh(mean), the evaluation action."""
    single = np.ndim(state_enc) == 1
    s = as_tensor(state_enc)
    s = s.unsqueeze(0) if single else s
    a = torch.tanh(policy.actor(s)).numpy()
    return a[0] if single else a


@dataclass
class RolloutBatch:
    states: np.ndarray
    pre_squash: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    last_value: float = 0.0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("states", "pre_squash", "actions", "log_probs", "values"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"rollout field '{name}' has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.rewards)


def compute_gae(rollout: RolloutBatch, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantages over one continuing stream, bootstrapped with rollout.last_value at the cut."""
    n = len(rollout)
    if n == 0:
        raise ValueError("rollout is empty")
    rewards = np.asarray(rollout.rewards, dtype=np.float64)
    values = np.asarray(rollout.values, dtype=np.float64)
    next_values = np.append(values[1:], rollout.last_value)
    advantages = np.zeros(n)
    gae = 0.0
    for t in reversed(range(n)):
        delta = rewards[t] + gamma * next_values[t] - values[t]
        gae = delta + gamma * lam * gae
        advantages[t] = gae
    returns = advantages + values
    rollout.advantages, rollout.returns = advantages, returns
    return advantages, returns


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    centred = adv - adv.mean()
    std = adv.std()
    return centred / (std + 1e-8) if std > 0 else centred


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, eps: float) -> torch.Tensor:
    """mean of min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)."""
    clipped = ratio.clamp(1.0 - eps, 1.0 + eps)
    return torch.minimum(ratio * advantages, clipped * advantages).mean()


@dataclass
class PPODiagnostics:
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    first_ratio_deviation: float


def _clip_grads(grads: List[torch.Tensor], max_norm: float) -> List[torch.Tensor]:
    total = torch.sqrt(sum((g ** 2).sum() for g in grads))
    scale = min(1.0, max_norm / (float(total) + 1e-6))
    return [g * scale for g in grads]


def ppo_update(
    policy: GaussianPolicy,
    rollout: RolloutBatch,
    cfg: PPOConfig,
    optimizer: torch.optim.Adam,
    rng: np.random.Generator,
) -> PPODiagnostics:
    if rollout.advantages is None:
        compute_gae(rollout, cfg.gamma, cfg.gae_lambda)
    states = as_tensor(rollout.states)
    u = as_tensor(rollout.pre_squash)
    old_log_probs = as_tensor(rollout.log_probs)
    advantages = as_tensor(normalize_advantages(rollout.advantages))
    returns = as_tensor(rollout.returns)
    params = policy.parameters()

    n = len(rollout)
    stats: Dict[str, List[float]] = {"policy": [], "value": [], "entropy": [], "kl": [], "clip": []}
    first_deviation = float("nan")
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            idx = torch.as_tensor(order[start:start + cfg.minibatch])
            log_probs, entropy = policy.log_prob(states[idx], u[idx])
            log_ratio = log_probs - old_log_probs[idx]
            ratio = log_ratio.exp()
            if epoch == 0 and start == 0:
                first_deviation = float((ratio - 1.0).abs().max().item())
            policy_loss = -clipped_surrogate(ratio, advantages[idx], cfg.clip_eps)
            value_loss = ((policy.values(states[idx]) - returns[idx]) ** 2).mean()
            loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy.mean()

            grads = torch.autograd.grad(loss, params, allow_unused=True)
            grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
            adam_step(params, _clip_grads(grads, cfg.max_grad_norm), optimizer)

            with torch.no_grad():
                stats["policy"].append(float(policy_loss))
                stats["value"].append(float(value_loss))
                stats["entropy"].append(float(entropy.mean()))
                stats["kl"].append(float(((ratio - 1.0) - log_ratio).mean()))
                stats["clip"].append(float(((ratio - 1.0).abs() > cfg.clip_eps).double().mean()))
    return PPODiagnostics(
        policy_loss=float(np.mean(stats["policy"])),
        value_loss=float(np.mean(stats["value"])),
        entropy=float(np.mean(stats["entropy"])),
        approx_kl=float(np.mean(stats["kl"])),
        clip_fraction=float(np.mean(stats["clip"])),
        first_ratio_deviation=first_deviation,
    )


class PPOAgent:
    algo = "ppo"
    feasibility_tol = 0.0

    def __init__(self, sampler: SamplerConfig, econ: EconParams, cfg: PPOConfig, seed: int = 0):
        self.sampler = sampler
        self.econ = econ
        self.cfg = cfg
        self.seed = seed
        init = torch.Generator().manual_seed(derive_seed(seed, 21))
        self.policy = GaussianPolicy(sampler.state_dim, sampler.action_dim, cfg.hidden, cfg.activation, cfg.log_std_init, init)
        self.optimizer = make_adam(self.policy.parameters(), cfg.lr)
        self.noise = torch.Generator().manual_seed(derive_seed(seed, 22))

    def finite(self) -> bool:
        return all(torch.isfinite(p).all().item() for p in self.policy.parameters())

    def propose_menus(self, states: Sequence[MarketState]) -> List[ContractMenu]:
        if not states:
            return []
        enc = np.stack([encode_state(s, self.sampler) for s in states])
        actions = greedy_action(self.policy, enc)
        return [action_to_menu(a, s, self.econ) for a, s in zip(actions, states)]

    def save(self, path) -> Path:
        extra = {
            "log_std": {"values": self.policy.log_std.detach().numpy().copy()},
            "meta": {"state_dim": self.sampler.state_dim, "action_dim": self.sampler.action_dim, "seed": self.seed},
        }
        return save_checkpoint(path, "ppo", {"actor": self.policy.actor, "value": self.policy.value}, extra)

    @classmethod
    def load(cls, path, sampler: SamplerConfig, econ: EconParams, cfg: PPOConfig) -> "PPOAgent":
        _, nets, extra = load_checkpoint(path, expected_kind="ppo")
        try:
            meta = extra["meta"]
            log_std = extra["log_std"]["values"]
            actor, value = nets["actor"], nets["value"]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint {path} lacks section {exc}")
        if (int(meta["state_dim"]), int(meta["action_dim"])) != (sampler.state_dim, sampler.action_dim):
            raise CheckpointError(
                f"checkpoint {path} was trained for state/action dims {int(meta['state_dim'])}/{int(meta['action_dim'])}, "
                f"config gives {sampler.state_dim}/{sampler.action_dim}"
            )
        agent = cls(sampler, econ, cfg, seed=int(meta.get("seed", 0)))
        agent.policy.actor = actor
        agent.policy.value = value
        with torch.no_grad():
            agent.policy.log_std.copy_(torch.from_numpy(np.asarray(log_std, dtype=np.float64)))
        agent.optimizer = make_adam(agent.policy.parameters(), cfg.lr)
        logger.info(f"Loaded PPO policy from {path}")
        return agent


def train_ppo(
    sampler: SamplerConfig,
    econ: EconParams,
    cfg: PPOConfig,
    seed: int,
    steps: int,
    eval_set: EvaluationSet,
    eval_every: int = 1000,
) -> TrainingResult:
    """Alternate rollout collection on i.i.d. states with clipped-surrogate updates for `steps` interactions."""
    if steps < 1 or eval_every < 1:
        raise ConfigError(f"steps and eval_every must be >= 1, got {steps} / {eval_every}")
    agent = PPOAgent(sampler, econ, cfg, seed)
    env_rng = np.random.default_rng(derive_seed(seed, 1))
    shuffle_rng = np.random.default_rng(derive_seed(seed, 2))

    curves: List[CurveRow] = []
    losses: Dict[str, List[float]] = {"policy": [], "value": [], "entropy": [], "approx_kl": []}
    window: List[float] = []
    state = sample_state(env_rng, sampler)
    step = 0
    logger.info(f"🚀 Training PPO baseline: seed={seed}, steps={steps}, rollout={cfg.rollout_steps}")
    while step < steps:
        length = min(cfg.rollout_steps, steps - step)
        cols: Dict[str, list] = {k: [] for k in ("states", "pre_squash", "actions", "log_probs", "rewards", "values")}
        for _ in range(length):
            step += 1
            s_enc = encode_state(state, sampler)
            out = act(agent.policy, s_enc, agent.noise)
            r = reward_signal(state, action_to_menu(out.action, state, econ), econ)
            cols["states"].append(s_enc)
            cols["pre_squash"].append(out.pre_squash)
            cols["actions"].append(out.action)
            cols["log_probs"].append(out.log_prob)
            cols["rewards"].append(r * cfg.reward_scale)
            cols["values"].append(out.value)
            window.append(r)
            logger.debug(f"step {step}: reward {r:.4f}")
            state = sample_state(env_rng, sampler)
            if step % eval_every == 0 or step == steps:
                if not agent.finite():
                    raise DivergenceError(f"PPO run seed={seed} has non-finite parameters at step {step}")
                stats = evaluate_policy(agent, eval_set, econ)
                curves.append(curve_row(step, seed, agent.algo, float(np.mean(window)), stats))
                window = []

        with torch.no_grad():
            last_value = float(agent.policy.values(as_tensor(encode_state(state, sampler)).reshape(1, -1)).item())
        rollout = RolloutBatch(**{k: np.asarray(v) for k, v in cols.items()}, last_value=last_value)
        compute_gae(rollout, cfg.gamma, cfg.gae_lambda)
        diag = ppo_update(agent.policy, rollout, cfg, agent.optimizer, shuffle_rng)
        losses["policy"].append(diag.policy_loss)
        losses["value"].append(diag.value_loss)
        losses["entropy"].append(diag.entropy)
        losses["approx_kl"].append(diag.approx_kl)
        logger.debug(
            f"PPO update at step {step}: policy {diag.policy_loss:.4f}, value {diag.value_loss:.4f}, "
            f"kl {diag.approx_kl:.5f}, clip {diag.clip_fraction:.3f}, ratio dev {diag.first_ratio_deviation:.2e}"
        )
    return TrainingResult(curves=curves, agent=agent, losses=losses)
