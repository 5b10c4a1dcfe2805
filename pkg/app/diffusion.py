"""
Conditional diffusion contract generator trained against a clipped double-Q critic.

The policy is a T-step reverse denoising chain c^T -> c^0 conditioned on the
encoded market state. Each step predicts the injected noise with a dense
network fed (state, noisy action, timestep embedding); the chain output is
the action in [-1, 1]^{2Q} that `market.action_to_menu` decodes. The actor is
trained by back-propagating min(Q_A, Q_B) through the whole chain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from evaluation import CurveRow, EvaluationSet, TrainingResult, curve_row, evaluate_policy
from helpers import CheckpointError, ConfigError, DivergenceError, DomainError, derive_seed
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
from nets import (
    DTYPE,
    DenseNet,
    adam_step,
    as_tensor,
    clone_net,
    load_checkpoint,
    make_adam,
    mlp,
    parameters_finite,
    save_checkpoint,
    soft_update,
)

logger = logging.getLogger(__name__)

SIGMA_MODES = ("posterior", "beta")


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 8
    beta_start: float = 0.05
    beta_end: float = 0.5
    sigma_mode: str = "posterior"
    time_embed_dim: int = 16
    hidden: Tuple[int, ...] = (256, 256)
    activation: str = "relu"
    critic_hidden: Tuple[int, ...] = (256, 256)
    gamma: float = 0.95
    tau: float = 0.005
    lr: float = 3e-4
    critic_lr: float = 3e-4
    batch_size: int = 256
    buffer_capacity: int = 100_000
    reward_scale: float = 1e-3
    learning_starts: Optional[int] = None
    exploration_noise: float = 0.0
    eval_candidates: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "critic_hidden", tuple(int(h) for h in self.critic_hidden))
        if self.T < 1:
            raise ConfigError(f"diffusion.T must be >= 1, got {self.T}")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError(
                f"diffusion.beta_start/beta_end must satisfy 0 < start <= end < 1, got {self.beta_start}, {self.beta_end}"
            )
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"diffusion.sigma_mode must be one of {SIGMA_MODES}, got '{self.sigma_mode}'")
        if self.time_embed_dim < 2:
            raise ConfigError(f"diffusion.time_embed_dim must be >= 2, got {self.time_embed_dim}")
        if not 0 <= self.gamma < 1:
            raise ConfigError(f"diffusion.gamma must lie in [0, 1), got {self.gamma}")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"diffusion.tau must lie in (0, 1], got {self.tau}")
        if self.lr < 0 or self.critic_lr < 0:
            raise ConfigError("diffusion.lr and diffusion.critic_lr must be >= 0")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ConfigError(
                f"diffusion.batch_size must be >= 1 and <= buffer_capacity, got {self.batch_size} / {self.buffer_capacity}"
            )
        if self.reward_scale <= 0:
            raise ConfigError(f"diffusion.reward_scale must be > 0, got {self.reward_scale}")
        if self.learning_starts is None:
            object.__setattr__(self, "learning_starts", self.batch_size)
        if self.learning_starts < self.batch_size:
            raise ConfigError(f"diffusion.learning_starts must be >= batch_size, got {self.learning_starts}")
        if self.exploration_noise < 0:
            raise ConfigError(f"diffusion.exploration_noise must be >= 0, got {self.exploration_noise}")
        if self.eval_candidates < 1:
            raise ConfigError(f"diffusion.eval_candidates must be >= 1, got {self.eval_candidates}")


# ---------------- Noise schedule ----------------
@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step arrays indexed by t-1 for t = 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    sigma_mode: str = "posterior"

    def alpha_bar_at(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise DomainError(f"timestep must lie in [0, {self.T}], got {t}")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def add_noise(self, a0, t: int, noise=None, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Sample q(c^t | c^0) = N(sqrt(alpha_bar_t) c^0, (1 - alpha_bar_t) I)."""
        a0 = as_tensor(a0)
        if noise is None:
            noise = torch.randn(a0.shape, generator=generator, dtype=DTYPE)
        ab = self.alpha_bar_at(t)
        return math.sqrt(ab) * a0 + math.sqrt(1.0 - ab) * as_tensor(noise)


def make_schedule(T: int, beta_start: float, beta_end: float, sigma_mode: str = "posterior") -> DiffusionSchedule:
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise DomainError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if sigma_mode not in SIGMA_MODES:
        raise DomainError(f"sigma_mode must be one of {SIGMA_MODES}, got '{sigma_mode}'")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if sigma_mode == "posterior":
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    else:
        variance = beta
    return DiffusionSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=np.sqrt(variance), sigma_mode=sigma_mode)


def schedule_from_config(cfg: DiffusionConfig) -> DiffusionSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.sigma_mode)


# ---------------- Networks ----------------
def timestep_embedding(t: int, dim: int, batch: int = 1) -> torch.Tensor:
    """Sinusoidal embedding of the integer step t, shape (batch, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    angles = float(t) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=DTYPE)])
    return emb.unsqueeze(0).expand(batch, dim)


class DenoiserNet(DenseNet):
    """Noise predictor eps(s, c^t, t); input = state ⊕ noisy action ⊕ time embedding."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden: Sequence[int] = (256, 256),
        activation: str = "relu",
        time_embed_dim: int = 16,
        generator: Optional[torch.Generator] = None,
    ):
        super().__init__([state_dim + action_dim + time_embed_dim, *hidden, action_dim], activation, "identity", generator)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.time_embed_dim = time_embed_dim

    def predict_noise(self, states: torch.Tensor, noisy: torch.Tensor, t: int) -> torch.Tensor:
        emb = timestep_embedding(t, self.time_embed_dim, states.shape[0])
        return self(torch.cat([states, noisy, emb], dim=1))

    @classmethod
    def from_dense(cls, net: DenseNet, state_dim: int, action_dim: int, time_embed_dim: int) -> "DenoiserNet":
        hidden = net.layer_sizes[1:-1]
        twin = cls(state_dim, action_dim, hidden, net.hidden_activation, time_embed_dim)
        if twin.layer_sizes != net.layer_sizes:
            raise CheckpointError(
                f"denoiser layers {net.layer_sizes} do not fit state_dim={state_dim}, action_dim={action_dim}, "
                f"time_embed_dim={time_embed_dim}"
            )
        twin.load_state_dict(net.state_dict())
        return twin


class CriticPair:
    """Two online action-value nets Q(s, a) and their soft-updated targets."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden: Sequence[int] = (256, 256),
        activation: str = "relu",
        lr: float = 3e-4,
        generator: Optional[torch.Generator] = None,
    ):
        self.q_a = mlp(state_dim + action_dim, hidden, 1, activation, generator=generator)
        self.q_b = mlp(state_dim + action_dim, hidden, 1, activation, generator=generator)
        self.target_a = clone_net(self.q_a)
        self.target_b = clone_net(self.q_b)
        for net in (self.target_a, self.target_b):
            net.requires_grad_(False)
        self.opt_a = make_adam(self.q_a.parameters(), lr)
        self.opt_b = make_adam(self.q_b.parameters(), lr)

    @classmethod
    def from_nets(cls, q_a: DenseNet, q_b: DenseNet, target_a: DenseNet, target_b: DenseNet, lr: float) -> "CriticPair":
        pair = cls.__new__(cls)
        pair.q_a, pair.q_b, pair.target_a, pair.target_b = q_a, q_b, target_a, target_b
        for net in (pair.target_a, pair.target_b):
            net.requires_grad_(False)
        pair.opt_a = make_adam(pair.q_a.parameters(), lr)
        pair.opt_b = make_adam(pair.q_b.parameters(), lr)
        return pair

    def members(self):
        return ((self.q_a, self.target_a, self.opt_a), (self.q_b, self.target_b, self.opt_b))

    def online(self, states: torch.Tensor, actions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([states, actions], dim=1)
        return self.q_a(x), self.q_b(x)

    def online_min(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        return torch.minimum(*self.online(states, actions))

    def target_values(self, states: torch.Tensor, actions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([states, actions], dim=1)
        return self.target_a(x), self.target_b(x)

    def target_min(self, states: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        return torch.minimum(*self.target_values(states, actions))


# ---------------- Reverse chain ----------------
def _as_batch(states) -> torch.Tensor:
    states = as_tensor(states)
    return states.unsqueeze(0) if states.ndim == 1 else states


def sample_chain(
    denoiser: DenoiserNet,
    states,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
    deterministic: bool = False,
    clip: bool = True,
    initial=None,
) -> torch.Tensor:
    """Differentiable reverse chain; noise is drawn from `generator` so gradients flow through every step."""
    states = _as_batch(states)
    if initial is None:
        x = torch.randn((states.shape[0], denoiser.action_dim), generator=generator, dtype=DTYPE)
    else:
        x = _as_batch(initial)
    for t in range(schedule.T, 0, -1):
        eps = denoiser.predict_noise(states, x, t)
        beta = float(schedule.beta[t - 1])
        x = (x - beta / math.sqrt(1.0 - schedule.alpha_bar[t - 1]) * eps) / math.sqrt(schedule.alpha[t - 1])
        if t > 1 and not deterministic:
            x = x + float(schedule.sigma[t - 1]) * torch.randn(x.shape, generator=generator, dtype=DTYPE)
    return x.clamp(-1.0, 1.0) if clip else x


@torch.no_grad()
def sample_action(
    state_enc,
    denoiser: DenoiserNet,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
    deterministic: bool = False,
) -> np.ndarray:
    """One action per encoded state, in [-1, 1]^{2Q}; a single state gives a 1-D array."""
    single = np.ndim(state_enc) == 1
    actions = sample_chain(denoiser, state_enc, schedule, generator, deterministic).numpy()
    return actions[0] if single else actions


@torch.no_grad()
def select_action(
    state_enc,
    denoiser: DenoiserNet,
    critics: CriticPair,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
    candidates: int = 1,
) -> np.ndarray:
    """Deterministic chain, or the best of `candidates` stochastic chains plus the deterministic one by min-Q."""
    if candidates <= 1:
        return sample_action(state_enc, denoiser, schedule, generator, deterministic=True)
    single = np.ndim(state_enc) == 1
    states = _as_batch(state_enc)
    B = states.shape[0]
    pool = [sample_chain(denoiser, states, schedule, generator, deterministic=True)]
    pool += [sample_chain(denoiser, states, schedule, generator) for _ in range(candidates)]
    stacked = torch.stack(pool)  # (N+1, B, A)
    scores = torch.stack([critics.online_min(states, a).squeeze(1) for a in pool])
    best = scores.argmax(dim=0)
    chosen = stacked[best, torch.arange(B)].numpy()
    return chosen[0] if single else chosen


# ---------------- Replay ----------------
@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray

    def __post_init__(self):
        for name in ("s", "a", "s_next"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (np.all(np.isfinite(self.s)) and np.all(np.isfinite(self.a))
                and np.all(np.isfinite(self.s_next)) and np.isfinite(self.r)):
            raise DomainError("transition entries must be finite")
        if np.any(np.abs(self.a) > 1.0):
            raise DomainError(f"transition action must lie in [-1, 1], got {self.a}")


@dataclass
class Batch:
    s: torch.Tensor
    a: torch.Tensor
    r: torch.Tensor
    s_next: torch.Tensor

    def __len__(self) -> int:
        return self.s.shape[0]


class ReplayBuffer:
    """Bounded FIFO of transitions held in preallocated ring arrays."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def push(self, tr: Transition) -> None:
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s_next[i] = tr.s, tr.a, tr.r, tr.s_next
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _order(self) -> np.ndarray:
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def contents(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Stored arrays, oldest transition first."""
        idx = self._order()
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self._size, size=batch_size)
        return batch_from_arrays(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx])


def batch_from_arrays(s, a, r, s_next) -> Batch:
    return Batch(
        s=as_tensor(s),
        a=as_tensor(a),
        r=as_tensor(r).reshape(-1, 1),
        s_next=as_tensor(s_next),
    )


# ---------------- Updates ----------------
@torch.no_grad()
def critic_targets(
    batch: Batch,
    denoiser: DenoiserNet,
    critics: CriticPair,
    schedule: DiffusionSchedule,
    gamma: float,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """y = r + gamma * min(Q_A'(s', a'), Q_B'(s', a')) with a' drawn from the stochastic chain."""
    if not 0 <= gamma < 1:
        raise DomainError(f"gamma must lie in [0, 1), got {gamma}")
    a_next = sample_chain(denoiser, batch.s_next, schedule, generator)
    return batch.r + gamma * critics.target_min(batch.s_next, a_next)


def critic_update(batch: Batch, critics: CriticPair, y: torch.Tensor, tau: float) -> Tuple[float, float]:
    if len(batch) == 0:
        raise ValueError("critic update needs a nonempty batch")
    x = torch.cat([batch.s, batch.a], dim=1)
    losses = []
    for net, target, opt in critics.members():
        loss = ((net(x) - y) ** 2).mean()
        params = list(net.parameters())
        adam_step(params, torch.autograd.grad(loss, params), opt)
        soft_update(target, net, tau)
        losses.append(float(loss.item()))
    return losses[0], losses[1]


def actor_loss(
    states,
    denoiser: DenoiserNet,
    critics: CriticPair,
    schedule: DiffusionSchedule,
    generator: Optional[torch.Generator] = None,
    deterministic: bool = False,
    initial=None,
) -> torch.Tensor:
    actions = sample_chain(denoiser, states, schedule, generator, deterministic, initial=initial)
    return -critics.online_min(_as_batch(states), actions).mean()


def actor_update(
    states,
    denoiser: DenoiserNet,
    critics: CriticPair,
    schedule: DiffusionSchedule,
    optimizer: torch.optim.Adam,
    generator: Optional[torch.Generator] = None,
) -> float:
    if _as_batch(states).shape[0] == 0:
        raise ValueError("actor update needs a nonempty batch")
    loss = actor_loss(states, denoiser, critics, schedule, generator)
    params = list(denoiser.parameters())
    adam_step(params, torch.autograd.grad(loss, params), optimizer)
    return float(loss.item())


# ---------------- Agent ----------------
class DiffusionAgent:
    algo = "diffusion"
    feasibility_tol = 0.0

    def __init__(self, sampler: SamplerConfig, econ: EconParams, cfg: DiffusionConfig, seed: int = 0):
        self.sampler = sampler
        self.econ = econ
        self.cfg = cfg
        self.seed = seed
        self.schedule = schedule_from_config(cfg)
        init = torch.Generator().manual_seed(derive_seed(seed, 11))
        self.denoiser = DenoiserNet(
            sampler.state_dim, sampler.action_dim, cfg.hidden, cfg.activation, cfg.time_embed_dim, init
        )
        self.critics = CriticPair(sampler.state_dim, sampler.action_dim, cfg.critic_hidden, cfg.activation, cfg.critic_lr, init)
        self.actor_opt = make_adam(self.denoiser.parameters(), cfg.lr)
        self.noise = torch.Generator().manual_seed(derive_seed(seed, 12))

    def propose_menus(self, states: Sequence[MarketState]) -> List[ContractMenu]:
        if not states:
            return []
        enc = np.stack([encode_state(s, self.sampler) for s in states])
        # a fresh generator per call keeps evaluation independent of training progress
        gen = torch.Generator().manual_seed(derive_seed(self.seed, 13))
        actions = select_action(enc, self.denoiser, self.critics, self.schedule, gen, self.cfg.eval_candidates)
        return [action_to_menu(a, s, self.econ) for a, s in zip(actions, states)]

    def finite(self) -> bool:
        return all(parameters_finite(n) for n in (self.denoiser, self.critics.q_a, self.critics.q_b))

    def save(self, path) -> Path:
        nets: Dict[str, DenseNet] = {
            "denoiser": self.denoiser,
            "q_a": self.critics.q_a,
            "q_b": self.critics.q_b,
            "target_a": self.critics.target_a,
            "target_b": self.critics.target_b,
        }
        extra = {
            "schedule": {"T": self.schedule.T, "beta": self.schedule.beta, "sigma_mode": self.schedule.sigma_mode},
            "denoiser_meta": {
                "state_dim": self.sampler.state_dim,
                "action_dim": self.sampler.action_dim,
                "time_embed_dim": self.denoiser.time_embed_dim,
                "seed": self.seed,
            },
        }
        return save_checkpoint(path, "diffusion", nets, extra)

    @classmethod
    def load(cls, path, sampler: SamplerConfig, econ: EconParams, cfg: DiffusionConfig) -> "DiffusionAgent":
        _, nets, extra = load_checkpoint(path, expected_kind="diffusion")
        try:
            meta = extra["denoiser_meta"]
            sched = extra["schedule"]
            state_dim, action_dim = int(meta["state_dim"]), int(meta["action_dim"])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint {path} lacks section {exc}")
        if (state_dim, action_dim) != (sampler.state_dim, sampler.action_dim):
            raise CheckpointError(
                f"checkpoint {path} was trained for state/action dims {state_dim}/{action_dim}, "
                f"config gives {sampler.state_dim}/{sampler.action_dim}"
            )
        agent = cls(sampler, econ, cfg, seed=int(meta.get("seed", 0)))
        beta = np.asarray(sched["beta"], dtype=np.float64)
        agent.schedule = make_schedule(int(sched["T"]), float(beta[0]), float(beta[-1]), str(sched["sigma_mode"]))
        if "denoiser" not in nets:
            raise CheckpointError(f"checkpoint {path} lacks the denoiser net")
        agent.denoiser = DenoiserNet.from_dense(nets["denoiser"], state_dim, action_dim, int(meta["time_embed_dim"]))
        agent.actor_opt = make_adam(agent.denoiser.parameters(), cfg.lr)
        critic_nets = []
        for name in ("q_a", "q_b", "target_a", "target_b"):
            net = nets.get(name)
            if net is None:
                raise CheckpointError(f"checkpoint {path} lacks critic net '{name}'")
            if (net.layer_sizes[0], net.layer_sizes[-1]) != (state_dim + action_dim, 1):
                raise CheckpointError(f"checkpoint {path} critic '{name}' has layer sizes {list(net.layer_sizes)}")
            critic_nets.append(net)
        agent.critics = CriticPair.from_nets(*critic_nets, lr=cfg.critic_lr)
        logger.info(f"Loaded diffusion policy from {path} (T={agent.schedule.T})")
        return agent


def train_diffusion(
    sampler: SamplerConfig,
    econ: EconParams,
    cfg: DiffusionConfig,
    seed: int,
    steps: int,
    eval_set: EvaluationSet,
    eval_every: int = 1000,
) -> TrainingResult:
    """Online loop over i.i.d. market states: act, score, store, then one critic and one actor update."""
    if steps < 1 or eval_every < 1:
        raise ConfigError(f"steps and eval_every must be >= 1, got {steps} / {eval_every}")
    agent = DiffusionAgent(sampler, econ, cfg, seed)
    buffer = ReplayBuffer(cfg.buffer_capacity, sampler.state_dim, sampler.action_dim)
    env_rng = np.random.default_rng(derive_seed(seed, 1))
    replay_rng = np.random.default_rng(derive_seed(seed, 2))
    explore_rng = np.random.default_rng(derive_seed(seed, 3))

    curves: List[CurveRow] = []
    losses: Dict[str, List[float]] = {"critic_a": [], "critic_b": [], "actor": []}
    window: List[float] = []
    state = sample_state(env_rng, sampler)
    logger.info(f"🚀 Training diffusion policy: seed={seed}, steps={steps}, T={cfg.T}")
    for step in range(1, steps + 1):
        s_enc = encode_state(state, sampler)
        a = sample_action(s_enc, agent.denoiser, agent.schedule, agent.noise)
        if cfg.exploration_noise > 0:
            a = np.clip(a + cfg.exploration_noise * explore_rng.standard_normal(a.shape), -1.0, 1.0)
        r = reward_signal(state, action_to_menu(a, state, econ), econ)
        next_state = sample_state(env_rng, sampler)
        buffer.push(Transition(s_enc, a, r * cfg.reward_scale, encode_state(next_state, sampler)))
        window.append(r)
        logger.debug(f"step {step}: reward {r:.4f}")

        if len(buffer) >= cfg.learning_starts:
            batch = buffer.sample(cfg.batch_size, replay_rng)
            y = critic_targets(batch, agent.denoiser, agent.critics, agent.schedule, cfg.gamma, agent.noise)
            la, lb = critic_update(batch, agent.critics, y, cfg.tau)
            lp = actor_update(batch.s, agent.denoiser, agent.critics, agent.schedule, agent.actor_opt, agent.noise)
            losses["critic_a"].append(la)
            losses["critic_b"].append(lb)
            losses["actor"].append(lp)

        state = next_state
        if step % eval_every == 0 or step == steps:
            if not agent.finite():
                raise DivergenceError(f"diffusion run seed={seed} has non-finite parameters at step {step}")
            stats = evaluate_policy(agent, eval_set, econ)
            curves.append(curve_row(step, seed, agent.algo, float(np.mean(window)), stats))
            window = []

    return TrainingResult(curves=curves, agent=agent, losses=losses)
