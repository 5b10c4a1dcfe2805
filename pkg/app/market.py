"""
AIGC service market: provider types, utilities, IR/IC slacks, the training
reward, market-state sampling/encoding and the contract <-> action codec.

A menu publishes one contract {L_q, R_q} per provider type q. Types are
ordered by model complexity theta (ascending). All functions are pure; the
only randomness is the explicit numpy Generator passed to `sample_state`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from helpers import FEASIBILITY_TOL, ConfigError, DomainError

PROB_SUM_TOL = 1e-9


@dataclass(frozen=True)
class EconParams:
    """Utility constants. Defaults: f=0.05, e1=30, e2=5, z1=z2=1."""

    e1: float = 30.0
    e2: float = 5.0
    z1: float = 1.0
    z2: float = 1.0
    f: float = 0.05
    R_max: float = 3000.0
    L_min_frac: float = 0.1
    violation_scale: float = 1.0

    def __post_init__(self):
        for name in ("e1", "e2", "z1", "z2", "f", "R_max"):
            if not getattr(self, name) > 0:
                raise DomainError(f"econ.{name} must be > 0, got {getattr(self, name)}")
        if not 0.0 < self.L_min_frac < 1.0:
            raise DomainError(f"econ.L_min_frac must lie in (0, 1), got {self.L_min_frac}")
        if self.violation_scale < 0:
            raise DomainError(f"econ.violation_scale must be >= 0, got {self.violation_scale}")


def default_reward_cap(e1: float, z1: float, theta_ranges: Sequence[Tuple[float, float]]) -> float:
    """Largest attainable per-type revenue: e1 * (max theta)^z1 (3000 with the default constants)."""
    top = max(hi for _, hi in theta_ranges)
    return float(e1 * top ** z1)


@dataclass(frozen=True)
class SamplerConfig:
    n: int = 50
    Q: int = 2
    theta_ranges: Tuple[Tuple[float, float], ...] = ((10.0, 50.0), (50.0, 100.0))
    L_max_range: Tuple[float, float] = (1.0, 10.0)
    n_ref: Optional[float] = None
    Q_ref: Optional[float] = None

    def __post_init__(self):
        ranges = tuple((float(lo), float(hi)) for lo, hi in self.theta_ranges)
        object.__setattr__(self, "theta_ranges", ranges)
        object.__setattr__(self, "L_max_range", (float(self.L_max_range[0]), float(self.L_max_range[1])))
        if self.Q < 1:
            raise ConfigError(f"market.Q must be >= 1, got {self.Q}")
        if self.n < self.Q:
            raise ConfigError(f"market.n must be >= market.Q, got n={self.n}, Q={self.Q}")
        if len(ranges) != self.Q:
            raise ConfigError(f"market.theta_ranges must hold Q={self.Q} ranges, got {len(ranges)}")
        for q, (lo, hi) in enumerate(ranges):
            if not 0 < lo < hi:
                raise ConfigError(f"market.theta_ranges[{q}] must satisfy 0 < lo < hi, got ({lo}, {hi})")
            if q > 0 and lo < ranges[q - 1][1]:
                raise ConfigError(
                    f"market.theta_ranges overlap: range {q - 1} ends at {ranges[q - 1][1]} "
                    f"but range {q} starts at {lo}"
                )
        lo, hi = self.L_max_range
        if not 0 < lo <= hi:
            raise ConfigError(f"market.L_max_range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.n_ref is None:
            object.__setattr__(self, "n_ref", float(self.n))
        if self.Q_ref is None:
            object.__setattr__(self, "Q_ref", float(self.Q))

    @property
    def state_dim(self) -> int:
        return 2 * self.Q + 3

    @property
    def action_dim(self) -> int:
        return 2 * self.Q


@dataclass(frozen=True)
class MarketState:
    n: int
    Q: int
    L_max: float
    p: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        theta = np.asarray(self.theta, dtype=np.float64)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "theta", theta)
        if self.Q < 1 or p.shape != (self.Q,) or theta.shape != (self.Q,):
            raise DomainError(f"state vectors must have length Q={self.Q}: p{p.shape}, theta{theta.shape}")
        if self.n < self.Q:
            raise DomainError(f"n must be >= Q, got n={self.n}, Q={self.Q}")
        if not self.L_max > 0:
            raise DomainError(f"L_max must be > 0, got {self.L_max}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > PROB_SUM_TOL:
            raise DomainError(f"p must be a probability vector, got {p}")
        if np.any(theta <= 0) or np.any(np.diff(theta) <= 0):
            raise DomainError(f"theta must be positive and strictly ascending, got {theta}")


@dataclass(frozen=True)
class Contract:
    L: float
    R: float


@dataclass(frozen=True)
class ContractMenu:
    contracts: Tuple[Contract, ...]

    @classmethod
    def from_arrays(cls, L: Sequence[float], R: Sequence[float]) -> "ContractMenu":
        if len(L) != len(R):
            raise DomainError(f"latency and reward vectors differ in length: {len(L)} vs {len(R)}")
        return cls(tuple(Contract(float(l), float(r)) for l, r in zip(L, R)))

    @property
    def L(self) -> np.ndarray:
        return np.array([c.L for c in self.contracts], dtype=np.float64)

    @property
    def R(self) -> np.ndarray:
        return np.array([c.R for c in self.contracts], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.contracts)


@dataclass(frozen=True)
class ConstraintReport:
    ir_slack: np.ndarray
    ic_slack: np.ndarray
    feasible: bool
    tol: float = FEASIBILITY_TOL


# ---------------- Utilities ----------------
def latency_bounds(state: MarketState, params: EconParams) -> Tuple[float, float]:
    return params.L_min_frac * state.L_max, state.L_max


def revenue(theta, L, state: MarketState, params: EconParams):
    """Security-latency metric e1*theta^z1 - e2*(L/L_max)^z2 earned by the client."""
    L_arr = np.asarray(L, dtype=np.float64)
    if np.any(L_arr <= 0) or np.any(L_arr > state.L_max):
        raise DomainError(f"latency must lie in (0, {state.L_max}], got {L}")
    theta_arr = np.asarray(theta, dtype=np.float64)
    if np.any(theta_arr <= 0):
        raise DomainError(f"theta must be > 0, got {theta}")
    out = params.e1 * theta_arr ** params.z1 - params.e2 * (L_arr / state.L_max) ** params.z2
    return float(out) if out.ndim == 0 else out


def _cost_unchecked(theta, L, L_max: float, f: float):
    return f * theta * (L_max / L - 1.0)


def cost(theta, L, state: MarketState, params: EconParams):
    """Resources a type-theta provider invests to serve within L: f*theta*(L_max/L - 1)."""
    lo, hi = latency_bounds(state, params)
    L_arr = np.asarray(L, dtype=np.float64)
    # tolerate rounding at the bounds
    eps = 1e-12 * hi
    if np.any(L_arr < lo - eps) or np.any(L_arr > hi + eps):
        raise DomainError(f"latency must lie in [{lo}, {hi}], got {L}")
    out = _cost_unchecked(np.asarray(theta, dtype=np.float64), L_arr, state.L_max, params.f)
    return float(out) if np.ndim(out) == 0 else out


def _check_menu(state: MarketState, menu: ContractMenu) -> None:
    if len(menu) != state.Q:
        raise DomainError(f"menu has {len(menu)} contracts but the market has Q={state.Q} types")


def asp_utility(q: int, k: int, state: MarketState, menu: ContractMenu, params: EconParams) -> float:
    """Utility of a type-q provider signing contract k: R_k - cost(theta_q, L_k)."""
    _check_menu(state, menu)
    if not (0 <= q < state.Q and 0 <= k < state.Q):
        raise IndexError(f"type/contract index out of range: q={q}, k={k}, Q={state.Q}")
    c = menu.contracts[k]
    return c.R - cost(state.theta[q], c.L, state, params)


def utility_matrix(state: MarketState, menu: ContractMenu, params: EconParams) -> np.ndarray:
    """U[q, k] = asp_utility(q, k) for all pairs."""
    _check_menu(state, menu)
    L, R = menu.L, menu.R
    C = cost(state.theta[:, None], L[None, :], state, params)
    return R[None, :] - C


def client_utility(state: MarketState, menu: ContractMenu, params: EconParams) -> float:
    _check_menu(state, menu)
    rev = revenue(state.theta, menu.L, state, params)
    return float(np.sum(state.n * state.p * (rev - menu.R)))


def client_utility_terms(state: MarketState, menu: ContractMenu, params: EconParams) -> np.ndarray:
    """Per-type contribution n*p_q*(revenue_q - R_q) to the client utility."""
    _check_menu(state, menu)
    rev = revenue(state.theta, menu.L, state, params)
    return state.n * state.p * (rev - menu.R)


def constraint_report(
    state: MarketState, menu: ContractMenu, params: EconParams, tol: float = FEASIBILITY_TOL
) -> ConstraintReport:
    U = utility_matrix(state, menu, params)
    own = np.diag(U).copy()
    ic = own[:, None] - U
    np.fill_diagonal(ic, 0.0)
    off_diag = ic[~np.eye(state.Q, dtype=bool)]
    ic_min = off_diag.min() if off_diag.size else 0.0
    feasible = bool(own.min() >= -tol and ic_min >= -tol)
    return ConstraintReport(ir_slack=own, ic_slack=ic, feasible=feasible, tol=tol)


def violation(report: ConstraintReport) -> float:
    """Total magnitude of negative IR and off-diagonal IC slacks."""
    ir = np.clip(-report.ir_slack, 0.0, None).sum()
    ic = np.clip(-report.ic_slack, 0.0, None)
    np.fill_diagonal(ic, 0.0)
    return float(ir + ic.sum())


def reward_signal(state: MarketState, menu: ContractMenu, params: EconParams, tol: float = 0.0) -> float:
    """Training reward: U_C when IR/IC hold, otherwise min(U_C, 0) - beta * violation."""
    u_c = client_utility(state, menu, params)
    report = constraint_report(state, menu, params, tol=tol)
    if report.feasible:
        return u_c
    return min(u_c, 0.0) - params.violation_scale * violation(report)


# ---------------- State sampling and encoding ----------------
def sample_state(rng: np.random.Generator, cfg: SamplerConfig) -> MarketState:
    if cfg.Q == 1:
        p = np.ones(1)
    else:
        p = rng.dirichlet(np.ones(cfg.Q))
    theta = np.array([rng.uniform(lo, hi) for lo, hi in cfg.theta_ranges])
    L_max = float(rng.uniform(*cfg.L_max_range))
    return MarketState(n=cfg.n, Q=cfg.Q, L_max=L_max, p=p, theta=theta)


def sample_states(rng: np.random.Generator, cfg: SamplerConfig, count: int) -> List[MarketState]:
    return [sample_state(rng, cfg) for _ in range(count)]


def stress_state(state: MarketState, p_first: float) -> MarketState:
    """Same market with the lowest type's share forced to p_first (others rescaled)."""
    if state.Q == 1:
        return state
    if not 0.0 <= p_first <= 1.0:
        raise DomainError(f"p_first must lie in [0, 1], got {p_first}")
    rest = state.p[1:]
    rest = rest / rest.sum() if rest.sum() > 0 else np.full(state.Q - 1, 1.0 / (state.Q - 1))
    p = np.concatenate([[p_first], (1.0 - p_first) * rest])
    return replace(state, p=p)


def _unit(value: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.5
    return float(np.clip((value - lo) / (hi - lo), 0.0, 1.0))


def encode_state(state: MarketState, cfg: SamplerConfig) -> np.ndarray:
    """[n/n_ref, Q/Q_ref, L_max in its range, p, theta_q each in its range], length 2Q+3."""
    head = [
        float(np.clip(state.n / cfg.n_ref, 0.0, 1.0)),
        float(np.clip(state.Q / cfg.Q_ref, 0.0, 1.0)),
        _unit(state.L_max, *cfg.L_max_range),
    ]
    theta = [_unit(t, lo, hi) for t, (lo, hi) in zip(state.theta, cfg.theta_ranges)]
    return np.concatenate([head, state.p, theta]).astype(np.float64)


# ---------------- Action codec ----------------
def action_to_menu(a, state: MarketState, params: EconParams) -> ContractMenu:
    """Affine map from [-1, 1]^{2Q} (latencies first, then rewards) onto the contract box."""
    a = np.clip(np.asarray(a, dtype=np.float64).reshape(-1), -1.0, 1.0)
    if a.shape[0] != 2 * state.Q:
        raise DomainError(f"action must have length 2Q={2 * state.Q}, got {a.shape[0]}")
    lo, hi = latency_bounds(state, params)
    u = (a + 1.0) / 2.0
    L = np.clip(lo + u[: state.Q] * (hi - lo), lo, hi)
    R = u[state.Q:] * params.R_max
    return ContractMenu.from_arrays(L, R)


def menu_to_action(menu: ContractMenu, state: MarketState, params: EconParams) -> np.ndarray:
    _check_menu(state, menu)
    lo, hi = latency_bounds(state, params)
    a_L = 2.0 * (menu.L - lo) / (hi - lo) - 1.0
    a_R = 2.0 * menu.R / params.R_max - 1.0
    return np.concatenate([a_L, a_R])
