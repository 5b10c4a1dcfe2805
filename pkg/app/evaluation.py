"""Held-out evaluation shared by both trainers, the oracle policy and the harness."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence

import numpy as np
import pandas as pd

from helpers import FEASIBILITY_TOL, DataError
from market import (
    ContractMenu,
    EconParams,
    MarketState,
    SamplerConfig,
    client_utility,
    client_utility_terms,
    constraint_report,
    encode_state,
    reward_signal,
    sample_states,
    stress_state,
    utility_matrix,
)
from oracle import OracleConfig, OracleSolution, solve_many, solve_optimal_menu

logger = logging.getLogger(__name__)

CURVE_COLUMNS = [
    "step",
    "seed",
    "algo",
    "train_reward",
    "eval_mean_reward",
    "eval_feasibility_rate",
    "eval_mean_client_utility",
    "eval_oracle_ratio",
]

CONTRACT_COLUMNS = [
    "state_id",
    "seed",
    "algo",
    "n",
    "Q",
    "L_max",
    "q",
    "p_q",
    "theta_q",
    "L_q",
    "R_q",
    "U_A_q",
    "U_C_contribution",
    "feasible",
    "oracle_L_q",
    "oracle_R_q",
]


class ContractPolicy(Protocol):
    algo: str
    feasibility_tol: float

    def propose_menus(self, states: Sequence[MarketState]) -> List[ContractMenu]:
        ...


@dataclass
class EvaluationSet:
    states: List[MarketState]
    encodings: np.ndarray
    oracle: Optional[List[OracleSolution]] = None

    def __len__(self) -> int:
        return len(self.states)


def build_evaluation_set(
    rng: np.random.Generator,
    sampler: SamplerConfig,
    count: int,
    econ: EconParams,
    oracle_cfg: Optional[OracleConfig] = None,
) -> EvaluationSet:
    """Draw `count` held-out states; pre-solve them with the oracle when a config is given."""
    states = sample_states(rng, sampler, count)
    return evaluation_set_from_states(states, sampler, econ, oracle_cfg)


def evaluation_set_from_states(
    states: Sequence[MarketState],
    sampler: SamplerConfig,
    econ: EconParams,
    oracle_cfg: Optional[OracleConfig] = None,
) -> EvaluationSet:
    states = list(states)
    encodings = np.stack([encode_state(s, sampler) for s in states]) if states else np.zeros((0, sampler.state_dim))
    solutions = solve_many(states, econ, oracle_cfg) if oracle_cfg is not None else None
    return EvaluationSet(states=states, encodings=encodings, oracle=solutions)


def contract_states(rng: np.random.Generator, sampler: SamplerConfig, count: int, stress_p_first: Sequence[float]) -> List[MarketState]:
    """Random states for the contract table followed by low-share stress variants of the first one."""
    states = sample_states(rng, sampler, count)
    if states and sampler.Q > 1:
        states += [stress_state(states[0], p) for p in stress_p_first]
    return states


@dataclass
class EvalStats:
    mean_reward: float
    feasibility_rate: float
    positive_utility_rate: float
    mean_client_utility: float
    mean_oracle_ratio: float
    rewards: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def evaluate_menus(
    eval_set: EvaluationSet,
    menus: Sequence[ContractMenu],
    econ: EconParams,
    tol: float = 0.0,
) -> EvalStats:
    if len(menus) != len(eval_set):
        raise DataError(f"{len(menus)} menus for {len(eval_set)} evaluation states")
    if not len(eval_set):
        raise DataError("evaluation set is empty")
    rewards, feasible, positive, utilities, ratios = [], [], [], [], []
    for i, (state, menu) in enumerate(zip(eval_set.states, menus)):
        u_c = client_utility(state, menu, econ)
        ok = constraint_report(state, menu, econ, tol=tol).feasible
        r = reward_signal(state, menu, econ, tol=tol)
        rewards.append(r)
        feasible.append(ok)
        positive.append(ok and u_c > 0)
        utilities.append(u_c)
        if eval_set.oracle is not None:
            best = eval_set.oracle[i].u_c
            # ratio is undefined when the best menu earns nothing
            ratios.append(r / best if best > 0 else np.nan)
    defined = [x for x in ratios if not np.isnan(x)]
    if len(defined) < len(ratios):
        logger.warning(f"Oracle ratio skipped on {len(ratios) - len(defined)} states with oracle U_C <= 0")
    return EvalStats(
        mean_reward=float(np.mean(rewards)),
        feasibility_rate=float(np.mean(feasible)),
        positive_utility_rate=float(np.mean(positive)),
        mean_client_utility=float(np.mean(utilities)),
        mean_oracle_ratio=float(np.mean(defined)) if defined else float("nan"),
        rewards=np.asarray(rewards),
    )


def evaluate_policy(policy: ContractPolicy, eval_set: EvaluationSet, econ: EconParams) -> EvalStats:
    menus = policy.propose_menus(eval_set.states)
    return evaluate_menus(eval_set, menus, econ, tol=policy.feasibility_tol)


@dataclass
class CurveRow:
    step: int
    seed: int
    algo: str
    train_reward: float
    eval_mean_reward: float
    eval_feasibility_rate: float
    eval_mean_client_utility: float
    eval_oracle_ratio: float


def curve_row(step: int, seed: int, algo: str, train_reward: float, stats: EvalStats) -> CurveRow:
    row = CurveRow(
        step=step,
        seed=seed,
        algo=algo,
        train_reward=train_reward,
        eval_mean_reward=stats.mean_reward,
        eval_feasibility_rate=stats.feasibility_rate,
        eval_mean_client_utility=stats.mean_client_utility,
        eval_oracle_ratio=stats.mean_oracle_ratio,
    )
    logger.info(
        f"[{algo} seed={seed}] step {step}: train {train_reward:.2f} | eval {stats.mean_reward:.2f} | "
        f"feasible {stats.feasibility_rate:.3f} | oracle ratio {stats.mean_oracle_ratio:.3f}"
    )
    return row


def curves_frame(rows: Sequence[CurveRow]) -> pd.DataFrame:
    """The one curve schema every algorithm writes."""
    return pd.DataFrame([asdict(r) for r in rows], columns=CURVE_COLUMNS)


def contract_table(
    states: Sequence[MarketState],
    menus: Optional[Sequence[ContractMenu]],
    oracle: Optional[Sequence[OracleSolution]],
    econ: EconParams,
    algo: str,
    seed: int,
    tol: float = 0.0,
) -> pd.DataFrame:
    """One row per (state, type); policy columns are empty when `menus` is None, oracle columns when `oracle` is None."""
    rows = []
    for sid, state in enumerate(states):
        menu = menus[sid] if menus is not None else None
        if menu is not None:
            U = utility_matrix(state, menu, econ)
            terms = client_utility_terms(state, menu, econ)
            ok = constraint_report(state, menu, econ, tol=tol).feasible
        sol = oracle[sid] if oracle is not None else None
        for q in range(state.Q):
            rows.append({
                "state_id": sid,
                "seed": seed,
                "algo": algo,
                "n": state.n,
                "Q": state.Q,
                "L_max": state.L_max,
                "q": q + 1,
                "p_q": state.p[q],
                "theta_q": state.theta[q],
                "L_q": menu.contracts[q].L if menu is not None else np.nan,
                "R_q": menu.contracts[q].R if menu is not None else np.nan,
                "U_A_q": U[q, q] if menu is not None else np.nan,
                "U_C_contribution": terms[q] if menu is not None else np.nan,
                "feasible": ok if menu is not None else np.nan,
                "oracle_L_q": sol.menu.contracts[q].L if sol is not None else np.nan,
                "oracle_R_q": sol.menu.contracts[q].R if sol is not None else np.nan,
            })
    return pd.DataFrame(rows, columns=CONTRACT_COLUMNS)


class OraclePolicy:
    """The oracle used as a policy: feasible by construction, oracle ratio 1."""

    algo = "oracle"
    feasibility_tol = FEASIBILITY_TOL

    def __init__(self, econ: EconParams, cfg: OracleConfig):
        self.econ = econ
        self.cfg = cfg

    def solve(self, states: Sequence[MarketState]) -> List[OracleSolution]:
        return [solve_optimal_menu(s, self.econ, self.cfg) for s in states]

    def propose_menus(self, states: Sequence[MarketState]) -> List[ContractMenu]:
        return [sol.menu for sol in self.solve(states)]


@dataclass
class TrainingResult:
    """What a trainer hands back to the harness: curve rows, the final agent and its loss traces."""

    curves: List[CurveRow]
    agent: object
    losses: Dict[str, List[float]]
