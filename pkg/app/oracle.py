"""
Ground-truth contract menus.

For a fixed latency vector the reward subproblem is linear: minimise the
expected payment subject to IR (R_q >= c(theta_q, L_q)) and IC
(R_q >= R_k + c(theta_q, L_q) - c(theta_q, L_k)). Its least solution is the
longest-path fixed point of those difference constraints, so it is found by a
constraint-propagation sweep instead of a general LP solver. The latency
vector is then grid searched and locally refined.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from helpers import FEASIBILITY_TOL, ConfigError, DomainError
from market import (
    ContractMenu,
    EconParams,
    MarketState,
    client_utility,
    constraint_report,
    latency_bounds,
    violation,
)

logger = logging.getLogger(__name__)

BINDING_TOL = 1e-6
MAX_BRUTE_CELLS = 10 ** 9
CHUNK_COMBOS = 65536


@dataclass(frozen=True)
class OracleConfig:
    L_grid_points: int = 64
    refine_rounds: int = 4
    coarse_R_points: int = 64

    def __post_init__(self):
        if self.L_grid_points < 2:
            raise ConfigError(f"oracle.L_grid_points must be >= 2, got {self.L_grid_points}")
        if self.refine_rounds < 0:
            raise ConfigError(f"oracle.refine_rounds must be >= 0, got {self.refine_rounds}")
        if self.coarse_R_points < 2:
            raise ConfigError(f"oracle.coarse_R_points must be >= 2, got {self.coarse_R_points}")


@dataclass(frozen=True)
class OracleSolution:
    menu: ContractMenu
    u_c: float
    binding: Tuple[Tuple[str, ...], ...]
    feasible: bool = True
    refine_history: Tuple[float, ...] = ()


def _cost_tensor(theta: np.ndarray, L: np.ndarray, L_max: float, f: float) -> np.ndarray:
    """C[m, q, k] = cost(theta_q, L[m, k])."""
    return f * theta[None, :, None] * (L_max / L[:, None, :] - 1.0)


def _least_rewards(theta: np.ndarray, L: np.ndarray, L_max: float, params: EconParams):
    """Vectorised propagation sweep over M latency vectors; returns (R, feasible)."""
    Q = theta.shape[0]
    C = _cost_tensor(theta, L, L_max, params.f)
    own = np.diagonal(C, axis1=1, axis2=2).copy()
    # R_q >= R_k + D[q, k]
    D = own[:, :, None] - C
    R = own.copy()
    for _ in range(Q):
        R = np.maximum(R, (R[:, None, :] + D).max(axis=2))
    R_next = np.maximum(R, (R[:, None, :] + D).max(axis=2))
    # a further raise means a positive cycle: no finite fixed point exists
    stable = (R_next - R).max(axis=1) <= FEASIBILITY_TOL
    within_box = R.max(axis=1) <= params.R_max + FEASIBILITY_TOL
    return R, stable & within_box


def optimal_rewards_given_latencies(
    state: MarketState, L_vec: Sequence[float], params: EconParams
) -> Optional[np.ndarray]:
    """Least reward vector implementing L_vec under IR and IC, or None if no such vector fits in [0, R_max]."""
    L = np.asarray(L_vec, dtype=np.float64).reshape(1, -1)
    if L.shape[1] != state.Q:
        raise DomainError(f"latency vector must have length Q={state.Q}, got {L.shape[1]}")
    lo, hi = latency_bounds(state, params)
    if np.any(L < lo - 1e-12 * hi) or np.any(L > hi * (1 + 1e-12)):
        raise DomainError(f"latencies must lie in [{lo}, {hi}], got {L_vec}")
    R, feasible = _least_rewards(state.theta, L, state.L_max, params)
    if not feasible[0]:
        return None
    return R[0]


def _client_utilities(state: MarketState, L: np.ndarray, R: np.ndarray, params: EconParams) -> np.ndarray:
    rev = params.e1 * state.theta[None, :] ** params.z1 - params.e2 * (L / state.L_max) ** params.z2
    return (state.n * state.p[None, :] * (rev - R)).sum(axis=1)


def _search_grid(
    state: MarketState, axes: List[np.ndarray], params: EconParams
) -> Tuple[Optional[np.ndarray], Optional[np.ndarray], float]:
    """Best (L, R, U_C) over the Cartesian product of per-type latency axes; ties keep the lexicographically smallest L."""
    shape = tuple(len(ax) for ax in axes)
    total = int(np.prod(shape))
    best_u = -np.inf
    best_L: Optional[np.ndarray] = None
    best_R: Optional[np.ndarray] = None
    for start in range(0, total, CHUNK_COMBOS):
        idx = np.unravel_index(np.arange(start, min(total, start + CHUNK_COMBOS)), shape)
        L = np.stack([axes[q][idx[q]] for q in range(state.Q)], axis=1)
        R, feasible = _least_rewards(state.theta, L, state.L_max, params)
        u = np.where(feasible, _client_utilities(state, L, R, params), -np.inf)
        i = int(np.argmax(u))
        if u[i] > best_u:
            best_u, best_L, best_R = float(u[i]), L[i].copy(), R[i].copy()
    return best_L, best_R, best_u


def _binding(state: MarketState, menu: ContractMenu, params: EconParams) -> Tuple[Tuple[str, ...], ...]:
    report = constraint_report(state, menu, params)
    out = []
    for q in range(state.Q):
        names = []
        if report.ir_slack[q] <= BINDING_TOL:
            names.append("IR")
        for k in range(state.Q):
            if k != q and report.ic_slack[q, k] <= BINDING_TOL:
                names.append(f"IC[{q}->{k}]")
        out.append(tuple(names))
    return tuple(out)


def solve_optimal_menu(state: MarketState, params: EconParams, cfg: OracleConfig = OracleConfig()) -> OracleSolution:
    lo, hi = latency_bounds(state, params)
    axis = np.linspace(lo, hi, cfg.L_grid_points)
    best_L, best_R, best_u = _search_grid(state, [axis] * state.Q, params)
    if best_L is None:
        # L = L_max for all types costs nothing, so R = 0 is always admissible
        best_L = np.full(state.Q, hi)
        best_R = np.zeros(state.Q)
        best_u = float(_client_utilities(state, best_L[None, :], best_R[None, :], params)[0])
    history = [best_u]
    span = hi - lo
    for r in range(1, cfg.refine_rounds + 1):
        width = span / 2 ** r
        axes = []
        for q in range(state.Q):
            a = min(max(best_L[q] - width / 2, lo), hi - width)
            # a + width can round past hi by an ulp
            axes.append(np.clip(np.linspace(a, a + width, cfg.L_grid_points), lo, hi))
        L_r, R_r, u_r = _search_grid(state, axes, params)
        if L_r is not None and u_r > best_u:
            best_L, best_R, best_u = L_r, R_r, u_r
        history.append(best_u)
    menu = ContractMenu.from_arrays(best_L, best_R)
    u_c = client_utility(state, menu, params)
    solution = OracleSolution(
        menu=menu,
        u_c=u_c,
        binding=_binding(state, menu, params),
        feasible=True,
        refine_history=tuple(history),
    )
    logger.debug(f"Oracle solved state L_max={state.L_max:.3f}: U_C*={u_c:.4f}")
    return solution


def solve_many(states: Sequence[MarketState], params: EconParams, cfg: OracleConfig = OracleConfig()) -> List[OracleSolution]:
    solutions = [solve_optimal_menu(s, params, cfg) for s in states]
    logger.info(f"Oracle solved {len(solutions)} states")
    return solutions


def screening_monotone(solution: OracleSolution) -> bool:
    """True if latencies are non-increasing and rewards non-decreasing in the type index."""
    L, R = solution.menu.L, solution.menu.R
    ok = bool(np.all(np.diff(L) <= BINDING_TOL) and np.all(np.diff(R) >= -BINDING_TOL))
    if not ok:
        logger.warning(f"Oracle menu is not screening-monotone: L={np.round(L, 4)}, R={np.round(R, 4)}")
    return ok


def grid_cell_utility_variation(state: MarketState, params: EconParams, cfg: OracleConfig) -> float:
    """Largest U_C gap one latency step plus reward rounding on the brute-force grid can explain."""
    lo, hi = latency_bounds(state, params)
    L_step = (hi - lo) / (cfg.L_grid_points - 1)
    R_step = params.R_max / (cfg.coarse_R_points - 1)
    cost_step = params.f * state.theta.max() * (state.L_max / lo - state.L_max / (lo + L_step))
    revenue_step = params.e2 * (L_step / state.L_max) ** min(params.z2, 1.0)
    per_type = 2 * state.Q * R_step + revenue_step + (2 * state.Q - 1) * cost_step
    return float(state.n * per_type)


def brute_force_cross_check(
    state: MarketState,
    params: EconParams,
    cfg: OracleConfig = OracleConfig(),
    latency_grid: Optional[Sequence[float]] = None,
) -> OracleSolution:
    """Exhaustive (L, R) grid search; if no cell is feasible the least-violating cell is returned, flagged infeasible."""
    if state.Q > 2:
        raise DomainError(f"brute force cross-check supports Q <= 2, got Q={state.Q}")
    lo, hi = latency_bounds(state, params)
    lgrid = np.linspace(lo, hi, cfg.L_grid_points) if latency_grid is None else np.asarray(latency_grid, float)
    rgrid = np.linspace(0.0, params.R_max, cfg.coarse_R_points)
    cells = (len(lgrid) * len(rgrid)) ** state.Q
    if cells > MAX_BRUTE_CELLS:
        raise DomainError(f"brute force grid has {cells} cells, above the {MAX_BRUTE_CELLS} limit")

    R_cells = np.array(list(itertools.product(rgrid, repeat=state.Q)))
    n_p = state.n * state.p
    best: Dict[str, object] = {"u": -np.inf, "L": None, "R": None}
    least_bad: Dict[str, object] = {"v": np.inf, "L": None, "R": None}
    for L_tuple in itertools.product(lgrid, repeat=state.Q):
        L = np.array(L_tuple)
        C = params.f * state.theta[:, None] * (state.L_max / L[None, :] - 1.0)
        U = R_cells[:, None, :] - C[None, :, :]
        own = np.diagonal(U, axis1=1, axis2=2)
        ic = own[:, :, None] - U
        neg = np.clip(-ic, 0.0, None).sum(axis=(1, 2)) + np.clip(-own, 0.0, None).sum(axis=1)
        feasible = (own.min(axis=1) >= -FEASIBILITY_TOL) & (ic.min(axis=(1, 2)) >= -FEASIBILITY_TOL)
        rev = params.e1 * state.theta ** params.z1 - params.e2 * (L / state.L_max) ** params.z2
        u = np.where(feasible, (n_p * (rev[None, :] - R_cells)).sum(axis=1), -np.inf)
        i = int(np.argmax(u))
        if u[i] > best["u"]:
            best = {"u": float(u[i]), "L": L, "R": R_cells[i]}
        j = int(np.argmin(neg))
        if neg[j] < least_bad["v"]:
            least_bad = {"v": float(neg[j]), "L": L, "R": R_cells[j]}

    if best["L"] is not None:
        menu = ContractMenu.from_arrays(best["L"], best["R"])
        feasible_flag = True
    else:
        menu = ContractMenu.from_arrays(least_bad["L"], least_bad["R"])
        feasible_flag = False
        report = constraint_report(state, menu, params)
        logger.warning(f"Brute force found no feasible cell; least violation {violation(report):.4f}")
    return OracleSolution(
        menu=menu,
        u_c=client_utility(state, menu, params),
        binding=_binding(state, menu, params),
        feasible=feasible_flag,
    )
