#!/usr/bin/env python3
"""
Acceptance Audit for the Contract Lab
=====================================

Checks gradient correctness, oracle soundness and, given finished diffusion
and PPO run directories, the directional training claims:
  (a) diffusion final-window eval reward beats PPO for every seed
  (b) diffusion converges within 2x of PPO's convergence step (soft)
  (c) the trained diffusion policy gives positive client utility on >= 99% of states
  (d) PPO's final reward magnitude is below 10% of diffusion's (soft)
plus the oracle-ratio (>= 0.8) and strict-feasibility (>= 95%) bars.

Usage:
  python3 acceptance_report.py
  python3 acceptance_report.py --diffusion-dir runs/diffusion --ppo-dir runs/ppo --config configs/default.yaml
"""

import argparse
import logging
import os
import sys
import time
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd
import torch

sys.path.append(os.path.join(os.path.dirname(os.path.abspath(__file__)), 'app'))

from config import default_config, load_config  # noqa: E402
from diffusion import CriticPair, DenoiserNet, actor_loss, schedule_from_config  # noqa: E402
from evaluation import CURVE_COLUMNS  # noqa: E402
from harness import checkpoint_path, convergence_step, evaluate  # noqa: E402
from helpers import ContractLabError, read_csv  # noqa: E402
from market import EconParams, SamplerConfig, constraint_report, sample_states  # noqa: E402
from nets import DTYPE, gradient_check, mlp  # noqa: E402
from oracle import (  # noqa: E402
    OracleConfig,
    brute_force_cross_check,
    grid_cell_utility_variation,
    solve_optimal_menu,
)
from ppo import GaussianPolicy  # noqa: E402

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

NET_TOL = 1e-4
CHAIN_TOL = 1e-3

Verdict = Tuple[str, str]  # (status, message), status in PASS / WARN / FAIL


def _banner(title: str) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)


def _report(results: List[Verdict]) -> None:
    marks = {"PASS": "✓", "WARN": "⚠", "FAIL": "❌"}
    for status, message in results:
        print(f"  {marks[status]} [{status}] {message}")


def audit_gradients(config) -> List[Verdict]:
    """Finite-difference checks on every network family the policies train, at the configured architectures"""
    _banner("GRADIENT AUDIT")
    gen = torch.Generator().manual_seed(0)
    sampler, dcfg, pcfg = config.sampler, config.diffusion, config.ppo
    print(f"diffusion {dcfg.activation} {list(dcfg.hidden)} / critic {list(dcfg.critic_hidden)}, ppo {pcfg.activation} {list(pcfg.hidden)}")
    S, A = sampler.state_dim, sampler.action_dim
    states = torch.rand((16, S), generator=gen, dtype=DTYPE)
    actions = torch.rand((16, A), generator=gen, dtype=DTYPE) * 2 - 1
    results: List[Verdict] = []

    critic = mlp(S + A, dcfg.critic_hidden, 1, dcfg.activation, generator=gen)
    targets = torch.randn((16, 1), generator=gen, dtype=DTYPE)
    err = gradient_check(lambda: ((critic(torch.cat([states, actions], 1)) - targets) ** 2).mean(),
                         critic.parameters(), generator=gen)
    results.append(("PASS" if err <= NET_TOL else "FAIL", f"critic MSE loss: max rel err {err:.2e}"))

    policy = GaussianPolicy(S, A, pcfg.hidden, pcfg.activation, generator=gen)
    u = torch.randn((16, A), generator=gen, dtype=DTYPE)
    err = gradient_check(lambda: -policy.log_prob(states, u)[0].mean() + policy.values(states).pow(2).mean(),
                         policy.parameters(), generator=gen)
    results.append(("PASS" if err <= NET_TOL else "FAIL", f"PPO actor/value loss: max rel err {err:.2e}"))

    schedule = schedule_from_config(dcfg)
    denoiser = DenoiserNet(S, A, dcfg.hidden, dcfg.activation, dcfg.time_embed_dim, gen)
    critics = CriticPair(S, A, dcfg.critic_hidden, dcfg.activation, generator=gen)
    initial = torch.randn((16, A), generator=gen, dtype=DTYPE) * 0.1
    err = gradient_check(
        lambda: actor_loss(states, denoiser, critics, schedule, deterministic=True, initial=initial),
        denoiser.parameters(), generator=gen,
    )
    results.append(("PASS" if err <= CHAIN_TOL else "FAIL", f"actor loss through T={schedule.T} chain: max rel err {err:.2e}"))
    _report(results)
    return results


def audit_oracle(count: int = 20, seed: int = 7) -> List[Verdict]:
    """LP-based oracle against exhaustive search on random two-type markets"""
    _banner("ORACLE AUDIT")
    econ, sampler = EconParams(), SamplerConfig()
    cfg = OracleConfig(L_grid_points=32, refine_rounds=4, coarse_R_points=48)
    results: List[Verdict] = []
    worst_gap, unsound = 0.0, 0
    t0 = time.perf_counter()
    for i, state in enumerate(sample_states(np.random.default_rng(seed), sampler, count)):
        lp = solve_optimal_menu(state, econ, cfg)
        bf = brute_force_cross_check(state, econ, cfg)
        tol = grid_cell_utility_variation(state, econ, cfg)
        gap = abs(lp.u_c - bf.u_c)
        worst_gap = max(worst_gap, gap / tol)
        report = constraint_report(state, lp.menu, econ)
        if gap > tol or report.ir_slack.min() < -1e-9 or not all(lp.binding):
            unsound += 1
            print(f"  State {i}: U_C* {lp.u_c:.3f} vs brute force {bf.u_c:.3f} (tol {tol:.3f}), binding {lp.binding}")
    elapsed = time.perf_counter() - t0
    results.append(("PASS" if unsound == 0 else "FAIL",
                    f"{count - unsound}/{count} states sound; worst gap {worst_gap:.2f} cells; {elapsed:.1f}s"))
    _report(results)
    return results


def _final_by_seed(curves: pd.DataFrame, window: int) -> Dict[int, float]:
    out = {}
    for seed, curve in curves.groupby("seed"):
        out[int(seed)] = float(curve.sort_values("step").tail(window)["eval_mean_reward"].mean())
    return out


def audit_runs(diffusion_dir: str, ppo_dir: str, config) -> List[Verdict]:
    """Directional training claims from finished runs"""
    _banner("TRAINING CLAIMS AUDIT")
    window = config.experiment.final_window
    diff = read_csv(os.path.join(diffusion_dir, "curves.csv"), CURVE_COLUMNS)
    ppo = read_csv(os.path.join(ppo_dir, "curves.csv"), CURVE_COLUMNS)
    d_final, p_final = _final_by_seed(diff, window), _final_by_seed(ppo, window)
    results: List[Verdict] = []

    shared = sorted(set(d_final) & set(p_final))
    beaten = [s for s in shared if d_final[s] > p_final[s]]
    results.append(("PASS" if shared and len(beaten) == len(shared) else "FAIL",
                    f"(a) diffusion beats PPO on {len(beaten)}/{len(shared)} seeds"))

    d_conv = np.mean([convergence_step(c) for _, c in diff.groupby("seed")])
    p_conv = np.mean([convergence_step(c) for _, c in ppo.groupby("seed")])
    ok = d_conv <= 2 * p_conv
    results.append(("PASS" if ok else "WARN", f"(b) convergence step {d_conv:.0f} vs PPO {p_conv:.0f}"))

    d_mean, p_mean = np.mean(list(d_final.values())), np.mean(list(p_final.values()))
    ok = abs(p_mean) < 0.1 * abs(d_mean)
    results.append(("PASS" if ok else "WARN", f"(d) |PPO final| {abs(p_mean):.1f} vs 10% of diffusion {0.1 * abs(d_mean):.1f}"))

    seed = config.experiment.seeds[0]
    record = evaluate(config, str(checkpoint_path(diffusion_dir, "diffusion", seed)), config.experiment.eval_seed + 1, 1000)
    results.append(("PASS" if record.positive_utility_rate >= 0.99 else "FAIL",
                    f"(c) positive client utility on {record.positive_utility_rate:.3f} of 1000 states"))
    results.append(("PASS" if record.mean_oracle_ratio >= 0.8 else "FAIL",
                    f"oracle ratio {record.mean_oracle_ratio:.3f} (bar 0.8)"))
    results.append(("PASS" if record.feasibility_rate >= 0.95 else "FAIL",
                    f"strict feasibility {record.feasibility_rate:.3f} (bar 0.95)"))
    _report(results)
    return results


def main():
    """Run the acceptance audit"""
    parser = argparse.ArgumentParser(description="Acceptance audit for the contract lab")
    parser.add_argument("--config", help="Config used for the runs (defaults built in)")
    parser.add_argument("--diffusion-dir", help="Finished train-diffusion output directory")
    parser.add_argument("--ppo-dir", help="Finished train-ppo output directory")
    args = parser.parse_args()

    print("CONTRACT LAB - ACCEPTANCE AUDIT")
    print("=" * 60)
    results: List[Verdict] = []
    try:
        config = load_config(args.config) if args.config else default_config()
        results.extend(audit_gradients(config))
        results.extend(audit_oracle())
        if args.diffusion_dir and args.ppo_dir:
            results.extend(audit_runs(args.diffusion_dir, args.ppo_dir, config))
        else:
            print("\n(no run directories given; training claims skipped)")
    except ContractLabError as exc:
        logger.error(f"❌ Audit aborted: {exc}")
        return 3

    _banner("AUDIT SUMMARY")
    failed = [m for s, m in results if s == "FAIL"]
    warned = [m for s, m in results if s == "WARN"]
    print(f"Checks: {len(results)}, failed: {len(failed)}, warnings: {len(warned)}")
    if not failed:
        print("\n✅ All hard acceptance checks passed.")
    print("\n" + "=" * 60)
    print("AUDIT COMPLETE")
    print("=" * 60)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
