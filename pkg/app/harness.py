"""
Experiment orchestration: multi-seed runs, cross-algorithm comparison and
checkpoint evaluation. Every entry point writes CSVs through helpers.write_csv
so reruns with the same config and seeds give byte-identical tables.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from config import ExperimentConfig
from diffusion import DiffusionAgent, train_diffusion
from evaluation import (
    CURVE_COLUMNS,
    EvaluationSet,
    OraclePolicy,
    build_evaluation_set,
    contract_states,
    contract_table,
    curves_frame,
    evaluate_menus,
)
from helpers import (
    DataError,
    build_identifier,
    ensure_outdir,
    manifest_exists,
    merge_seed_parts,
    read_csv,
    save_seed_part,
    write_csv,
    write_manifest,
)
from nets import load_checkpoint
from oracle import screening_monotone, solve_many
from ppo import PPOAgent, train_ppo

logger = logging.getLogger(__name__)

MOVING_AVERAGE_WINDOW = 5
CONVERGENCE_BAND = 0.05
ORACLE_COLUMN_MAX_Q = 2


def evaluation_set_for(config: ExperimentConfig) -> EvaluationSet:
    """Held-out states from the dedicated evaluation seed stream, pre-solved by the oracle."""
    rng = np.random.default_rng(config.experiment.eval_seed)
    return build_evaluation_set(rng, config.sampler, config.experiment.eval_states, config.econ, config.oracle)


def contract_states_for(config: ExperimentConfig):
    rng = np.random.default_rng(config.experiment.contract_seed)
    exp = config.experiment
    return contract_states(rng, config.sampler, exp.contract_states, exp.stress_p_first)


def checkpoint_path(out_dir, algo: str, seed: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"{algo}_seed{seed}.npz"


# ---------------- run ----------------
def run_seed(config: ExperimentConfig, seed: int, out_dir) -> Dict[str, object]:
    """Train one seed and write its curve/contract part files and checkpoint."""
    algo = config.experiment.algo
    states = contract_states_for(config)
    oracle = solve_many(states, config.econ, config.oracle) if config.sampler.Q <= ORACLE_COLUMN_MAX_Q else None

    if algo == "oracle":
        for sol in oracle or []:
            screening_monotone(sol)
        table = contract_table(states, None, oracle, config.econ, algo, seed)
        save_seed_part(table, out_dir, "contracts", seed)
        return {"seed": seed, "rows": len(table)}

    eval_set = evaluation_set_for(config)
    exp = config.experiment
    if algo == "diffusion":
        result = train_diffusion(config.sampler, config.econ, config.diffusion, seed, exp.steps, eval_set, exp.eval_every)
    else:
        result = train_ppo(config.sampler, config.econ, config.ppo, seed, exp.steps, eval_set, exp.eval_every)
    agent = result.agent
    save_seed_part(curves_frame(result.curves), out_dir, "curves", seed)
    menus = agent.propose_menus(states)
    table = contract_table(states, menus, oracle, config.econ, algo, seed, tol=agent.feasibility_tol)
    save_seed_part(table, out_dir, "contracts", seed)
    agent.save(checkpoint_path(out_dir, algo, seed))
    final = result.curves[-1]
    return {"seed": seed, "final_eval_reward": final.eval_mean_reward, "final_feasibility": final.eval_feasibility_rate}


def _run_seed_worker(args) -> Dict[str, object]:
    config, seed, out_dir = args
    torch.set_num_threads(1)
    return run_seed(config, seed, out_dir)


@dataclass
class RunSummary:
    out_dir: Path
    curves: Optional[pd.DataFrame]
    contracts: Optional[pd.DataFrame]
    seeds: List[Dict[str, object]]


def run(config: ExperimentConfig, force: bool = False) -> RunSummary:
    exp = config.experiment
    out = Path(exp.out_dir)
    if manifest_exists(out) and not force:
        raise DataError(f"{out / 'manifest.txt'} already exists; pass --force to overwrite")
    ensure_outdir(out)
    started = datetime.now(timezone.utc)
    t0 = time.perf_counter()
    logger.info(f"Running {exp.algo} for seeds {list(exp.seeds)} into {out}")

    if exp.algo == "oracle":
        seeds = [exp.seeds[0]]
    else:
        seeds = list(exp.seeds)
    # one intra-op thread in every path so serial and pooled runs match bit for bit
    torch.set_num_threads(1)
    if exp.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(exp.workers, len(seeds))) as pool:
            per_seed = list(pool.map(_run_seed_worker, [(config, s, out) for s in seeds]))
    else:
        per_seed = [run_seed(config, s, out) for s in seeds]

    curves = merge_seed_parts(out, "curves", seeds, ["seed", "step"])
    contracts = merge_seed_parts(out, "contracts", seeds, ["seed", "state_id", "q"])
    outputs = [name for name, df in (("curves.csv", curves), ("contracts.csv", contracts)) if df is not None]
    if exp.algo != "oracle":
        outputs.append("checkpoints/")
    write_manifest(
        out,
        {
            "command": f"train-{exp.algo}" if exp.algo != "oracle" else "oracle",
            "algo": exp.algo,
            "seeds": ",".join(str(s) for s in seeds),
            "config_source": config.source,
            "config_hash": config.config_hash,
            "build": build_identifier(),
            "started_utc": started.isoformat(timespec="seconds"),
            "wall_clock_seconds": f"{time.perf_counter() - t0:.1f}",
            "outputs": ", ".join(outputs),
        },
        config.config_lines(),
        force=force,
    )
    logger.info(f"✅ Run complete: {', '.join(outputs)}")
    return RunSummary(out_dir=out, curves=curves, contracts=contracts, seeds=per_seed)


# ---------------- compare ----------------
def convergence_step(curve: pd.DataFrame, window: int = MOVING_AVERAGE_WINDOW, band: float = CONVERGENCE_BAND) -> int:
    """First step whose moving-average eval reward lies within `band` of the final moving average."""
    curve = curve.sort_values("step", kind="mergesort")
    ma = curve["eval_mean_reward"].rolling(window, min_periods=1).mean().to_numpy()
    final = ma[-1]
    inside = np.abs(ma - final) <= band * abs(final)
    return int(curve["step"].to_numpy()[int(np.argmax(inside))])


def _label_sources(frames: Sequence[pd.DataFrame]) -> List[pd.DataFrame]:
    """Tags shared by several files are suffixed with the file's position so sources stay apart."""
    seen: Dict[str, int] = {}
    for df in frames:
        for tag in df["algo"].unique():
            seen[tag] = seen.get(tag, 0) + 1
    out = []
    for i, df in enumerate(frames, start=1):
        df = df.copy()
        df["algo"] = [f"{tag}#{i}" if seen[tag] > 1 else tag for tag in df["algo"]]
        out.append(df)
    return out


@dataclass
class CompareResult:
    table: pd.DataFrame
    verdict: str


def compare(curve_paths: Sequence, out_dir, final_window: int = 5) -> CompareResult:
    frames = [read_csv(p, CURVE_COLUMNS) for p in curve_paths]
    curves = pd.concat(_label_sources(frames), ignore_index=True)
    algos = sorted(curves["algo"].unique())
    if len(algos) < 2:
        raise DataError(f"compare needs curves for at least two algorithms, found {algos}")

    rows = []
    for algo in algos:
        sub = curves[curves["algo"] == algo]
        seeds = sorted(sub["seed"].unique())
        if len(seeds) < 2:
            raise DataError(f"compare needs >= 2 seeds per algorithm; '{algo}' has {len(seeds)}")
        per_seed = []
        for seed in seeds:
            curve = sub[sub["seed"] == seed].sort_values("step", kind="mergesort")
            tail = curve.tail(final_window)
            per_seed.append({
                "reward": tail["eval_mean_reward"].mean(),
                "feasibility": tail["eval_feasibility_rate"].mean(),
                "oracle_ratio": tail["eval_oracle_ratio"].mean(),
                "convergence": convergence_step(curve),
            })
        ps = pd.DataFrame(per_seed)
        rows.append({
            "algo": algo,
            "seeds": len(seeds),
            "final_reward_mean": ps["reward"].mean(),
            "final_reward_std": ps["reward"].std(ddof=0),
            "feasibility_mean": ps["feasibility"].mean(),
            "feasibility_std": ps["feasibility"].std(ddof=0),
            "oracle_ratio_mean": ps["oracle_ratio"].mean(),
            "oracle_ratio_std": ps["oracle_ratio"].std(ddof=0),
            "convergence_step_mean": ps["convergence"].mean(),
            "convergence_step_std": ps["convergence"].std(ddof=0),
        })
    table = pd.DataFrame(rows).sort_values("final_reward_mean", ascending=False, kind="mergesort").reset_index(drop=True)
    best, runner_up = table.iloc[0], table.iloc[1]
    gap = best["final_reward_mean"] - runner_up["final_reward_mean"]
    if gap == 0:
        verdict = f"verdict: tie between {best['algo']} and {runner_up['algo']} at {best['final_reward_mean']:.2f}"
    else:
        verdict = (
            f"verdict: {best['algo']} leads {runner_up['algo']} by {gap:.2f} final-window eval reward "
            f"({best['final_reward_mean']:.2f} vs {runner_up['final_reward_mean']:.2f}); convergence step "
            f"{best['convergence_step_mean']:.0f} vs {runner_up['convergence_step_mean']:.0f}"
        )
    write_csv(table, ensure_outdir(out_dir) / "compare.csv")
    logger.info(verdict)
    return CompareResult(table=table, verdict=verdict)


# ---------------- evaluate ----------------
@dataclass
class EvaluationRecord:
    algo: str
    count: int
    seed: int
    feasibility_rate: float
    positive_utility_rate: float
    mean_client_utility: float
    mean_oracle_ratio: float
    mean_reward: float
    contracts: pd.DataFrame

    def summary(self) -> Dict[str, object]:
        return {k: v for k, v in self.__dict__.items() if k != "contracts"}


def load_policy(checkpoint: str, config: ExperimentConfig):
    """'oracle' or a checkpoint path; the checkpoint's kind picks the agent class."""
    if str(checkpoint) == "oracle":
        return OraclePolicy(config.econ, config.oracle)
    kind, _, _ = load_checkpoint(checkpoint)
    if kind == "diffusion":
        return DiffusionAgent.load(checkpoint, config.sampler, config.econ, config.diffusion)
    if kind == "ppo":
        return PPOAgent.load(checkpoint, config.sampler, config.econ, config.ppo)
    raise DataError(f"checkpoint {checkpoint} holds unknown policy kind '{kind}'")


def evaluate(config: ExperimentConfig, checkpoint: str, seed: int, count: int) -> EvaluationRecord:
    """Deterministic-chain (or greedy) menus on `count` freshly seeded states, scored against the oracle."""
    if count < 1:
        raise DataError(f"evaluation needs at least one state, got {count}")
    policy = load_policy(checkpoint, config)
    rng = np.random.default_rng(seed)
    eval_set = build_evaluation_set(rng, config.sampler, count, config.econ, config.oracle)
    menus = policy.propose_menus(eval_set.states)
    stats = evaluate_menus(eval_set, menus, config.econ, tol=policy.feasibility_tol)
    table = contract_table(eval_set.states, menus, eval_set.oracle, config.econ, policy.algo, seed, tol=policy.feasibility_tol)
    record = EvaluationRecord(
        algo=policy.algo,
        count=count,
        seed=seed,
        feasibility_rate=stats.feasibility_rate,
        positive_utility_rate=stats.positive_utility_rate,
        mean_client_utility=stats.mean_client_utility,
        mean_oracle_ratio=stats.mean_oracle_ratio,
        mean_reward=stats.mean_reward,
        contracts=table,
    )
    logger.info(
        f"Evaluated {policy.algo} on {count} states: feasible {record.feasibility_rate:.3f}, "
        f"positive U_C {record.positive_utility_rate:.3f}, oracle ratio {record.mean_oracle_ratio:.4f}"
    )
    return record


def write_evaluation(record: EvaluationRecord, out_dir) -> Path:
    out = ensure_outdir(out_dir)
    write_csv(pd.DataFrame([record.summary()]), out / "evaluation.csv")
    return write_csv(record.contracts, out / "contracts.csv")
