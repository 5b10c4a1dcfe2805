import numpy as np
import pandas as pd
import pytest
import yaml

import contract_lab
from config import config_from_mapping, default_config
from diffusion import DiffusionAgent
from evaluation import CONTRACT_COLUMNS, CURVE_COLUMNS
from harness import compare, convergence_step, evaluate, evaluation_set_for, run, write_evaluation
from helpers import DataError, write_csv
from nets import mlp, save_checkpoint

TINY = {
    "diffusion.T": 3,
    "diffusion.hidden": [16],
    "diffusion.critic_hidden": [16],
    "diffusion.batch_size": 8,
    "diffusion.buffer_capacity": 64,
    "ppo.hidden": [16],
    "ppo.rollout_steps": 16,
    "ppo.epochs": 1,
    "ppo.minibatch": 8,
    "oracle.L_grid_points": 8,
    "oracle.refine_rounds": 1,
    "oracle.coarse_R_points": 8,
    "experiment.seeds": [0, 1],
    "experiment.steps": 30,
    "experiment.eval_every": 10,
    "experiment.eval_states": 4,
    "experiment.contract_states": 2,
}


def _config(out_dir, algo="diffusion", **changes):
    config = config_from_mapping(TINY, "tiny")
    return config.with_experiment(out_dir=str(out_dir), algo=algo, **changes)


def _curve(algo, seed, rewards):
    return pd.DataFrame({
        "step": np.arange(1, len(rewards) + 1) * 10,
        "seed": seed,
        "algo": algo,
        "train_reward": rewards,
        "eval_mean_reward": rewards,
        "eval_feasibility_rate": 1.0,
        "eval_mean_client_utility": rewards,
        "eval_oracle_ratio": 0.5,
    })


# ---------------- run ----------------
def test_training_run_writes_tables_checkpoints_and_manifest(tmp_path):
    out = tmp_path / "diffusion"
    summary = run(_config(out))
    curves = pd.read_csv(out / "curves.csv")
    assert list(curves.columns) == CURVE_COLUMNS
    assert curves["seed"].tolist() == [0, 0, 0, 1, 1, 1]
    assert curves["step"].tolist() == [10, 20, 30] * 2
    contracts = pd.read_csv(out / "contracts.csv")
    assert list(contracts.columns) == CONTRACT_COLUMNS
    # two random states plus one stress variant, two types each, per seed
    assert len(contracts) == 12
    assert contracts["oracle_R_q"].notna().all()
    assert (out / "checkpoints" / "diffusion_seed0.npz").exists()
    assert (out / "checkpoints" / "diffusion_seed1.npz").exists()
    assert not (out / "_parts").exists()
    manifest = (out / "manifest.txt").read_text(encoding="utf-8")
    assert "command: train-diffusion" in manifest and "seeds: 0,1" in manifest
    assert "diffusion.T: 3" in manifest
    assert len(summary.seeds) == 2


def test_reruns_give_identical_csv_bytes(tmp_path):
    run(_config(tmp_path / "a", algo="ppo", seeds=(3,)))
    run(_config(tmp_path / "b", algo="ppo", seeds=(3,)))
    for name in ("curves.csv", "contracts.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_existing_manifest_needs_force(tmp_path):
    config = _config(tmp_path / "o", algo="oracle")
    run(config)
    with pytest.raises(DataError, match="already exists"):
        run(config)
    run(config, force=True)


def test_oracle_run_fills_only_oracle_columns(tmp_path):
    out = tmp_path / "oracle"
    run(_config(out, algo="oracle"))
    contracts = pd.read_csv(out / "contracts.csv")
    assert set(contracts["seed"]) == {0}
    assert contracts["L_q"].isna().all() and contracts["R_q"].isna().all()
    assert contracts["oracle_L_q"].notna().all()
    assert not (out / "curves.csv").exists()
    assert not (out / "checkpoints").exists()


# ---------------- compare ----------------
def test_convergence_step_uses_moving_average():
    curve = _curve("x", 0, [0.0] * 3 + [100.0] * 7)
    assert convergence_step(curve) == 80


def test_compare_identical_files_is_a_tie(tmp_path):
    path = write_csv(pd.concat([_curve("diffusion", s, [1.0, 2.0, 3.0]) for s in (0, 1)]), tmp_path / "c.csv")
    result = compare([path, path], tmp_path / "cmp")
    assert result.verdict.startswith("verdict: tie")
    assert set(result.table["algo"]) == {"diffusion#1", "diffusion#2"}
    assert result.table["convergence_step_mean"].nunique() == 1
    assert (tmp_path / "cmp" / "compare.csv").exists()


def test_compare_ranks_by_final_window(tmp_path):
    diff = write_csv(pd.concat([_curve("diffusion", s, [10.0, 50.0, 90.0 + s]) for s in (0, 1)]), tmp_path / "d.csv")
    ppo = write_csv(pd.concat([_curve("ppo", s, [5.0, 6.0, 7.0]) for s in (0, 1)]), tmp_path / "p.csv")
    result = compare([ppo, diff], tmp_path / "cmp", final_window=1)
    assert result.table["algo"].tolist() == ["diffusion", "ppo"]
    assert result.table["final_reward_mean"].tolist() == pytest.approx([90.5, 7.0])
    assert result.table["final_reward_std"].iloc[0] == pytest.approx(0.5)
    assert "diffusion leads ppo" in result.verdict


def test_compare_needs_two_seeds_and_two_algorithms(tmp_path):
    one_seed = write_csv(_curve("ppo", 0, [1.0, 2.0]), tmp_path / "p.csv")
    other = write_csv(pd.concat([_curve("diffusion", s, [1.0]) for s in (0, 1)]), tmp_path / "d.csv")
    with pytest.raises(DataError, match="2 seeds"):
        compare([one_seed, other], tmp_path)
    with pytest.raises(DataError, match="two algorithms"):
        compare([other], tmp_path)
    with pytest.raises(DataError, match="not found"):
        compare([tmp_path / "missing.csv", other], tmp_path)


# ---------------- evaluate ----------------
def test_oracle_evaluates_to_itself(tmp_path):
    record = evaluate(_config(tmp_path), "oracle", seed=7, count=3)
    assert record.algo == "oracle"
    assert record.feasibility_rate == 1.0
    assert record.mean_oracle_ratio == 1.0
    assert record.positive_utility_rate == 1.0
    write_evaluation(record, tmp_path / "eval")
    summary = pd.read_csv(tmp_path / "eval" / "evaluation.csv")
    assert summary["count"].tolist() == [3]
    assert len(pd.read_csv(tmp_path / "eval" / "contracts.csv")) == 6


def test_untrained_checkpoint_can_be_evaluated(tmp_path):
    config = _config(tmp_path)
    path = DiffusionAgent(config.sampler, config.econ, config.diffusion).save(tmp_path / "d.npz")
    record = evaluate(config, str(path), seed=1, count=3)
    assert record.algo == "diffusion"
    assert 0.0 <= record.feasibility_rate <= 1.0
    assert np.isfinite(record.mean_reward)


def test_unknown_checkpoint_kind_is_a_data_error(tmp_path):
    path = save_checkpoint(tmp_path / "x.npz", "sac", {"q": mlp(2, (2,), 1)})
    with pytest.raises(DataError, match="unknown policy kind"):
        evaluate(_config(tmp_path), str(path), seed=0, count=2)
    with pytest.raises(DataError):
        evaluate(_config(tmp_path), "oracle", seed=0, count=0)


# ---------------- command line ----------------
def test_cli_exit_codes(tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY), encoding="utf-8")
    out = tmp_path / "cli"
    assert contract_lab.main(["eval", "--config", str(cfg), "--checkpoint", "oracle", "--count", "2", "--out", str(out)]) == 0
    assert (out / "evaluation.csv").exists()

    bad = tmp_path / "bad.yaml"
    bad.write_text("market.colour: red\n", encoding="utf-8")
    assert contract_lab.main(["oracle", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert contract_lab.main(["compare", str(tmp_path / "none.csv"), str(tmp_path / "none2.csv"), "--out", str(out)]) == 3


def test_cli_oracle_run_then_refuses_overwrite(tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY), encoding="utf-8")
    args = ["oracle", "--config", str(cfg), "--seed", "5", "--out", str(tmp_path / "o")]
    assert contract_lab.main(args) == 0
    assert contract_lab.main(args) == 3
    assert contract_lab.main(args + ["--force"]) == 0
    assert set(pd.read_csv(tmp_path / "o" / "contracts.csv")["seed"]) == {5}


def test_worker_pool_matches_serial_run(tmp_path):
    run(_config(tmp_path / "serial", algo="ppo"))
    run(_config(tmp_path / "pooled", algo="ppo", workers=2))
    for name in ("curves.csv", "contracts.csv"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "pooled" / name).read_bytes()
    assert not (tmp_path / "pooled" / "_parts").exists()
    assert (tmp_path / "pooled" / "checkpoints" / "ppo_seed1.npz").exists()


def test_default_evaluation_set_solves_every_state():
    eval_set = evaluation_set_for(default_config())
    assert len(eval_set.oracle) == 200
    for state, sol in zip(eval_set.states, eval_set.oracle):
        assert np.all(sol.menu.L <= state.L_max)
        assert sol.feasible
