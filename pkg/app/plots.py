"""Training-curve and contract-table figures rendered as self-contained SVG."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn as sns  # noqa: E402

from evaluation import CONTRACT_COLUMNS, CURVE_COLUMNS  # noqa: E402
from helpers import DataError, ensure_outdir, read_csv  # noqa: E402

logger = logging.getLogger(__name__)

# fixed ids and no timestamp, so identical input gives identical bytes
SVG_RC = {"svg.hashsalt": "contract-lab", "svg.fonttype": "path"}
SVG_METADATA = {"Date": None}


def _check_numeric(df: pd.DataFrame, columns, path) -> None:
    for col in columns:
        if len(df) and not pd.api.types.is_numeric_dtype(df[col]):
            raise DataError(f"column '{col}' in {path} is not numeric")


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)
    logger.info(f"✅ Wrote {path}")
    return path


def plot_curves(curves: pd.DataFrame, path: Path) -> Path:
    """Eval reward vs step, one line per algorithm, band = seed standard deviation."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    if len(curves):
        sns.lineplot(
            data=curves,
            x="step",
            y="eval_mean_reward",
            hue="algo",
            hue_order=sorted(curves["algo"].unique()),
            estimator="mean",
            errorbar="sd",
            ax=ax,
        )
    ax.set_xlabel("environment step")
    ax.set_ylabel("mean client utility reward (held-out states)")
    ax.set_title("Training curves")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_contracts(contracts: pd.DataFrame, path: Path) -> Path:
    """Per-state latency and reward of each type's contract, policy bars against oracle markers."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    panels = (("L_q", "oracle_L_q", "latency bound L"), ("R_q", "oracle_R_q", "reward R"))
    if len(contracts):
        table = contracts.groupby(["state_id", "q"], as_index=False)[["L_q", "R_q", "oracle_L_q", "oracle_R_q"]].mean()
        for ax, (col, oracle_col, label) in zip(axes, panels):
            if table[col].notna().any():
                sns.barplot(data=table, x="state_id", y=col, hue="q", errorbar=None, ax=ax)
            if table[oracle_col].notna().any():
                for q, group in table.groupby("q"):
                    ax.scatter(group["state_id"].rank(method="dense") - 1, group[oracle_col], marker="x",
                               color="black", zorder=3, label=f"oracle q={q}")
            ax.set_ylabel(label)
    for ax, (_, _, label) in zip(axes, panels):
        ax.set_xlabel("state")
        ax.set_title(label)
    fig.tight_layout()
    return _save(fig, path)


def emit_plots(curves_csv, out_dir, contracts_csv: Optional[str] = None) -> List[Path]:
    """Figures from one curves CSV (or a list of them, stacked) and optionally a contracts CSV."""
    out = ensure_outdir(out_dir)
    paths = [curves_csv] if isinstance(curves_csv, (str, Path)) else list(curves_csv)
    with plt.rc_context(SVG_RC):
        frames = []
        for path in paths:
            frame = read_csv(path, CURVE_COLUMNS)
            _check_numeric(frame, ["step", "eval_mean_reward"], path)
            frames.append(frame)
        curves = pd.concat(frames, ignore_index=True) if len(frames) > 1 else frames[0]
        written = [plot_curves(curves, out / "curves.svg")]
        if contracts_csv is not None:
            contracts = read_csv(contracts_csv, CONTRACT_COLUMNS)
            _check_numeric(contracts, ["state_id", "q"], contracts_csv)
            written.append(plot_contracts(contracts, out / "contracts.svg"))
    return written
