from typing import Dict, Iterable, List, Optional, Sequence
import hashlib
import json
import logging
import platform
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9
CSV_FLOAT_FORMAT = "%.10g"


# ---------------- Error family ----------------
class ContractLabError(Exception):
    """Base class for every error raised by the contract lab."""


class ConfigError(ContractLabError):
    """Invalid or unreadable experiment configuration (CLI exit code 2)."""


class DataError(ContractLabError):
    """Missing/malformed data on disk or in memory (CLI exit code 3)."""


class CheckpointError(DataError):
    """Checkpoint missing, of the wrong kind or of another format version."""


class DomainError(ContractLabError, ValueError):
    """Economic or numerical input outside its admissible domain."""


class DivergenceError(DataError):
    """Training produced non-finite network parameters."""


# ---------------- Output directory helpers ----------------
def ensure_outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed_part_path(out_dir, stem: str, seed: int) -> Path:
    base = Path(out_dir) / "_parts"
    return base / f"{stem}.seed{seed}.csv"


def write_csv(df: pd.DataFrame, path) -> Path:
    """Write a CSV in the lab's dialect: comma, header, LF, UTF-8, fixed float format."""
    path = Path(path)
    ensure_outdir(path.parent)
    df.to_csv(path, index=False, lineterminator="\n", encoding="utf-8", float_format=CSV_FLOAT_FORMAT)
    return path


def read_csv(path, required_columns: Sequence[str] = ()) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise DataError(f"CSV not found: {path}")
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise DataError(f"CSV has no header row: {path}")
    except Exception as exc:
        raise DataError(f"Failed to read CSV {path}: {exc}")
    missing = [c for c in required_columns if c not in df.columns]
    if missing:
        raise DataError(f"CSV {path} is missing columns: {', '.join(missing)}")
    return df


def save_seed_part(df: pd.DataFrame, out_dir, stem: str, seed: int) -> Path:
    return write_csv(df, _seed_part_path(out_dir, stem, seed))


def merge_seed_parts(out_dir, stem: str, seeds: Iterable[int], sort_by: List[str]) -> Optional[pd.DataFrame]:
    """Merge per-seed part files into `<stem>.csv`, sorted deterministically, and remove the parts."""
    frames: List[pd.DataFrame] = []
    for seed in seeds:
        part = _seed_part_path(out_dir, stem, seed)
        if part.exists():
            frames.append(pd.read_csv(part))
            part.unlink()
    parts_dir = Path(out_dir) / "_parts"
    if parts_dir.exists() and not any(parts_dir.iterdir()):
        parts_dir.rmdir()
    if not frames:
        return None
    merged = pd.concat(frames, ignore_index=True)
    merged = merged.sort_values(sort_by, kind="mergesort").reset_index(drop=True)
    write_csv(merged, Path(out_dir) / f"{stem}.csv")
    return merged


# ---------------- Seeds ----------------
def parse_seed_list(text: str) -> List[int]:
    try:
        seeds = [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"--seed expects comma separated integers, got '{text}'")
    if not seeds:
        raise ConfigError("seed list must be nonempty")
    return seeds


def derive_seed(base_seed: int, *stream: int) -> int:
    """Independent child seed for a named stream (e.g. eval states vs training states)."""
    seq = np.random.SeedSequence([int(base_seed), *[int(s) for s in stream]])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


# ---------------- Manifest ----------------
def mapping_hash(mapping: Dict[str, object]) -> str:
    canonical = json.dumps(mapping, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def build_identifier() -> str:
    import torch

    return (
        f"python={platform.python_version()} numpy={np.__version__} "
        f"pandas={pd.__version__} torch={torch.__version__}"
    )


def write_manifest(out_dir, fields: Dict[str, object], config_lines: List[str], force: bool = False) -> Path:
    path = Path(out_dir) / "manifest.txt"
    if path.exists() and not force:
        raise DataError(f"{path} already exists; pass --force to overwrite")
    ensure_outdir(path.parent)
    lines = ["# contract lab run manifest"]
    for key, value in fields.items():
        lines.append(f"{key}: {value}")
    lines.append("--- resolved config ---")
    lines.extend(config_lines)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"✅ Wrote manifest {path}")
    return path


def manifest_exists(out_dir) -> bool:
    return (Path(out_dir) / "manifest.txt").exists()

