"""
Experiment configuration.

A config file is ONE flat YAML mapping whose keys are dotted `section.field`
names, e.g.

    market.n: 50
    market.theta_ranges: [[10, 50], [50, 100]]
    diffusion.T: 8
    experiment.seeds: [0, 1, 2]

Sections: market, econ, oracle, diffusion, ppo, experiment. Any key not listed
in `config_keys()` is an error, as is a nested mapping or a value of the wrong
type; messages carry the 1-based line of the offending key. `econ.R_max`
defaults to e1 * max(theta)^z1 when omitted.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import yaml

from diffusion import DiffusionConfig
from helpers import ConfigError, DomainError, mapping_hash
from market import EconParams, SamplerConfig, default_reward_cap
from oracle import OracleConfig
from ppo import PPOConfig

logger = logging.getLogger(__name__)

ALGOS = ("diffusion", "ppo", "oracle")


@dataclass(frozen=True)
class ExperimentSettings:
    algo: str = "diffusion"
    seeds: Tuple[int, ...] = (0, 1, 2)
    steps: int = 50_000
    eval_every: int = 1000
    eval_states: int = 200
    eval_seed: int = 12345
    contract_seed: int = 2024
    contract_states: int = 10
    stress_p_first: Tuple[float, ...] = (0.05,)
    final_window: int = 5
    workers: int = 1
    out_dir: str = "runs/default"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "stress_p_first", tuple(float(p) for p in self.stress_p_first))
        if self.algo not in ALGOS:
            raise ConfigError(f"experiment.algo must be one of {ALGOS}, got '{self.algo}'")
        if not self.seeds:
            raise ConfigError("experiment.seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"experiment.seeds has duplicates: {list(self.seeds)}")
        for name in ("steps", "eval_every", "eval_states", "final_window", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"experiment.{name} must be >= 1, got {getattr(self, name)}")
        if self.contract_states < 0:
            raise ConfigError(f"experiment.contract_states must be >= 0, got {self.contract_states}")
        for p in self.stress_p_first:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"experiment.stress_p_first values must lie in [0, 1], got {p}")


SECTIONS = {
    "market": SamplerConfig,
    "econ": EconParams,
    "oracle": OracleConfig,
    "diffusion": DiffusionConfig,
    "ppo": PPOConfig,
    "experiment": ExperimentSettings,
}


@dataclass(frozen=True)
class ExperimentConfig:
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    econ: EconParams = field(default_factory=EconParams)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    source: Optional[str] = None

    def sections(self) -> Dict[str, object]:
        return {
            "market": self.sampler,
            "econ": self.econ,
            "oracle": self.oracle,
            "diffusion": self.diffusion,
            "ppo": self.ppo,
            "experiment": self.experiment,
        }

    def flat(self) -> Dict[str, object]:
        """Every resolved key, dotted, with tuples as lists."""
        out: Dict[str, object] = {}
        for section, obj in self.sections().items():
            for f in dataclasses.fields(obj):
                out[f"{section}.{f.name}"] = _plain(getattr(obj, f.name))
        return out

    def config_lines(self) -> List[str]:
        return [f"{k}: {json.dumps(v)}" for k, v in sorted(self.flat().items())]

    @property
    def config_hash(self) -> str:
        return mapping_hash(self.flat())

    def with_experiment(self, **changes) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, **changes))


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


# ---------------- Value coercion ----------------
def _as_int(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"expected an integer, got {value!r}")
    return value


def _as_float(value) -> float:
    if isinstance(value, bool):
        raise TypeError(f"expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        # YAML 1.1 reads '1e-3' as a string
        try:
            return float(value)
        except ValueError:
            pass
    raise TypeError(f"expected a number, got {value!r}")


def _as_str(value) -> str:
    if not isinstance(value, str):
        raise TypeError(f"expected a string, got {value!r}")
    return value


def _optional(inner: Callable):
    return lambda v: None if v is None else inner(v)


def _seq(inner: Callable, length: Optional[int] = None):
    def coerce(value):
        if not isinstance(value, (list, tuple)):
            raise TypeError(f"expected a list, got {value!r}")
        if length is not None and len(value) != length:
            raise TypeError(f"expected a list of length {length}, got {value!r}")
        return tuple(inner(v) for v in value)
    return coerce


_COERCERS: Dict[str, Callable] = {
    "int": _as_int,
    "float": _as_float,
    "str": _as_str,
    "Optional[int]": _optional(_as_int),
    "Optional[float]": _optional(_as_float),
    "Tuple[int, ...]": _seq(_as_int),
    "Tuple[float, ...]": _seq(_as_float),
    "Tuple[float, float]": _seq(_as_float, 2),
    "Tuple[Tuple[float, float], ...]": _seq(_seq(_as_float, 2)),
}


def config_keys() -> Dict[str, Callable]:
    keys = {}
    for section, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            keys[f"{section}.{f.name}"] = _COERCERS[str(f.type)]
    return keys


# ---------------- Loading ----------------
def _where(source: str, lines: Mapping[str, int], key: str) -> str:
    line = lines.get(key)
    return f"{source}:{line}" if line is not None else source


def _key_lines(text: str, source: str) -> Dict[str, int]:
    """1-based line of each top-level key; rejects non-mappings, nesting and duplicates."""
    try:
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}")
    if root is None:
        return {}
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError(f"{source}:{root.start_mark.line + 1}: config must be a mapping of dotted keys")
    lines: Dict[str, int] = {}
    for key_node, value_node in root.value:
        key, line = str(key_node.value), key_node.start_mark.line + 1
        if key in lines:
            raise ConfigError(f"{source}:{line}: duplicate key '{key}' (first on line {lines[key]})")
        if isinstance(value_node, yaml.MappingNode):
            raise ConfigError(f"{source}:{line}: nested mapping under '{key}'; use dotted keys such as '{key}.field'")
        lines[key] = line
    return lines


def config_from_mapping(raw: Mapping[str, object], source: str = "<config>", lines: Optional[Mapping[str, int]] = None) -> ExperimentConfig:
    lines = lines or {}
    known = config_keys()
    values: Dict[str, Dict[str, object]] = {s: {} for s in SECTIONS}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"{_where(source, lines, key)}: unknown key '{key}'")
        try:
            coerced = known[key](value)
        except TypeError as exc:
            raise ConfigError(f"{_where(source, lines, key)}: bad value for '{key}': {exc}")
        section, name = key.split(".", 1)
        values[section][name] = coerced

    def build(section: str, **extra):
        try:
            return SECTIONS[section](**{**values[section], **extra})
        except (ConfigError, DomainError) as exc:
            message = str(exc)
            for key in sorted(lines, key=len, reverse=True):
                if key in message:
                    raise ConfigError(f"{_where(source, lines, key)}: {message}")
            raise ConfigError(f"{source}: {message}")

    sampler = build("market")
    econ_extra = {}
    if "R_max" not in values["econ"]:
        e1 = values["econ"].get("e1", EconParams.e1)
        z1 = values["econ"].get("z1", EconParams.z1)
        econ_extra["R_max"] = default_reward_cap(e1, z1, sampler.theta_ranges)
    return ExperimentConfig(
        sampler=sampler,
        econ=build("econ", **econ_extra),
        oracle=build("oracle"),
        diffusion=build("diffusion"),
        ppo=build("ppo"),
        experiment=build("experiment"),
        source=source,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = _key_lines(text, str(path))
    raw = yaml.safe_load(text) or {}
    config = config_from_mapping(raw, str(path), lines)
    logger.info(f"Loaded config {path} (hash {config.config_hash[:12]})")
    return config


def default_config() -> ExperimentConfig:
    return config_from_mapping({}, "<defaults>")
