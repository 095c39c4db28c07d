"""
Configuration file handling for flowrft.

A run is described by one flat dictionary. Files are discovered in the
working directory and then the home directory; a method preset fills the
schedule, intra-group and regularizer settings before user values are
applied, so explicit values always win.
"""

import json
import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

try:
    import yaml
    HAS_YAML = True
except ImportError:
    HAS_YAML = False

from . import constants as C
from .cpgo import CpgoConfig
from .dgr import GranularitySchedule
from .model import ModelArch
from .objectives import ClipConfig
from .rewards import RewardSpec
from .sde import NoiseSchedule
from .trajectory import TimeGrid

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised when a configuration is malformed or violates a precondition."""
    pass


DEFAULT_CONFIG: Dict[str, Any] = {
    "schema_version": C.CONFIG_SCHEMA_VERSION,
    "seed": 0,
    "method": "consistent_rft",
    "out_dir": "runs/default",
    "checkpoint": None,
    # model
    "data_dim": 2,
    "hidden_widths": list(C.DEFAULT_HIDDEN_WIDTHS),
    "activation": "silu",
    "time_embed_dim": C.DEFAULT_TIME_EMBED_DIM,
    "cond_dim": C.DEFAULT_COND_DIM,
    # toy data
    "n_modes": C.DEFAULT_N_MODES,
    "mixture_radius": C.DEFAULT_MIXTURE_RADIUS,
    "mixture_std": C.DEFAULT_MIXTURE_STD,
    "dataset_size": 20000,
    # grid
    "num_steps": C.DEFAULT_NUM_STEPS,
    "shift": C.DEFAULT_SHIFT,
    # rollout
    "group_size": C.DEFAULT_GROUP_SIZE,
    "eta": C.DEFAULT_ETA,
    "noise_mode": "constant",
    "perception_knot": C.DEFAULT_PERCEPTION_KNOT,
    "cluster_size": C.DEFAULT_CLUSTER_SIZE,
    "kmeans_iters": C.DEFAULT_KMEANS_ITERS,
    # inter-group schedule
    "schedule_mode": "dynamic",
    "schedule_period": C.DEFAULT_SCHEDULE_PERIOD,
    "coarse_ratio": C.DEFAULT_COARSE_RATIO,
    "intra_group": True,
    # objectives
    "clip_range": C.DEFAULT_CLIP_RANGE,
    "adv_clip_max": C.DEFAULT_ADV_CLIP_MAX,
    "timestep_fraction": C.DEFAULT_TIMESTEP_FRACTION,
    "dpo_beta": C.DEFAULT_DPO_BETA,
    "ddpo_group_based": True,
    # consistency regularizer
    "cpgo_weight": C.DEFAULT_CPGO_WEIGHT,
    "cpgo_tau": C.DEFAULT_CPGO_TAU,
    # optimizer
    "learning_rate": C.DEFAULT_LEARNING_RATE,
    "weight_decay": C.DEFAULT_WEIGHT_DECAY,
    "max_grad_norm": C.DEFAULT_MAX_GRAD_NORM,
    "iterations": 200,
    "updates_per_iteration": 1,
    "grad_accum_steps": C.DEFAULT_GRAD_ACCUM_STEPS,
    "prompts_per_iteration": C.DEFAULT_PROMPTS_PER_ITERATION,
    # pretraining
    "pretrain_steps": 5000,
    "pretrain_learning_rate": 1e-3,
    "pretrain_batch_size": 256,
    # reward
    "reward": {"kind": "target_distance"},
    # evaluation and logging
    "eval_probes": 16,
    "log_wall_time": False,
    "dump_trajectories": False,
    "diag_seeds": 100,
    "diag_knots": None,
    "verify_probes": 8,
}

# Settings each method implies; user values override them.
METHOD_PRESETS: Dict[str, Dict[str, Any]] = {
    "grpo": {"schedule_mode": "fine", "intra_group": False, "cpgo_weight": 0.0},
    "fine": {"schedule_mode": "fine", "intra_group": True, "cpgo_weight": 0.0},
    "coarse": {"schedule_mode": "coarse", "intra_group": True, "cpgo_weight": 0.0},
    "consistent_rft": {"schedule_mode": "dynamic", "intra_group": True, "cpgo_weight": C.DEFAULT_CPGO_WEIGHT},
    "dpo": {"schedule_mode": "fine", "intra_group": False, "cpgo_weight": 0.0},
    "ddpo": {"schedule_mode": "fine", "intra_group": False, "cpgo_weight": 0.0},
}

PRESET_KEYS = frozenset(key for preset in METHOD_PRESETS.values() for key in preset)

BASE_OBJECTIVE = {
    "grpo": "grpo",
    "fine": "grpo",
    "coarse": "grpo",
    "consistent_rft": "grpo",
    "dpo": "dpo",
    "ddpo": "ddpo",
}


def _positive_int(x) -> bool:
    return not isinstance(x, bool) and x > 0


def _fraction(x) -> bool:
    return 0.0 < x <= 1.0


_NUMBER = (int, float)
_TYPE_CHECKS = {
    "schema_version": (int, lambda x: x >= 0),
    "seed": (int, lambda x: x >= 0),
    "method": (str, lambda x: x in C.METHODS),
    "out_dir": (str, lambda x: len(x.strip()) > 0),
    "checkpoint": ((str, type(None)), lambda x: True),
    "data_dim": (int, _positive_int),
    "hidden_widths": (list, lambda x: len(x) > 0 and all(isinstance(w, int) and w > 0 for w in x)),
    "activation": (str, lambda x: x in C.SUPPORTED_ACTIVATIONS),
    "time_embed_dim": (int, lambda x: x > 0 and x % 2 == 0),
    "cond_dim": (int, _positive_int),
    "n_modes": (int, _positive_int),
    "mixture_radius": (_NUMBER, lambda x: x > 0),
    "mixture_std": (_NUMBER, lambda x: x > 0),
    "dataset_size": (int, _positive_int),
    "num_steps": (int, _positive_int),
    "shift": (_NUMBER, lambda x: x > 0),
    "group_size": (int, lambda x: x >= 2),
    "eta": (_NUMBER, lambda x: x >= 0),
    "noise_mode": (str, lambda x: x in ("constant", "linear")),
    "perception_knot": (int, lambda x: x >= 0),
    "cluster_size": (int, _positive_int),
    "kmeans_iters": (int, _positive_int),
    "schedule_mode": (str, lambda x: x in C.SCHEDULE_MODES),
    "schedule_period": (int, _positive_int),
    "coarse_ratio": (_NUMBER, lambda x: 0.0 <= x <= 1.0),
    "intra_group": (bool, lambda x: True),
    "clip_range": (_NUMBER, lambda x: x > 0),
    "adv_clip_max": (_NUMBER, lambda x: x > 0),
    "timestep_fraction": (_NUMBER, _fraction),
    "dpo_beta": (_NUMBER, lambda x: x > 0),
    "ddpo_group_based": (bool, lambda x: True),
    "cpgo_weight": (_NUMBER, lambda x: x >= 0),
    "cpgo_tau": (_NUMBER, lambda x: 0.0 <= x <= 1.0),
    "learning_rate": (_NUMBER, lambda x: x > 0),
    "weight_decay": (_NUMBER, lambda x: x >= 0),
    "max_grad_norm": (_NUMBER, lambda x: x > 0),
    "iterations": (int, lambda x: x >= 0),
    "updates_per_iteration": (int, _positive_int),
    "grad_accum_steps": (int, _positive_int),
    "prompts_per_iteration": (int, _positive_int),
    "pretrain_steps": (int, lambda x: x >= 0),
    "pretrain_learning_rate": (_NUMBER, lambda x: x > 0),
    "pretrain_batch_size": (int, _positive_int),
    "reward": (dict, lambda x: "kind" in x),
    "eval_probes": (int, lambda x: x >= 0),
    "log_wall_time": (bool, lambda x: True),
    "dump_trajectories": (bool, lambda x: True),
    "diag_seeds": (int, _positive_int),
    "diag_knots": ((list, type(None)), lambda x: x is None or all(isinstance(k, int) and k >= 0 for k in x)),
    "verify_probes": (int, _positive_int),
}


def _validate_config_types(config: Dict[str, Any]) -> Optional[str]:
    """Validate that config values have correct types and ranges."""
    for key, (expected_types, validator) in _TYPE_CHECKS.items():
        if key not in config:
            continue
        value = config[key]
        # bool is an int subclass; only accept it where bool is expected
        if isinstance(value, bool) and expected_types is not bool:
            return f"Invalid type for '{key}': expected {expected_types}, got bool"
        if not isinstance(value, expected_types):
            return f"Invalid type for '{key}': expected {expected_types}, got {type(value).__name__}"
        if not validator(value):
            return f"Invalid value for '{key}': {value}"
    return None


def _validate_cross_fields(config: Dict[str, Any]) -> Optional[str]:
    """Check the preconditions that tie fields together."""
    K = config["group_size"]
    T = config["num_steps"]
    if not 1 <= config["cluster_size"] <= K:
        return f"cluster_size must lie in 1..group_size ({K}), got {config['cluster_size']}"
    if config["perception_knot"] > T:
        return f"perception_knot must lie in 0..num_steps ({T}), got {config['perception_knot']}"
    if config["schedule_mode"] == "dynamic":
        try:
            GranularitySchedule.from_ratio(config["schedule_period"], config["coarse_ratio"])
        except ValueError as e:
            return str(e)
    if config["diag_knots"] is not None and any(k > T for k in config["diag_knots"]):
        return f"diag_knots must lie in 0..num_steps ({T})"
    if config["n_modes"] < 1:
        return "n_modes must be positive"
    try:
        RewardSpec.from_dict(config["reward"])
    except TypeError as e:
        return f"Invalid reward spec: {e}"
    return None


def migrate_config(data: Dict[str, Any]) -> Dict[str, Any]:
    """
    Bring a loaded config to the current schema.

    Version 0 files carry no ``schema_version`` key. Keys starting with an
    underscore are comments and are dropped.

    Raises:
        ConfigError: If the file comes from a newer schema
    """
    data = {k: v for k, v in data.items() if not str(k).startswith("_")}
    version = data.get("schema_version", 0)
    if not isinstance(version, int) or isinstance(version, bool):
        raise ConfigError(f"schema_version must be an integer, got {version!r}")
    if version > C.CONFIG_SCHEMA_VERSION:
        raise ConfigError(
            f"config schema_version {version} is newer than supported ({C.CONFIG_SCHEMA_VERSION})"
        )
    if version == 0:
        data["schema_version"] = 1
    return data


def resolve_config(user_config: Dict[str, Any]) -> Dict[str, Any]:
    """
    Merge defaults, the method preset and user values, then validate.

    Raises:
        ConfigError: On unknown keys, bad types, or violated preconditions
    """
    user_config = migrate_config(user_config)
    unknown = set(user_config) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(
            f"Unknown configuration keys: {', '.join(sorted(unknown))}. "
            f"Valid keys: {', '.join(sorted(DEFAULT_CONFIG))}"
        )
    error = _validate_config_types(user_config)
    if error:
        raise ConfigError(error)

    config = json.loads(json.dumps(DEFAULT_CONFIG))
    config.update(METHOD_PRESETS[user_config.get("method", config["method"])])
    config.update(user_config)

    error = _validate_config_types(config) or _validate_cross_fields(config)
    if error:
        raise ConfigError(error)
    return config


def get_config_paths() -> List[Path]:
    """
    Get all possible configuration file paths, most specific first.

    1. Current directory: .flowrftrc, flowrft.config.yaml, .flowrft.json
    2. Home directory: .flowrftrc, flowrft.config.yaml, .flowrft.json
    """
    names = (".flowrftrc", "flowrft.config.yaml", ".flowrft.json")
    home = os.environ.get("HOME") or os.path.expanduser("~")
    return [Path.cwd() / n for n in names] + [Path(home) / n for n in names]


def _parse_rc(config_path: Path) -> Tuple[Dict[str, Any], Optional[str]]:
    user_config: Dict[str, Any] = {}
    with open(config_path, "r", encoding="utf-8") as f:
        for line_num, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                return {}, f"Invalid line {line_num} in {config_path.name}: expected key=value format"
            key, value = line.split("=", 1)
            try:
                user_config[key.strip()] = json.loads(value.strip())
            except (json.JSONDecodeError, ValueError):
                user_config[key.strip()] = value.strip()
    return user_config, None


def load_config_file(config_path: Path) -> Tuple[Dict[str, Any], Optional[str]]:
    """
    Load configuration from a specific file, auto-detecting format.

    Returns:
        Tuple of (config_dict, error_message); a missing file is ({}, None)
    """
    config_path = Path(config_path)
    if not config_path.exists():
        return {}, None

    try:
        if config_path.suffix.lower() in (".yaml", ".yml"):
            if not HAS_YAML:
                return {}, f"YAML support not available (install PyYAML to use {config_path.name})"
            with open(config_path, "r", encoding="utf-8") as f:
                user_config = yaml.safe_load(f) or {}
        elif config_path.suffix.lower() == ".rc" or config_path.name.endswith("rc"):
            user_config, error = _parse_rc(config_path)
            if error:
                return {}, error
        else:
            with open(config_path, "r", encoding="utf-8") as f:
                user_config = json.load(f)

        if not isinstance(user_config, dict):
            return {}, f"Invalid configuration in {config_path.name}: expected a mapping"
        user_config = migrate_config(user_config)

        unknown_keys = set(user_config) - set(DEFAULT_CONFIG)
        if unknown_keys:
            return {}, (
                f"Unknown configuration keys in {config_path.name}: {', '.join(sorted(unknown_keys))}. "
                f"Valid keys: {', '.join(sorted(DEFAULT_CONFIG))}"
            )
        validation_error = _validate_config_types(user_config)
        if validation_error:
            return {}, f"Invalid configuration in {config_path.name}: {validation_error}"
        return user_config, None

    except json.JSONDecodeError as e:
        return {}, f"Invalid JSON in {config_path.name}: {e}"
    except ConfigError as e:
        return {}, f"Invalid configuration in {config_path.name}: {e}"
    except Exception as e:
        if HAS_YAML and isinstance(e, yaml.YAMLError):
            return {}, f"Invalid YAML in {config_path.name}: {e}"
        return {}, f"Error reading {config_path.name}: {e}"


@dataclass
class ExperimentConfig:
    """
    Validated experiment configuration.

    Fields mirror DEFAULT_CONFIG one-to-one; the helper methods build the
    typed settings each module expects.
    """
    schema_version: int
    seed: int
    method: str
    out_dir: str
    checkpoint: Optional[str]
    data_dim: int
    hidden_widths: List[int]
    activation: str
    time_embed_dim: int
    cond_dim: int
    n_modes: int
    mixture_radius: float
    mixture_std: float
    dataset_size: int
    num_steps: int
    shift: float
    group_size: int
    eta: float
    noise_mode: str
    perception_knot: int
    cluster_size: int
    kmeans_iters: int
    schedule_mode: str
    schedule_period: int
    coarse_ratio: float
    intra_group: bool
    clip_range: float
    adv_clip_max: float
    timestep_fraction: float
    dpo_beta: float
    ddpo_group_based: bool
    cpgo_weight: float
    cpgo_tau: float
    learning_rate: float
    weight_decay: float
    max_grad_norm: float
    iterations: int
    updates_per_iteration: int
    grad_accum_steps: int
    prompts_per_iteration: int
    pretrain_steps: int
    pretrain_learning_rate: float
    pretrain_batch_size: int
    reward: Dict[str, Any]
    eval_probes: int
    log_wall_time: bool
    dump_trajectories: bool
    diag_seeds: int
    diag_knots: Optional[List[int]]
    verify_probes: int

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        return cls(**resolve_config(data))

    @classmethod
    def default(cls, **overrides) -> "ExperimentConfig":
        return cls.from_dict(overrides)

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: json.loads(json.dumps(getattr(self, f.name))) for f in fields(self)}

    def replace(self, **changes) -> "ExperimentConfig":
        """
        Copy with some fields changed.

        Switching ``method`` re-applies presets: fields still holding the old
        method's preset value take the new method's preset, fields set to
        anything else are kept.
        """
        data = self.to_dict()
        if changes.get("method", self.method) != self.method:
            for key, value in METHOD_PRESETS[self.method].items():
                if data[key] == value:
                    del data[key]
        data.update(changes)
        return ExperimentConfig.from_dict(data)

    @property
    def objective(self) -> str:
        return BASE_OBJECTIVE[self.method]

    @property
    def out_path(self) -> Path:
        return Path(self.out_dir)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.out_path / "pretrained.ckpt"

    def arch(self) -> ModelArch:
        return ModelArch(
            data_dim=self.data_dim,
            hidden_widths=tuple(self.hidden_widths),
            activation=self.activation,
            time_embed_dim=self.time_embed_dim,
            cond_dim=self.cond_dim,
            n_conditions=self.n_modes,
        )

    def grid(self) -> TimeGrid:
        return TimeGrid.build(self.num_steps, self.shift)

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(eta=self.eta, mode=self.noise_mode)

    def clip(self) -> ClipConfig:
        return ClipConfig(epsilon=self.clip_range, adv_clip=self.adv_clip_max)

    def cpgo(self) -> CpgoConfig:
        return CpgoConfig(omega=self.cpgo_weight, tau=self.cpgo_tau)

    def granularity_schedule(self) -> GranularitySchedule:
        return GranularitySchedule.from_ratio(self.schedule_period, self.coarse_ratio, mode=self.schedule_mode)

    def reward_spec(self) -> RewardSpec:
        data = dict(self.reward)
        data.setdefault("n_modes", self.n_modes)
        data.setdefault("radius", self.mixture_radius)
        return RewardSpec.from_dict(data)


def create_example_config() -> str:
    """Create an example configuration file content."""
    example = {"_comment": "flowrft configuration - place at ./.flowrft.json or ~/.flowrft.json"}
    # preset-controlled keys are left to the method preset
    example.update({k: v for k, v in DEFAULT_CONFIG.items() if k not in PRESET_KEYS})
    return json.dumps(example, indent=2, sort_keys=False)


# Global config cache
_config_cache = None
_config_error = None


def get_global_config() -> Tuple[Dict[str, Any], Optional[str]]:
    """
    Get the merged user configuration from the discovered files, cached.

    Files closer to the working directory take precedence.
    """
    global _config_cache, _config_error

    if _config_cache is None:
        config: Dict[str, Any] = {}
        errors = []
        for config_path in reversed(get_config_paths()):
            user_config, error = load_config_file(config_path)
            if error:
                errors.append(error)
                continue
            if user_config:
                logger.debug(f"Loaded configuration from {config_path}")
            config.update(user_config)
        _config_cache = config
        _config_error = "; ".join(errors) if errors else None

    return dict(_config_cache), _config_error


def clear_config_cache():
    """Clear the configuration cache (useful for testing)."""
    global _config_cache, _config_error
    _config_cache = None
    _config_error = None


def load_experiment_config(
    config_path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None
) -> ExperimentConfig:
    """
    Build the run configuration: discovered files (or ``config_path``), then
    ``overrides`` (CLI flags).

    Raises:
        ConfigError: If any source is invalid
    """
    if config_path is not None:
        if not Path(config_path).exists():
            raise ConfigError(f"config file not found: {config_path}")
        user_config, error = load_config_file(Path(config_path))
    else:
        user_config, error = get_global_config()
    if error:
        raise ConfigError(error)
    user_config = dict(user_config)
    user_config.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(user_config)
