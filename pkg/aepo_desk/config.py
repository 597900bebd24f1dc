"""Run configuration: flat key table, key=value files and validation."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from aepo_desk.errors import ConfigError, StorageError
from aepo_desk.policy.advantages import EntropyScope
from aepo_desk.policy.update import UpdateRule
from aepo_desk.rollout.engine import DecideMode, RolloutConfig, RolloutMode
from aepo_desk.world.tasks import parse_depths
from aepo_desk.world.vocab import Vocabulary

logger = logging.getLogger(__name__)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional_float(text: str) -> float | None:
    text = text.strip()
    return None if text in ("", "none", "auto") else float(text)


@dataclass(frozen=True)
class ConfigKey:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.lower().replace("_", "-")


CONFIG_KEYS: tuple[ConfigKey, ...] = (
    ConfigKey("seed", int, 0, "Master seed"),
    ConfigKey("vocab_size", int, 24, "Vocabulary size V (>= 10)"),
    ConfigKey("max_len", int, 64, "Episode cap in response tokens"),
    ConfigKey("temperature", float, 0.6, "Decoding temperature"),
    ConfigKey("feature_cap", float, 4.0, "Norm cap on state features"),
    ConfigKey("num_tasks", int, 64, "Number of generated tasks"),
    ConfigKey("task_depths", str, "2", "Comma-separated task depths (0-3)"),
    ConfigKey("task_file", str, "", "Load tasks from a JSONL file instead of generating"),
    ConfigKey("tool_failure_rate", float, 0.0, "Probability a tool call returns ERROR"),
    ConfigKey("k", int, 8, "Rollout budget per query"),
    ConfigKey("group_size", int, 8, "Advantage group size (must equal k)"),
    ConfigKey("beta_sens", float, 0.2, "Sensitivity of the global/branch split"),
    ConfigKey("alpha_base", float, 0.2, "Base branch probability"),
    ConfigKey("gamma_ent", float, 0.2, "Entropy coefficient of the branch probability"),
    ConfigKey("lambda_pen", float, 0.2, "Consecutive-branch penalty slope"),
    ConfigKey("tau_branch", float, 0.15, "Branch threshold"),
    ConfigKey("Z", int, 2, "Branch width"),
    ConfigKey("root_window", int, 16, "Token window for the root entropy"),
    ConfigKey("decide_mode", str, "threshold", "Branch decision: threshold or bernoulli"),
    ConfigKey("rollout_mode", str, "aepo", "Rollout: aepo, tree or flat"),
    ConfigKey("rule", str, "aepo", "Update rule: aepo, grpo, dapo, cispo or gppo"),
    ConfigKey("eps_low", float, 0.2, "Lower clip epsilon"),
    ConfigKey("eps_high", _parse_optional_float, None, "Upper clip epsilon (dapo: 0.28)"),
    ConfigKey("gppo_beta1", float, 1.0, "GPPO lower-region gradient scale"),
    ConfigKey("gppo_beta2", float, 1.0, "GPPO upper-region gradient scale"),
    ConfigKey("kl_coef", float, 0.0, "KL penalty coefficient"),
    ConfigKey("a_weight", float, 0.2, "Entropy advantage weight a"),
    ConfigKey("entropy_adv_scope", str, "trajectory", "Entropy advantage scope"),
    ConfigKey("lr", float, 0.3, "Learning rate"),
    ConfigKey("batch", int, 16, "Queries per training step"),
    ConfigKey("steps", int, 500, "Training steps"),
    ConfigKey("minibatches", int, 4, "Mini-batches per step"),
    ConfigKey("update_epochs", int, 4, "Passes over each step's tokens"),
    ConfigKey("warmstart_steps", int, 100, "Scripted-solution likelihood steps"),
    ConfigKey("warmstart_lr", float, 0.5, "Learning rate of the warm start"),
    ConfigKey("workers", int, 1, "Parallel rollout workers"),
    ConfigKey("checkpoint_every", int, 100, "Checkpoint interval in steps (0: final only)"),
    ConfigKey("dump_pools", _parse_bool, False, "Write rollout pools to pools/"),
    ConfigKey("eval_samples", int, 5, "Samples per task for Pass@k"),
    ConfigKey("out_dir", str, "runs/default", "Run directory"),
)

KEYS_BY_NAME: dict[str, ConfigKey] = {key.name: key for key in CONFIG_KEYS}


def coerce(name: str, raw: Any) -> Any:
    """Convert a raw value (usually text) for config key ``name``."""
    key = KEYS_BY_NAME.get(name)
    if key is None:
        raise ConfigError(f"Unknown config key: {name}")
    if not isinstance(raw, str):
        return raw
    try:
        return key.parse(raw)
    except ValueError:
        raise ConfigError(f"Invalid value for {name}: {raw!r}") from None


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs; built from the flat key table."""

    rollout: RolloutConfig
    rule: UpdateRule
    seed: int = 0
    vocab_size: int = 24
    max_len: int = 64
    temperature: float = 0.6
    feature_cap: float = 4.0
    num_tasks: int = 64
    task_depths: str = "2"
    task_file: str = ""
    tool_failure_rate: float = 0.0
    group_size: int = 8
    a_weight: float = 0.2
    entropy_adv_scope: EntropyScope = EntropyScope.TRAJECTORY
    lr: float = 0.3
    batch: int = 16
    steps: int = 500
    minibatches: int = 4
    update_epochs: int = 4
    warmstart_steps: int = 100
    warmstart_lr: float = 0.5
    workers: int = 1
    checkpoint_every: int = 100
    dump_pools: bool = False
    eval_samples: int = 5
    out_dir: str = "runs/default"

    def __post_init__(self) -> None:
        if self.group_size != self.rollout.k:
            raise ConfigError(
                f"group_size ({self.group_size}) must equal k ({self.rollout.k}); "
                "each query's pool is one advantage group"
            )
        positive = ("max_len", "num_tasks", "batch", "minibatches", "update_epochs", "workers")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.eval_samples < 1:
            raise ConfigError(f"eval_samples must be >= 1, got {self.eval_samples}")
        if self.steps < 0 or self.checkpoint_every < 0 or self.warmstart_steps < 0:
            raise ConfigError("steps, checkpoint_every and warmstart_steps must be >= 0")
        if not min(self.temperature, self.feature_cap, self.lr, self.warmstart_lr) > 0:
            raise ConfigError("temperature, feature_cap, lr and warmstart_lr must be > 0")
        if not 0.0 <= self.tool_failure_rate <= 1.0:
            raise ConfigError(f"tool_failure_rate must be in [0, 1], got {self.tool_failure_rate}")
        try:
            object.__setattr__(self, "entropy_adv_scope", EntropyScope(self.entropy_adv_scope))
        except ValueError:
            raise ConfigError(
                f"entropy_adv_scope must be trajectory or group, got {self.entropy_adv_scope!r}"
            ) from None
        self.vocab()
        self.depths()

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "RunConfig":
        unknown = sorted(set(mapping) - set(KEYS_BY_NAME))
        if unknown:
            raise ConfigError(f"Unknown config key(s): {', '.join(unknown)}")

        v = {key.name: key.default for key in CONFIG_KEYS}
        for name, raw in mapping.items():
            v[name] = coerce(name, raw)

        for name, enum in (("decide_mode", DecideMode), ("rollout_mode", RolloutMode)):
            try:
                enum(v[name])
            except ValueError:
                choices = ", ".join(e.value for e in enum)
                raise ConfigError(f"{name} must be one of {choices}, got {v[name]!r}") from None

        rollout = RolloutConfig(
            k=v["k"],
            beta_sens=v["beta_sens"],
            alpha_base=v["alpha_base"],
            gamma_ent=v["gamma_ent"],
            lambda_pen=v["lambda_pen"],
            tau_branch=v["tau_branch"],
            branch_width=v["Z"],
            root_window=v["root_window"],
            decide_mode=v["decide_mode"],
            mode=v["rollout_mode"],
        )
        rule = UpdateRule.build(
            v["rule"],
            eps_low=v["eps_low"],
            eps_high=v["eps_high"],
            gppo_beta1=v["gppo_beta1"],
            gppo_beta2=v["gppo_beta2"],
            kl_coef=v["kl_coef"],
        )
        trainer_fields = {
            name: v[name]
            for name in KEYS_BY_NAME
            if name in cls.__dataclass_fields__ and name not in ("rollout", "rule")
        }
        return cls(rollout=rollout, rule=rule, **trainer_fields)

    def to_mapping(self) -> dict[str, Any]:
        """Flat key table with every value resolved."""
        out: dict[str, Any] = {}
        for key in CONFIG_KEYS:
            if key.name in self.__dataclass_fields__:
                out[key.name] = getattr(self, key.name)
        out.update(
            {
                "k": self.rollout.k,
                "beta_sens": self.rollout.beta_sens,
                "alpha_base": self.rollout.alpha_base,
                "gamma_ent": self.rollout.gamma_ent,
                "lambda_pen": self.rollout.lambda_pen,
                "tau_branch": self.rollout.tau_branch,
                "Z": self.rollout.branch_width,
                "root_window": self.rollout.root_window,
                "decide_mode": self.rollout.decide_mode.value,
                "rollout_mode": self.rollout.mode.value,
                "rule": self.rule.name,
                "eps_low": self.rule.clip.eps_low,
                "eps_high": self.rule.clip.eps_high,
                "gppo_beta1": self.rule.gppo_beta1 if self.rule.gppo_beta1 is not None else 1.0,
                "gppo_beta2": self.rule.gppo_beta2 if self.rule.gppo_beta2 is not None else 1.0,
                "kl_coef": self.rule.kl_coef,
                "entropy_adv_scope": self.entropy_adv_scope.value,
            }
        )
        return {key.name: out[key.name] for key in CONFIG_KEYS}

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        mapping = self.to_mapping()
        if "rule" in overrides and "eps_high" not in overrides:
            mapping["eps_high"] = None
        mapping.update(overrides)
        return RunConfig.from_mapping(mapping)

    def vocab(self) -> Vocabulary:
        return Vocabulary.build(self.vocab_size)

    def depths(self) -> list[int]:
        return parse_depths(self.task_depths)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    return str(value)


def render_config(config: RunConfig) -> str:
    lines = [f"{name} = {_format_value(value)}" for name, value in config.to_mapping().items()]
    return "\n".join(lines) + "\n"


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines. Blank lines and ``#`` comments are ignored."""
    values: dict[str, str] = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_number}: expected 'key = value', got {line!r}")
        name, value = (part.strip() for part in stripped.split("=", 1))
        if name not in KEYS_BY_NAME:
            raise ConfigError(f"{source}:{line_number}: unknown config key {name!r}")
        values[name] = value
    return values


def load_config_file(path: Path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise StorageError(f"Failed to read config file {path}: {e}") from e
    return parse_config_text(text, str(path))


def write_config_file(config: RunConfig, path: Path) -> None:
    try:
        Path(path).write_text(render_config(config))
    except OSError as e:
        raise StorageError(f"Failed to write config file {path}: {e}") from e
