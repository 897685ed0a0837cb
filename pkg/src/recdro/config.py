"""Training and loss configuration, plus the flat `key = value` config format."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or missing required settings."""


class LossKind(enum.Enum):
    BPR = "bpr"
    BCE = "bce"
    MSE = "mse"
    SL = "sl"
    BSL = "bsl"
    SL_NOVAR = "sl_novar"


class BslForm(enum.Enum):
    CANONICAL = "canonical"
    PSEUDOCODE = "pseudocode"


class SamplingMode(enum.Enum):
    NEGATIVE_SAMPLING = "negative_sampling"
    IN_BATCH = "in_batch"


class NegSampler(enum.Enum):
    UNIFORM = "uniform"
    POPULARITY = "popularity"


#: Temperature grid used by sweeps unless overridden, densified around the
#: region where ranking quality usually peaks.
DEFAULT_TAU_GRID = (0.05, 0.07, 0.09, 0.10, 0.11, 0.12, 0.15, 0.20, 0.5, 1.0)


@dataclass(frozen=True)
class LossSpec:
    """Which loss to optimize and its temperatures.

    ``tau`` drives the plain softmax loss; ``tau_pos``/``tau_neg`` are the
    separate positive/negative temperatures of the bilateral form;
    ``bce_mse_balance`` weights the negative term of the pointwise losses.
    """

    kind: LossKind = LossKind.SL
    tau: float = 0.1
    tau_pos: float = 0.1
    tau_neg: float = 0.1
    bce_mse_balance: float = 1.0
    bsl_form: BslForm = BslForm.PSEUDOCODE

    def validate(self) -> None:
        for name in ("tau", "tau_pos", "tau_neg"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.bce_mse_balance < 0:
            raise ConfigError("bce_mse_balance must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, sampler, and noise settings for one training run."""

    embedding_dim: int = 64
    learning_rate: float = 1e-3
    l2_reg: float = 0.0
    n_negatives: int = 64
    batch_size: int = 1024
    epochs: int = 200
    sampling_mode: SamplingMode = SamplingMode.NEGATIVE_SAMPLING
    neg_sampler: NegSampler = NegSampler.UNIFORM
    popularity_exponent: float = 1.0
    r_noise: float = 0.0
    pos_noise_ratio: float = 0.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.l2_reg < 0:
            raise ConfigError("l2_reg must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.sampling_mode is SamplingMode.NEGATIVE_SAMPLING and self.n_negatives < 1:
            raise ConfigError("n_negatives must be >= 1 in negative_sampling mode")
        if self.sampling_mode is SamplingMode.IN_BATCH and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 in in_batch mode")
        if self.r_noise < 0:
            raise ConfigError("r_noise must be >= 0")
        if not 0 <= self.pos_noise_ratio < 1:
            raise ConfigError("pos_noise_ratio must lie in [0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a CLI run needs: data paths, training, loss, eval cadence."""

    train_file: str = ""
    test_file: str = ""
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    eval_every: int = 5
    eval_ks: tuple[int, ...] = (20,)
    tau_grid: tuple[float, ...] = DEFAULT_TAU_GRID

    def validate(self) -> None:
        self.train.validate()
        self.loss.validate()
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ConfigError("eval_ks must be nonempty positive integers")
        if not self.tau_grid or any(t <= 0 for t in self.tau_grid):
            raise ConfigError("tau_grid must be nonempty positive reals")


def _parse_enum(enum_cls):
    def parse(text: str):
        try:
            return enum_cls(text.strip().lower())
        except ValueError:
            valid = ", ".join(e.value for e in enum_cls)
            raise ConfigError(f"expected one of: {valid}, got {text!r}")
    return parse


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}")


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(_parse_int(t) for t in text.replace(",", " ").split())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(_parse_float(t) for t in text.replace(",", " ").split())


# key -> (section, attribute, parser); section "" targets ExperimentConfig.
CONFIG_KEYS = {
    "train_file": ("", "train_file", str),
    "test_file": ("", "test_file", str),
    "eval_every": ("", "eval_every", _parse_int),
    "eval_ks": ("", "eval_ks", _parse_int_list),
    "tau_grid": ("", "tau_grid", _parse_float_list),
    "loss": ("loss", "kind", _parse_enum(LossKind)),
    "tau": ("loss", "tau", _parse_float),
    "tau_pos": ("loss", "tau_pos", _parse_float),
    "tau_neg": ("loss", "tau_neg", _parse_float),
    "bce_mse_balance": ("loss", "bce_mse_balance", _parse_float),
    "bsl_form": ("loss", "bsl_form", _parse_enum(BslForm)),
    "embedding_dim": ("train", "embedding_dim", _parse_int),
    "learning_rate": ("train", "learning_rate", _parse_float),
    "l2_reg": ("train", "l2_reg", _parse_float),
    "n_negatives": ("train", "n_negatives", _parse_int),
    "batch_size": ("train", "batch_size", _parse_int),
    "epochs": ("train", "epochs", _parse_int),
    "sampling_mode": ("train", "sampling_mode", _parse_enum(SamplingMode)),
    "neg_sampler": ("train", "neg_sampler", _parse_enum(NegSampler)),
    "popularity_exponent": ("train", "popularity_exponent", _parse_float),
    "r_noise": ("train", "r_noise", _parse_float),
    "pos_noise_ratio": ("train", "pos_noise_ratio", _parse_float),
    "rng_seed": ("train", "rng_seed", _parse_int),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse `key = value` lines into a raw string map. `#` starts a comment."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        pairs[key] = value
    return pairs


def build_config(pairs: dict[str, str]) -> ExperimentConfig:
    """Materialize an ExperimentConfig from raw key/value strings."""
    top: dict[str, object] = {}
    loss_kw: dict[str, object] = {}
    train_kw: dict[str, object] = {}
    for key, raw in pairs.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        section, attr, parse = CONFIG_KEYS[key]
        value = parse(raw)
        {"": top, "loss": loss_kw, "train": train_kw}[section][attr] = value
    cfg = ExperimentConfig(train=TrainConfig(**train_kw),
                           loss=LossSpec(**loss_kw), **top)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    return build_config(parse_config_text(text, source=str(path)))


def config_as_dict(cfg: ExperimentConfig) -> dict[str, str]:
    """Flatten a config back to the string form used by files and manifests."""
    out: dict[str, str] = {}
    for key, (section, attr, _) in CONFIG_KEYS.items():
        obj = {"": cfg, "loss": cfg.loss, "train": cfg.train}[section]
        value = getattr(obj, attr)
        if isinstance(value, enum.Enum):
            out[key] = value.value
        elif isinstance(value, tuple):
            out[key] = ",".join(str(v) for v in value)
        else:
            out[key] = str(value)
    return out


def override_config(cfg: ExperimentConfig, pairs: dict[str, str]) -> ExperimentConfig:
    """Apply raw key/value overrides on top of an existing config."""
    merged = config_as_dict(cfg)
    for key, value in pairs.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown key {key!r}")
        merged[key] = value
    return build_config(merged)


def spec_with_tau(spec: LossSpec, param: str, value: float) -> LossSpec:
    """Return a copy of ``spec`` with one temperature field replaced."""
    if param not in ("tau", "tau_pos", "tau_neg"):
        raise ValueError(f"unknown temperature parameter {param!r}")
    return replace(spec, **{param: value})
