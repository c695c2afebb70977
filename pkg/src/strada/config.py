"""Run configuration: one JSON document covering every stage's settings.

Sections are model, featurize, train, adapt, rollout, and eval, each parsed
strictly (unknown keys rejected) by the owning module's config class. Seeds
live at the top level only; resolution order is the STRADA_SEED environment
variable, then a --seed flag, then the file, then the default of 0, and the
winning value is stamped into every stage.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Mapping

from ._util import check_keys
from .adapt import AdaptPlan
from .data import canonical_json
from .errors import ConfigError, InputError
from .evaluate import NoiseSpec
from .features import FeaturizeConfig
from .forecast import RolloutConfig
from .training import TrainConfig

SEED_ENV_VAR = "STRADA_SEED"

# ModelConfig keys a run config may set; token_dim is derived from the
# featurize layout and the data's channel count, never configured.
MODEL_SECTION_KEYS = (
    "d_model",
    "n_layers",
    "n_heads",
    "head_dim",
    "ffn_dim",
    "context_length",
    "rope_base",
    "rmsnorm_eps",
    "dof_offset",
    "dtype",
)


@dataclass(frozen=True)
class EvalConfig:
    horizons: tuple[int, ...] = (3, 6, 12)
    split: str = "test"
    max_origins: int | None = None
    sigmas: tuple[float, ...] = (0.2, 0.4, 0.8, 1.0, 2.0)

    def __post_init__(self):
        hs = tuple(int(h) for h in self.horizons)
        if not hs or any(h < 1 for h in hs) or list(hs) != sorted(set(hs)):
            raise ConfigError(
                f"horizons must be strictly increasing positive integers, got {self.horizons}"
            )
        object.__setattr__(self, "horizons", hs)
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"split must be train, val, or test, got {self.split!r}")
        if self.max_origins is not None and self.max_origins < 1:
            raise ConfigError("max_origins must be >= 1 when set")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        NoiseSpec(sigmas=self.sigmas)  # reuse its ordering/positivity rules

    def to_dict(self) -> dict:
        return {
            "horizons": list(self.horizons),
            "split": self.split,
            "max_origins": self.max_origins,
            "sigmas": list(self.sigmas),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalConfig":
        check_keys(data, ("horizons", "split", "max_origins", "sigmas"), "eval config")
        out = dict(data)
        if "horizons" in out:
            out["horizons"] = tuple(out["horizons"])
        if "sigmas" in out:
            out["sigmas"] = tuple(out["sigmas"])
        return cls(**out)


def _section(data: Mapping, name: str) -> dict:
    raw = data.get(name, {})
    if not isinstance(raw, Mapping):
        raise ConfigError(f"config section {name!r} must be a mapping")
    if "seed" in raw:
        raise ConfigError(
            f"config section {name!r} must not set its own seed; use the top-level seed"
        )
    return dict(raw)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=dict)
    featurize: FeaturizeConfig = field(default_factory=FeaturizeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptPlan = field(default_factory=AdaptPlan)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        check_keys(self.model, MODEL_SECTION_KEYS, "model config")

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        check_keys(
            data,
            ("seed", "model", "featurize", "train", "adapt", "rollout", "eval"),
            "run config",
        )
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        return cls(
            seed=seed,
            model=_section(data, "model"),
            featurize=FeaturizeConfig.from_dict(_section(data, "featurize")),
            train=TrainConfig.from_dict(_section(data, "train")),
            adapt=AdaptPlan.from_dict(_section(data, "adapt")),
            rollout=RolloutConfig.from_dict(_section(data, "rollout")),
            eval=EvalConfig.from_dict(_section(data, "eval")),
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as err:
            raise InputError(f"cannot read config file {path}: {err}") from err
        try:
            data = json.loads(text)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": dict(self.model),
            "featurize": self.featurize.to_dict(),
            "train": self.train.to_dict(),
            "adapt": self.adapt.to_dict(),
            "rollout": self.rollout.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    def with_seed(self, seed: int) -> "RunConfig":
        """Stamp one seed into every stage that owns an RNG."""
        return dataclasses.replace(
            self,
            seed=seed,
            train=dataclasses.replace(self.train, seed=seed),
            rollout=dataclasses.replace(self.rollout, seed=seed),
        )


def resolve_seed(cli_seed: int | None, config_seed: int) -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is not None:
        try:
            return int(raw)
        except ValueError:
            raise InputError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}") from None
    if cli_seed is not None:
        return int(cli_seed)
    return int(config_seed)


def load_run_config(path=None, cli_seed: int | None = None) -> RunConfig:
    """Read the config file (or defaults) and apply the seed resolution chain."""
    cfg = RunConfig.from_file(path) if path else RunConfig()
    return cfg.with_seed(resolve_seed(cli_seed, cfg.seed))
