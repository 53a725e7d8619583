"""
Run settings: defaults < environment (DISP_*) < --config file < flags.

The config file is key=value text; keys are the long flag names with
dashes or underscores (`target-ratio=0.3`, `gate_bias=2.5`).
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from disp.budget import PruneBudget, total_params
from disp.data import VOCAB_SIZE, PretrainConfig
from disp.errors import ConfigError, UsageError
from disp.hypernet import GateParam
from disp.model import ModelSpec
from disp.reinmax import ReinMaxConfig
from disp.trainer import SEARCH_MODES, SearchMode, TrainConfig

ENV_KEYS = {
    "DISP_SEED": "seed",
    "DISP_OUT": "out",
    "DISP_PRECISION": "precision",
    "DISP_LOG_LEVEL": "log_level",
}


class Settings(BaseModel):
    """Every value a subcommand may need, already merged from all sources."""

    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    seed: int = Field(0, ge=0)
    out: str = "runs"
    precision: Literal["f64", "f32"] = "f64"
    log_level: str = "INFO"

    # data
    corpus: Optional[str] = None
    valid_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    seq_len: int = Field(64, ge=1)

    # model
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_mid: int = 256
    mlp_kind: Literal["gated", "standard"] = "gated"
    norm_kind: Literal["layernorm", "rmsnorm"] = "layernorm"
    max_seq_len: int = 64

    # pretraining
    pretrain_steps: int = 2000
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 8

    # search
    mode: SearchMode = "disp"
    tau: float = 1.0
    gate_bias: float = 3.0
    lambda_: float = Field(6.0, alias="lambda")
    target_ratio: float = 0.5
    iterations: int = 10000
    lr: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 1
    log_every: int = 100
    prefetch: bool = False
    gate_param: Optional[GateParam] = None
    resume: bool = False

    # pruning
    enforce_budget: bool = False
    equivalence_trials: int = Field(5, ge=1)

    # artifacts
    model: Optional[str] = None
    state: Optional[str] = None
    pruned: Optional[str] = None

    # verify / ablate
    suite: str = "all"
    modes: str = ",".join(SEARCH_MODES)
    seeds: str = "0,1,2"
    lambdas: Optional[str] = None
    random_seeds: Optional[str] = None

    @field_validator("log_level")
    @classmethod
    def upper_level(cls, v: str) -> str:
        return v.upper()

    # ---- artifact paths -------------------------------------------------
    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def model_path(self) -> Path:
        return Path(self.model) if self.model else self.out_dir / "dense.ckpt"

    @property
    def state_path(self) -> Path:
        return Path(self.state) if self.state else self.out_dir / "search.ckpt"

    @property
    def pruned_path(self) -> Path:
        return Path(self.pruned) if self.pruned else self.out_dir / "pruned.ckpt"

    # ---- typed views ----------------------------------------------------
    def model_spec(self) -> ModelSpec:
        return _build(
            ModelSpec,
            d=self.d,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_mid=self.d_mid,
            mlp_kind=self.mlp_kind,
            norm_kind=self.norm_kind,
            vocab_size=VOCAB_SIZE,
            max_seq_len=self.max_seq_len,
        )

    def reinmax_config(self) -> ReinMaxConfig:
        return _build(ReinMaxConfig, tau=self.tau, c=self.gate_bias, rng_seed=self.seed)

    def train_config(self) -> TrainConfig:
        return _build(
            TrainConfig,
            lr=self.lr,
            weight_decay=self.weight_decay,
            iterations=self.iterations,
            batch_size=self.batch_size,
            seq_len=self.seq_len,
            seed=self.seed,
            mode=self.mode,
            log_every=self.log_every,
            prefetch=self.prefetch,
            parametrization=self.gate_param,
        )

    def pretrain_config(self) -> PretrainConfig:
        # the windows of a search are checked against the loaded model instead
        if self.seq_len > self.max_seq_len:
            raise ConfigError(f"seq_len={self.seq_len} exceeds max_seq_len={self.max_seq_len}")
        return _build(
            PretrainConfig,
            steps=self.pretrain_steps,
            lr=self.pretrain_lr,
            batch_size=self.pretrain_batch_size,
            seq_len=self.seq_len,
            seed=self.seed,
            log_every=self.log_every,
        )

    def budget(self, spec: ModelSpec) -> PruneBudget:
        return _build(PruneBudget, p=self.target_ratio, lambda_=self.lambda_, t_total=total_params(spec))

    def int_list(self, name: str) -> List[int]:
        return [int(v) for v in _split(getattr(self, name), name)]

    def float_list(self, name: str) -> List[float]:
        return [float(v) for v in _split(getattr(self, name), name)]

    def str_list(self, name: str) -> List[str]:
        return _split(getattr(self, name), name)


def _split(value: Optional[str], name: str) -> List[str]:
    items = [v.strip() for v in (value or "").split(",") if v.strip()]
    if not items:
        raise UsageError(f"--{name.replace('_', '-')} needs a comma-separated list")
    return items


def _build(cls, **values: Any):
    try:
        return cls(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


def _normalize(key: str) -> str:
    key = key.strip().lower().replace("-", "_")
    return "lambda" if key in ("lambda", "lambda_") else key


def load_config_file(path: str) -> Dict[str, str]:
    if not Path(path).is_file():
        raise UsageError(f"Config file not found: {path}")
    return {_normalize(k): v for k, v in dotenv_values(path).items() if v is not None}


def env_settings(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    return {field: environ[var] for var, field in ENV_KEYS.items() if environ.get(var)}


def resolve_settings(
    flags: Mapping[str, Any],
    config_file: Optional[str] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> Settings:
    """Merge the sources; a flag value of None means 'not given'."""
    merged: Dict[str, Any] = {}
    merged.update(env_settings(environ))
    if config_file:
        merged.update(load_config_file(config_file))
    merged.update({_normalize(k): v for k, v in flags.items() if v is not None})
    unknown = sorted(set(merged) - {_normalize(n) for n in Settings.model_fields})
    if unknown:
        raise ConfigError(f"Unknown setting(s): {', '.join(unknown)}")
    return _build(Settings, **merged)
