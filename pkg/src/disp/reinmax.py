"""
Binary ReinMax straight-through estimator.

    pi0 = sigmoid(x + c)
    B   ~ Bernoulli(pi0)
    pi1 = (B + sigmoid((x + c) / tau)) / 2
    pi1 = sigmoid(stop_gradient(ln(pi1) - (x + c)) + (x + c))
    pi2 = 2 * pi1 - pi0 / 2
    out = pi2 - stop_gradient(pi2) + B

The forward value is exactly B; the gradient follows the pi2 path.
"""

from __future__ import annotations

import logging
from typing import Dict, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator

from disp import tensor as T
from disp.errors import ConfigError, ContractViolation
from disp.tensor import Tensor

logger = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


class ReinMaxConfig(BaseModel):
    tau: float = Field(1.0, description="Temperature")
    c: float = Field(3.0, description="Constant gate bias; sigmoid(c) is the initial open rate")
    rng_seed: int = Field(0, ge=0)

    @field_validator("tau")
    @classmethod
    def validate_tau(cls, v):
        if not v > 0:
            raise ValueError("tau must be positive")
        return v


class GateRNG:
    """
    Counter-based Bernoulli source (Philox).

    Draw number `step` of stream `stream` is a pure function of
    (seed, stream, step), so a search resumed from a checkpoint replays the
    same gate samples.
    """

    def __init__(self, seed: int, stream: int = 0, step: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.step = int(step)

    def _generator(self, step: int) -> np.random.Generator:
        key = ((self.seed & _MASK64) << 64) | (self.stream & _MASK64)
        return np.random.Generator(np.random.Philox(key=key, counter=int(step) << 192))

    def uniform(self, shape) -> np.ndarray:
        """Uniforms for the current step; advances the step counter."""
        u = self._generator(self.step).random(shape)
        self.step += 1
        return u

    def split(self, stream: int) -> "GateRNG":
        return GateRNG(self.seed, stream, self.step)

    def state(self) -> Dict[str, int]:
        return {"seed": self.seed, "stream": self.stream, "step": self.step}

    @classmethod
    def from_state(cls, state: Dict[str, int]) -> "GateRNG":
        return cls(state["seed"], state.get("stream", 0), state.get("step", 0))


def gate_open_probability(x: T.ArrayLike, cfg: ReinMaxConfig) -> Tensor:
    """pi0 = sigmoid(x + c)"""
    return T.sigmoid(T.as_tensor(x) + cfg.c)


def reinmax_surrogate(x: Tensor, bits: np.ndarray, cfg: ReinMaxConfig) -> Tensor:
    """The differentiable path 2*pi1 - pi0/2 for frozen samples `bits`."""
    xc = x + cfg.c
    pi0 = T.sigmoid(xc)
    pi1 = (T.Tensor(bits) + T.sigmoid(xc * (1.0 / cfg.tau))) * 0.5
    pi1 = T.sigmoid(T.stop_gradient(T.log(pi1) - xc) + xc)
    return pi1 * 2.0 - pi0 * 0.5


def reinmax_forward(
    x: T.ArrayLike,
    cfg: ReinMaxConfig,
    mode: Literal["sample", "deterministic"] = "sample",
    rng: Optional[GateRNG] = None,
    uniforms: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Binary gates from latents `x`.

    sample: value is a Bernoulli(pi0) draw B, gradient of the ReinMax path.
    deterministic: value is 1[pi0 >= 0.5], no gradient.
    """
    if not cfg.tau > 0:
        raise ConfigError("ReinMax temperature tau must be positive")
    x = T.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise ContractViolation("ReinMax latents must be finite")

    if mode == "deterministic":
        with T.no_grad():
            pi0 = gate_open_probability(x, cfg)
        return Tensor((pi0.data >= 0.5).astype(np.float64))
    if mode != "sample":
        raise ContractViolation(f"Unknown ReinMax mode '{mode}'")

    if uniforms is None:
        if rng is None:
            raise ContractViolation("Sampling needs a GateRNG or explicit uniforms")
        uniforms = rng.uniform(x.shape)
    with T.no_grad():
        pi0 = gate_open_probability(x, cfg).data
    bits = (np.asarray(uniforms) < pi0).astype(np.float64)
    pi2 = reinmax_surrogate(x, bits, cfg)
    return (pi2 - T.stop_gradient(pi2)) + Tensor(bits)
