"""
Gate-latent generators.

hypernet     fixed z (L x 32) -> Bi-GRU(32, 64) -> LayerNorm(128) -> GeLU -> Linear_l(128, 4d + d_mid)
no-gru       fixed per-block inputs (L x 128) -> LayerNorm -> GeLU -> Linear_l
elementwise  one trainable latent vector per block

All three return, per block, one latent vector laid out as
s1 [0, d) | s2 [d, 2d) | s3 [2d, 3d) | s5 [3d, 4d) | s4 [4d, 4d + d_mid).
Head weights start at zero so every gate opens with probability sigmoid(c).
"""

from __future__ import annotations

import logging
from typing import Dict, List, Literal, Optional

import numpy as np

from disp import tensor as T
from disp.errors import ConfigError, ContractViolation
from disp.model import BlockGates, ModelSpec
from disp.reinmax import GateRNG, ReinMaxConfig, reinmax_forward
from disp.tensor import Tensor

logger = logging.getLogger(__name__)

GateParam = Literal["hypernet", "no-gru", "elementwise"]
GATE_PARAMS = ("hypernet", "no-gru", "elementwise")

Z_DIM = 32
GRU_HIDDEN = 64


class HyperNetwork:
    """
    Trainable generator of gate latents (the only parameters updated by search).

    `params` holds the trainable tensors; `buffers` holds the fixed random
    inputs, which never receive gradient.
    """

    def __init__(self, spec: ModelSpec, mode: GateParam = "hypernet", seed: int = 0):
        if mode not in GATE_PARAMS:
            raise ConfigError(f"Unknown gate parametrization '{mode}', expected one of {GATE_PARAMS}")
        self.spec = spec
        self.mode = mode
        self.seed = seed
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}

        rng = np.random.default_rng(seed)
        L, N = spec.n_layers, spec.latent_width
        feat = 2 * GRU_HIDDEN
        if mode == "elementwise":
            for l in range(L):
                self._param(f"latents.{l}", np.zeros(N))
            return
        if mode == "hypernet":
            self.buffers["z"] = rng.standard_normal((L, Z_DIM))
            bound = 1.0 / np.sqrt(GRU_HIDDEN)
            for direction in ("fwd", "bwd"):
                p = f"gru.{direction}."
                self._param(p + "w_ih", rng.uniform(-bound, bound, (Z_DIM, 3 * GRU_HIDDEN)))
                self._param(p + "w_hh", rng.uniform(-bound, bound, (GRU_HIDDEN, 3 * GRU_HIDDEN)))
                self._param(p + "b_ih", rng.uniform(-bound, bound, 3 * GRU_HIDDEN))
                self._param(p + "b_hh", rng.uniform(-bound, bound, 3 * GRU_HIDDEN))
        else:
            self.buffers["inputs"] = rng.standard_normal((L, feat))
        self._param("post_norm.gain", np.ones(feat))
        self._param("post_norm.bias", np.zeros(feat))
        for l in range(L):
            self._param(f"heads.{l}.weight", np.zeros((feat, N)))
            self._param(f"heads.{l}.bias", np.zeros(N))

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def forward(self) -> List[Tensor]:
        if self.mode == "hypernet":
            return hypernet_forward(self)
        if self.mode == "no-gru":
            return no_gru_latents(self)
        return elementwise_latents(self)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {f"theta.{k}": v.data for k, v in self.params.items()}
        state.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for key, value in state.items():
            kind, _, name = key.partition(".")
            if kind == "theta":
                if name not in self.params or self.params[name].shape != value.shape:
                    raise ContractViolation(f"Unexpected hypernetwork parameter '{name}'")
                self.params[name].data = np.array(value, dtype=T.get_dtype())
            elif kind == "buffer":
                self.buffers[name] = np.array(value)


def _gru_step(x: Tensor, h: Tensor, p: Dict[str, Tensor], prefix: str) -> Tensor:
    H = GRU_HIDDEN
    gi = T.matmul(x, p[prefix + "w_ih"]) + p[prefix + "b_ih"]
    gh = T.matmul(h, p[prefix + "w_hh"]) + p[prefix + "b_hh"]
    r = T.sigmoid(gi[:, :H] + gh[:, :H])
    z = T.sigmoid(gi[:, H : 2 * H] + gh[:, H : 2 * H])
    n = T.tanh(gi[:, 2 * H :] + r * gh[:, 2 * H :])
    return (1.0 - z) * n + z * h


def _bidirectional_gru(net: HyperNetwork) -> Tensor:
    z = Tensor(net.buffers["z"])
    L = z.shape[0]
    steps = [z[l : l + 1] for l in range(L)]
    fwd, bwd = [None] * L, [None] * L
    h = Tensor(np.zeros((1, GRU_HIDDEN)))
    for l in range(L):
        h = _gru_step(steps[l], h, net.params, "gru.fwd.")
        fwd[l] = h
    h = Tensor(np.zeros((1, GRU_HIDDEN)))
    for l in reversed(range(L)):
        h = _gru_step(steps[l], h, net.params, "gru.bwd.")
        bwd[l] = h
    return T.concat([T.concat([f, b], axis=-1) for f, b in zip(fwd, bwd)], axis=0)


def _heads(net: HyperNetwork, features: Tensor) -> List[Tensor]:
    p = net.params
    x = T.gelu(T.layernorm(features, p["post_norm.gain"], p["post_norm.bias"]))
    out = []
    for l in range(net.spec.n_layers):
        latent = T.matmul(x[l : l + 1], p[f"heads.{l}.weight"]) + p[f"heads.{l}.bias"]
        out.append(latent.reshape(net.spec.latent_width))
    return out


def hypernet_forward(net: HyperNetwork) -> List[Tensor]:
    """Bi-GRU over the block sequence, then shared norm + GeLU and one head per block."""
    return _heads(net, _bidirectional_gru(net))


def no_gru_latents(net: HyperNetwork) -> List[Tensor]:
    return _heads(net, Tensor(net.buffers["inputs"]))


def elementwise_latents(net: HyperNetwork) -> List[Tensor]:
    return [net.params[f"latents.{l}"] for l in range(net.spec.n_layers)]


def split_latents(latent: Tensor, spec: ModelSpec) -> Dict[str, Tensor]:
    d = spec.d
    return {
        "s1": latent[0:d],
        "s2": latent[d : 2 * d],
        "s3": latent[2 * d : 3 * d],
        "s5": latent[3 * d : 4 * d],
        "s4": latent[4 * d : 4 * d + spec.d_mid],
    }


def latents_to_gates(
    latents: List[Tensor],
    spec: ModelSpec,
    cfg: ReinMaxConfig,
    mode: Literal["sample", "deterministic"] = "sample",
    rng: Optional[GateRNG] = None,
    tied: bool = False,
) -> List[BlockGates]:
    """
    ReinMax gates for every block.

    One Bernoulli draw per latent per call. With `tied=True` the s1 gate is
    reused for s2, s3 and s5 (S1 = S2 = S3 = S5), so the shared latents get
    the summed gradient.
    """
    if len(latents) != spec.n_layers:
        raise ContractViolation(f"Expected {spec.n_layers} latent vectors, got {len(latents)}")
    uniforms = None
    if mode == "sample":
        if rng is None:
            raise ContractViolation("Sampling gates needs a GateRNG")
        uniforms = rng.uniform((spec.n_layers, spec.latent_width))
    gates = []
    for l, latent in enumerate(latents):
        bits = reinmax_forward(latent, cfg, mode, uniforms=None if uniforms is None else uniforms[l])
        parts = split_latents(bits, spec)
        if tied:
            parts["s2"] = parts["s3"] = parts["s5"] = parts["s1"]
        gates.append(BlockGates(parts["s1"], parts["s2"], parts["s3"], parts["s4"], parts["s5"]))
    return gates


def main():
    spec = ModelSpec(d=8, n_layers=2, n_heads=2, d_mid=16)
    for mode in GATE_PARAMS:
        net = HyperNetwork(spec, mode=mode, seed=0)
        latents = net.forward()
        print(f"{mode}: {len(latents)} latent vectors of width {latents[0].shape[0]}, "
              f"{net.num_parameters()} trainable parameters")


if __name__ == "__main__":
    main()
