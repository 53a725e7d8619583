"""
Decoder-only transformer with gated (masked) blocks.

Masked mode multiplies activations by the gate vectors exactly where the
pseudo-selection matrices S1..S5 sit:

    Attention(X) = MultiHead(X S1 Wq, X S1 Wk, X S1 Wv) Wo S2
    MLP(X)       = (silu(X S3 W1 S4) * (X S3 W2 S4)) S4 W3 S5      (gated)
    MLP(X)       = gelu(X S3 W1 S4) S4 W3 S5                        (standard)

Normalization statistics are taken over active coordinates only, so the
masked block is numerically the same function as the sliced block.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from disp import tensor as T
from disp.errors import ContractViolation
from disp.selection import GateVector, IndexSet, to_index_set
from disp.tensor import Tensor

logger = logging.getLogger(__name__)


class ModelSpec(BaseModel):
    """Architecture of the dense search model"""

    model_config = ConfigDict(frozen=True)

    d: int = Field(64, ge=1, description="Embedding (residual) width")
    n_layers: int = Field(4, ge=1)
    n_heads: int = Field(4, ge=1)
    d_mid: int = Field(256, ge=1, description="MLP hidden width")
    mlp_kind: Literal["gated", "standard"] = "gated"
    norm_kind: Literal["layernorm", "rmsnorm"] = "layernorm"
    vocab_size: int = Field(257, ge=1)
    max_seq_len: int = Field(64, ge=1)
    tie_embeddings: bool = False
    norm_eps: float = Field(1e-5, ge=0.0)

    @model_validator(mode="after")
    def check_heads(self) -> "ModelSpec":
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def latent_width(self) -> int:
        """Gate latents per block: s1, s2, s3, s5 (width d) then s4 (width d_mid)"""
        return 4 * self.d + self.d_mid


@dataclass
class BlockWeights:
    """Weights of one block; dense or sliced, same field names."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm1_gain: Tensor
    norm2_gain: Tensor
    w1: Tensor
    w3: Tensor
    norm1_bias: Optional[Tensor] = None
    norm2_bias: Optional[Tensor] = None
    w2: Optional[Tensor] = None

    def tensors(self) -> Dict[str, Tensor]:
        return {k: v for k, v in vars(self).items() if v is not None}


BLOCK_KEYS = ("wq", "wk", "wv", "wo", "norm1_gain", "norm1_bias", "norm2_gain", "norm2_bias", "w1", "w2", "w3")


@dataclass
class BlockGates:
    """
    Gate values s1..s5 of one block.

    Entries are tensors so straight-through samples can carry gradient;
    s1, s2, s3, s5 have width d and s4 has width d_mid.
    """

    s1: Tensor
    s2: Tensor
    s3: Tensor
    s4: Tensor
    s5: Tensor

    @classmethod
    def from_vectors(cls, vectors: Sequence[GateVector]) -> "BlockGates":
        """From five GateVectors in s1..s5 order."""
        if len(vectors) != 5:
            raise ContractViolation(f"A block has five gates, got {len(vectors)}")
        return cls(*(v.as_tensor() for v in vectors))

    @classmethod
    def ones(cls, spec: ModelSpec) -> "BlockGates":
        d, m = np.ones(spec.d), np.ones(spec.d_mid)
        return cls(Tensor(d), Tensor(d), Tensor(d), Tensor(m), Tensor(d))

    def tensors(self) -> List[Tensor]:
        return [self.s1, self.s2, self.s3, self.s4, self.s5]

    def vectors(self) -> List[GateVector]:
        return [GateVector(np.rint(t.data).astype(np.int8)) for t in self.tensors()]

    def index_sets(self) -> List[IndexSet]:
        return [to_index_set(v) for v in self.vectors()]

    def validate(self, spec: ModelSpec) -> None:
        widths = [spec.d, spec.d, spec.d, spec.d_mid, spec.d]
        for name, t, width in zip(("s1", "s2", "s3", "s4", "s5"), self.tensors(), widths):
            if t.shape != (width,):
                raise ContractViolation(f"Gate {name} has shape {t.shape}, expected ({width},)")

    def is_tied(self) -> bool:
        """True when s1 == s2 == s3 == s5 bitwise (constrained mode)"""
        s1 = self.s1.data
        return all(np.array_equal(s1, t.data) for t in (self.s2, self.s3, self.s5))


class DenseModel:
    """
    Full-width weights of the search model.

    Weights live in `params` under dotted names (`blocks.0.wq`, ...). They are
    frozen (requires_grad=False) unless `unfreeze()` is called for pretraining.
    """

    def __init__(self, spec: ModelSpec, params: Dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: ModelSpec, seed: int = 0) -> "DenseModel":
        rng = np.random.default_rng(seed)
        d, m, L = spec.d, spec.d_mid, spec.n_layers
        std = 0.02
        out_std = std / np.sqrt(2 * L)
        params: Dict[str, Tensor] = {
            "tok_emb": Tensor(rng.normal(0, std, (spec.vocab_size, d))),
            "pos_emb": Tensor(rng.normal(0, std, (spec.max_seq_len, d))),
        }
        for i in range(L):
            p = f"blocks.{i}."
            params[p + "wq"] = Tensor(rng.normal(0, std, (d, d)))
            params[p + "wk"] = Tensor(rng.normal(0, std, (d, d)))
            params[p + "wv"] = Tensor(rng.normal(0, std, (d, d)))
            params[p + "wo"] = Tensor(rng.normal(0, out_std, (d, d)))
            params[p + "norm1_gain"] = Tensor(np.ones(d))
            params[p + "norm2_gain"] = Tensor(np.ones(d))
            if spec.norm_kind == "layernorm":
                params[p + "norm1_bias"] = Tensor(np.zeros(d))
                params[p + "norm2_bias"] = Tensor(np.zeros(d))
            params[p + "w1"] = Tensor(rng.normal(0, std, (d, m)))
            if spec.mlp_kind == "gated":
                params[p + "w2"] = Tensor(rng.normal(0, std, (d, m)))
            params[p + "w3"] = Tensor(rng.normal(0, out_std, (m, d)))
        params["final_norm.gain"] = Tensor(np.ones(d))
        if spec.norm_kind == "layernorm":
            params["final_norm.bias"] = Tensor(np.zeros(d))
        if not spec.tie_embeddings:
            params["lm_head"] = Tensor(rng.normal(0, std, (d, spec.vocab_size)))
        return cls(spec, params)

    def block(self, i: int) -> BlockWeights:
        p = f"blocks.{i}."
        return BlockWeights(**{k: self.params[p + k] for k in BLOCK_KEYS if p + k in self.params})

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "DenseModel":
        for t in self.params.values():
            t.requires_grad = False
            t.grad = None
        return self

    def unfreeze(self) -> "DenseModel":
        for t in self.params.values():
            t.requires_grad = True
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_state_dict(cls, spec: ModelSpec, state: Dict[str, np.ndarray]) -> "DenseModel":
        return cls(spec, {k: Tensor(np.array(v)) for k, v in state.items()})

    def copy(self) -> "DenseModel":
        return DenseModel.from_state_dict(self.spec, self.state_dict())

    def head_weight(self) -> Tensor:
        if self.spec.tie_embeddings:
            return self.params["tok_emb"].transpose()
        return self.params["lm_head"]


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------
def normalize(x: Tensor, mask, gain: Tensor, bias: Optional[Tensor], spec: ModelSpec) -> Tensor:
    if spec.norm_kind == "rmsnorm":
        return T.masked_rmsnorm(x, mask, gain, spec.norm_eps)
    return T.masked_layernorm(x, mask, gain, bias, spec.norm_eps)


def multi_head(q: Tensor, k: Tensor, v: Tensor, spec: ModelSpec) -> Tensor:
    """Causal multi-head attention; always all h heads of width d/h."""
    b, n, _ = q.shape
    h, dh = spec.n_heads, spec.head_dim

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

    scores = T.matmul(heads(q), heads(k).transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    probs = T.softmax_lastdim(scores, additive_mask=T.causal_mask(n))
    out = T.matmul(probs, heads(v))
    return out.transpose(0, 2, 1, 3).reshape(b, n, spec.d)


def _gate(x: Tensor, g: Optional[Tensor]) -> Tensor:
    return x if g is None else x * g


def mlp_forward(h: Tensor, w: BlockWeights, s4: Optional[Tensor], spec: ModelSpec) -> Tensor:
    """Hidden activation after the S4 gates, before W3."""
    up = _gate(T.matmul(h, w.w1), s4)
    if spec.mlp_kind == "gated":
        act = T.silu(up) * _gate(T.matmul(h, w.w2), s4)
    else:
        act = T.gelu(up)
    return _gate(act, s4)


def block_forward_masked(
    x: Tensor, w: BlockWeights, gates: Optional[BlockGates], spec: ModelSpec
) -> Tensor:
    if x.shape[-1] != spec.d:
        raise ContractViolation(f"Block input width {x.shape[-1]} != d={spec.d}")
    if gates is not None:
        gates.validate(spec)
    s1, s2, s3, s4, s5 = gates.tensors() if gates is not None else (None,) * 5

    h = _gate(normalize(x, s1, w.norm1_gain, w.norm1_bias, spec), s1)
    attn = multi_head(T.matmul(h, w.wq), T.matmul(h, w.wk), T.matmul(h, w.wv), spec)
    x = x + _gate(T.matmul(attn, w.wo), s2)

    h = _gate(normalize(x, s3, w.norm2_gain, w.norm2_bias, spec), s3)
    x = x + _gate(T.matmul(mlp_forward(h, w, s4, spec), w.w3), s5)
    return x


def embed(model: DenseModel, tokens: np.ndarray) -> Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ContractViolation(f"Tokens must be (batch, seq), got {tokens.shape}")
    n = tokens.shape[1]
    if n > model.spec.max_seq_len:
        raise ContractViolation(f"Sequence length {n} exceeds max_seq_len={model.spec.max_seq_len}")
    return T.embedding(model.params["tok_emb"], tokens) + model.params["pos_emb"][:n]


def head(model: DenseModel, x: Tensor) -> Tensor:
    p = model.params
    x = normalize(x, None, p["final_norm.gain"], p.get("final_norm.bias"), model.spec)
    return T.matmul(x, model.head_weight())


def model_forward(
    model: DenseModel, tokens: np.ndarray, gates: Optional[Sequence[BlockGates]] = None
) -> Tensor:
    """Next-token logits (batch, seq, vocab); `gates=None` is the dense model."""
    spec = model.spec
    if gates is not None and len(gates) != spec.n_layers:
        raise ContractViolation(f"Expected {spec.n_layers} block gates, got {len(gates)}")
    x = embed(model, tokens)
    for i in range(spec.n_layers):
        x = block_forward_masked(x, model.block(i), None if gates is None else gates[i], spec)
    return head(model, x)


def lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy (nats)."""
    return T.cross_entropy(logits, targets)


def ones_gates(spec: ModelSpec) -> List[BlockGates]:
    return [BlockGates.ones(spec) for _ in range(spec.n_layers)]
