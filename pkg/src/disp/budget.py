"""
Parameter counting and the budget regularizer.

Per block, with n_i the number of open bits of gate s_i:

    attention  3 * n1 * d + d * n2          (Wq, Wk, Wv rows; Wo columns)
    norms      2 * n1 + 2 * n3              (gain + bias; n1 + n3 for RMSNorm)
    gated MLP  2 * n3 * n4 + n4 * n5        (W1, W2, W3)
    std MLP    n3 * n4 + n4 * n5            (W1, W3)

Embeddings, the final norm and the LM head are not gate-controlled and are
excluded from both T(s) and T_total; `fixed_params` counts them for
whole-model ratios.
"""

from __future__ import annotations

from typing import Sequence, Union

from pydantic import BaseModel, ConfigDict, Field

from disp import tensor as T
from disp.errors import ContractViolation
from disp.model import BlockGates, ModelSpec
from disp.selection import GateVector
from disp.tensor import Tensor

Count = Union[int, float, Tensor]


class PruneBudget(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    p: float = Field(0.5, gt=0.0, le=1.0, description="Preserved fraction of gate-controlled parameters")
    lambda_: float = Field(6.0, gt=0.0, alias="lambda")
    t_total: int = Field(..., gt=0)

    @classmethod
    def for_spec(cls, spec: ModelSpec, p: float = 0.5, lambda_: float = 6.0) -> "PruneBudget":
        return cls(p=p, lambda_=lambda_, t_total=total_params(spec))

    @property
    def target(self) -> float:
        return self.p * self.t_total


def block_param_count(n1: Count, n2: Count, n3: Count, n4: Count, n5: Count, spec: ModelSpec) -> Count:
    """Works on plain integers and on differentiable scalar tensors alike."""
    d = spec.d
    attention = n1 * (3 * d) + n2 * d
    norms = (n1 + n3) * (2 if spec.norm_kind == "layernorm" else 1)
    if spec.mlp_kind == "gated":
        mlp = n3 * n4 * 2 + n4 * n5
    else:
        mlp = n3 * n4 + n4 * n5
    return attention + norms + mlp


def total_params(spec: ModelSpec) -> int:
    d, m = spec.d, spec.d_mid
    return spec.n_layers * int(block_param_count(d, d, d, m, d, spec))


def fixed_params(spec: ModelSpec) -> int:
    """Parameters outside the blocks: embeddings, final norm and (untied) LM head."""
    d, v = spec.d, spec.vocab_size
    count = v * d + spec.max_seq_len * d + d * (2 if spec.norm_kind == "layernorm" else 1)
    if not spec.tie_embeddings:
        count += d * v
    return count


def count_params(gates: Sequence[BlockGates], spec: ModelSpec) -> Tensor:
    """T(s), differentiable through the gate tensors."""
    if len(gates) != spec.n_layers:
        raise ContractViolation(f"Expected {spec.n_layers} block gates, got {len(gates)}")
    total = None
    for g in gates:
        sums = [t.sum() for t in g.tensors()]
        block = block_param_count(*sums, spec)
        total = block if total is None else total + block
    return total


def count_params_exact(vectors: Sequence[Sequence[GateVector]], spec: ModelSpec) -> int:
    """Integer T(s) for deterministic gates given as five GateVectors per block."""
    return int(sum(block_param_count(*(v.nnz for v in block), spec) for block in vectors))


def budget_regularizer(t: Tensor, budget: PruneBudget) -> Tensor:
    """
    R = log(max(T, pT_total) / min(T, pT_total)).

    Zero exactly on budget (the tie sends both branches to T, so the
    gradient there is 0); pushes T toward the target from either side.
    """
    t = T.as_tensor(t)
    if not t.item() > 0:
        raise ContractViolation(f"Parameter count must be positive, got {t.item()}")
    target = budget.target
    return T.log(T.maximum(t, target)) - T.log(T.minimum(t, target))


def total_objective(lm: Count, r: Count, lambda_: float) -> Count:
    """L + lambda * R"""
    return lm + r * lambda_
