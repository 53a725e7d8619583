"""
Gate finalization, weight extraction and pruned inference.

A pruned block keeps the residual stream at full width d and talks to it
through index selection (gather) and index addition (scatter):

    1. h = Norm(x[:, Ind1])
    2. a = MultiHead(h Wq~, h Wk~, h Wv~) Wo~
    3. x = Index_Add(x, a, Ind2)
    4. h = Norm(x[:, Ind3])
    5. m = MLP~(h)                      (sliced by Ind3 / Ind4 / Ind5)
    6. x = Index_Add(x, m, Ind5)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from disp import tensor as T
from disp.budget import PruneBudget, block_param_count
from disp.errors import ContractViolation
from disp.hypernet import HyperNetwork, split_latents
from disp.model import (
    BlockGates,
    BlockWeights,
    DenseModel,
    ModelSpec,
    block_forward_masked,
    embed,
    head,
    mlp_forward,
    model_forward,
    multi_head,
    normalize,
)
from disp.reinmax import ReinMaxConfig
from disp.selection import GateVector, IndexSet, index_add, index_select, slice_vector, slice_weight
from disp.tensor import Tensor

logger = logging.getLogger(__name__)

GATE_NAMES = ("s1", "s2", "s3", "s4", "s5")


@dataclass
class PrunedBlock:
    weights: BlockWeights
    index_sets: List[IndexSet]

    @property
    def widths(self) -> List[int]:
        return [len(ind) for ind in self.index_sets]


class PrunedModel:
    """
    Sliced block weights plus materialized index sets.

    `params` holds the untouched embeddings, final norm and LM head under the
    same names as in DenseModel, so the embed/head helpers apply unchanged.
    """

    def __init__(self, spec: ModelSpec, blocks: List[PrunedBlock], params: Dict[str, Tensor]):
        self.spec = spec
        self.blocks = blocks
        self.params = params

    def head_weight(self) -> Tensor:
        if self.spec.tie_embeddings:
            return self.params["tok_emb"].transpose()
        return self.params["lm_head"]

    def param_count(self) -> int:
        """Gate-controlled parameters (all block tensors)."""
        return int(sum(t.size for b in self.blocks for t in b.weights.tensors().values()))

    def total_param_count(self) -> int:
        return self.param_count() + int(sum(t.size for t in self.params.values()))

    def gates(self) -> List[BlockGates]:
        """Deterministic gates recovered from the stored index sets."""
        out = []
        for block in self.blocks:
            vectors = []
            for ind in block.index_sets:
                bits = np.zeros(ind.dim, dtype=np.int8)
                bits[ind.indices] = 1
                vectors.append(GateVector(bits))
            out.append(BlockGates.from_vectors(vectors))
        return out


# ---------------------------------------------------------------------------
# Finalization
# ---------------------------------------------------------------------------
def gate_probabilities(net: HyperNetwork, cfg: ReinMaxConfig) -> List[Dict[str, np.ndarray]]:
    """pi0 per block and gate name."""
    with T.no_grad():
        latents = net.forward()
    out = []
    for latent in latents:
        parts = split_latents(latent, net.spec)
        out.append({k: 0.5 * (1.0 + np.tanh(0.5 * (v.data + cfg.c))) for k, v in parts.items()})
    return out


def _block_count(bits: Dict[str, np.ndarray], spec: ModelSpec) -> int:
    return int(block_param_count(*(int(bits[k].sum()) for k in GATE_NAMES), spec))


def finalize_gates(
    net: HyperNetwork,
    cfg: ReinMaxConfig,
    enforce_budget: bool = False,
    budget: Optional[PruneBudget] = None,
    tied: bool = False,
) -> List[BlockGates]:
    """Deterministic gates s = 1[pi0 >= 0.5] from a trained generator."""
    return binarize(gate_probabilities(net, cfg), net.spec, enforce_budget, budget, tied)


def binarize(
    probs: List[Dict[str, np.ndarray]],
    spec: ModelSpec,
    enforce_budget: bool = False,
    budget: Optional[PruneBudget] = None,
    tied: bool = False,
) -> List[BlockGates]:
    """
    Threshold open probabilities at 0.5.

    With `enforce_budget`, bits are flipped in order of increasing
    |pi0 - 0.5| whenever the flip brings T(s) closer to p * T_total. The last
    open bit of s4 is kept unless s3 or s5 of that block is already empty.
    """
    bits = [{k: (p[k] >= 0.5).astype(np.int8) for k in GATE_NAMES} for p in probs]
    if tied:
        for b in bits:
            b["s2"], b["s3"], b["s5"] = b["s1"].copy(), b["s1"].copy(), b["s1"].copy()

    if enforce_budget:
        if budget is None:
            raise ContractViolation("enforce_budget needs a PruneBudget")
        _enforce_budget(bits, probs, spec, budget, tied)

    return [BlockGates.from_vectors([GateVector(b[k]) for k in GATE_NAMES]) for b in bits]


def _enforce_budget(
    bits: List[Dict[str, np.ndarray]],
    probs: List[Dict[str, np.ndarray]],
    spec: ModelSpec,
    budget: PruneBudget,
    tied: bool,
) -> None:
    names = ("s1", "s4") if tied else GATE_NAMES
    candidates = []
    for l, p in enumerate(probs):
        for k in names:
            for j, margin in enumerate(np.abs(p[k] - 0.5)):
                candidates.append((float(margin), l, GATE_NAMES.index(k), j))
    candidates.sort()

    target = budget.target
    block_counts = [_block_count(b, spec) for b in bits]
    total = sum(block_counts)
    # each accepted flip strictly shrinks |T - target|; stop once a full pass changes nothing
    improved = True
    while improved:
        improved = False
        for _, l, k_idx, j in candidates:
            b = bits[l]
            k = GATE_NAMES[k_idx]
            group = ("s1", "s2", "s3", "s5") if tied and k == "s1" else (k,)
            new_value = 1 - b[k][j]
            if k == "s4" and new_value == 0 and b["s4"].sum() == 1 and b["s3"].sum() > 0 and b["s5"].sum() > 0:
                continue
            for g in group:
                b[g][j] = new_value
            new_block = _block_count(b, spec)
            new_total = total - block_counts[l] + new_block
            if abs(new_total - target) < abs(total - target):
                total, block_counts[l] = new_total, new_block
                improved = True
            else:
                for g in group:
                    b[g][j] = 1 - new_value
    logger.info("Budget enforcement: T(s)=%d target=%.1f ratio=%.4f", total, target, total / budget.t_total)


# ---------------------------------------------------------------------------
# Extraction and pruned inference
# ---------------------------------------------------------------------------
def extract_block(w: BlockWeights, gates: BlockGates) -> PrunedBlock:
    s1, s2, s3, s4, s5 = gates.vectors()
    sliced = BlockWeights(
        wq=slice_weight(w.wq, row_gate=s1),
        wk=slice_weight(w.wk, row_gate=s1),
        wv=slice_weight(w.wv, row_gate=s1),
        wo=slice_weight(w.wo, col_gate=s2),
        norm1_gain=slice_vector(w.norm1_gain, s1),
        norm2_gain=slice_vector(w.norm2_gain, s3),
        w1=slice_weight(w.w1, row_gate=s3, col_gate=s4),
        w3=slice_weight(w.w3, row_gate=s4, col_gate=s5),
        norm1_bias=None if w.norm1_bias is None else slice_vector(w.norm1_bias, s1),
        norm2_bias=None if w.norm2_bias is None else slice_vector(w.norm2_bias, s3),
        w2=None if w.w2 is None else slice_weight(w.w2, row_gate=s3, col_gate=s4),
    )
    return PrunedBlock(sliced, gates.index_sets())


def extract(model: DenseModel, gates: Sequence[BlockGates]) -> PrunedModel:
    spec = model.spec
    if len(gates) != spec.n_layers:
        raise ContractViolation(f"Expected {spec.n_layers} block gates, got {len(gates)}")
    for g in gates:
        g.validate(spec)
    blocks = [extract_block(model.block(i), gates[i]) for i in range(spec.n_layers)]
    shared = {k: Tensor(v.data.copy()) for k, v in model.params.items() if not k.startswith("blocks.")}
    return PrunedModel(spec, blocks, shared)


def pruned_block_forward(x: Tensor, block: PrunedBlock, spec: ModelSpec) -> Tensor:
    if x.shape[-1] != spec.d:
        raise ContractViolation(f"Pruned block input width {x.shape[-1]} != d={spec.d}")
    w = block.weights
    ind1, ind2, ind3, _, ind5 = block.index_sets

    h = normalize(index_select(x, ind1), None, w.norm1_gain, w.norm1_bias, spec)
    attn = multi_head(T.matmul(h, w.wq), T.matmul(h, w.wk), T.matmul(h, w.wv), spec)
    x = index_add(x, T.matmul(attn, w.wo), ind2)

    h = normalize(index_select(x, ind3), None, w.norm2_gain, w.norm2_bias, spec)
    x = index_add(x, T.matmul(mlp_forward(h, w, None, spec), w.w3), ind5)
    return x


def pruned_model_forward(pruned: PrunedModel, tokens: np.ndarray) -> Tensor:
    x = embed(pruned, tokens)
    for block in pruned.blocks:
        x = pruned_block_forward(x, block, pruned.spec)
        if x.shape[-1] != pruned.spec.d:
            raise ContractViolation("Residual stream lost its full width")
    return head(pruned, x)


# ---------------------------------------------------------------------------
# Equivalence
# ---------------------------------------------------------------------------
class EquivalenceReport(BaseModel):
    trials: int
    max_abs_diff: float
    per_block_diffs: List[float]
    tolerance: float
    passed: bool
    offending_block: Optional[int] = None


def equivalence_report(
    dense: DenseModel,
    pruned: PrunedModel,
    gates: Sequence[BlockGates],
    trials: int = 20,
    batch_size: int = 2,
    seq_len: Optional[int] = None,
    seed: int = 0,
    tolerance: float = 1e-9,
) -> EquivalenceReport:
    """
    Compare masked search model and pruned model on random token batches.

    Logits are compared end to end; each block is also fed the same input
    on both paths so a bad slice can be traced to its block.
    """
    spec = dense.spec
    n = seq_len or spec.max_seq_len
    rng = np.random.default_rng(seed)
    logits_diff = 0.0
    block_diffs = [0.0] * spec.n_layers
    with T.no_grad():
        for _ in range(trials):
            tokens = rng.integers(0, spec.vocab_size, size=(batch_size, n))
            masked = model_forward(dense, tokens, gates).data
            sliced = pruned_model_forward(pruned, tokens).data
            logits_diff = max(logits_diff, float(np.max(np.abs(masked - sliced))))
            x = embed(dense, tokens)
            for i in range(spec.n_layers):
                a = block_forward_masked(x, dense.block(i), gates[i], spec)
                b = pruned_block_forward(x, pruned.blocks[i], spec)
                block_diffs[i] = max(block_diffs[i], float(np.max(np.abs(a.data - b.data))))
                x = a
    worst = max([logits_diff] + block_diffs)
    passed = worst <= tolerance
    offending = None if passed else int(np.argmax(block_diffs))
    if not passed:
        logger.warning("Equivalence failed: max diff %.3e (block %s)", worst, offending)
    return EquivalenceReport(
        trials=trials,
        max_abs_diff=logits_diff,
        per_block_diffs=block_diffs,
        tolerance=tolerance,
        passed=passed,
        offending_block=offending,
    )
