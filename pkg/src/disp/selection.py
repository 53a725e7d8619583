"""
Selection algebra: binary gate vectors, index sets, selection matrices.

A gate vector `s` is the diagonal of a pseudo-selection matrix S (d x d,
0/1 on the diagonal). The actual selection matrix drops the zero columns
(d x nnz). Index sets are always ascending so sliced weights keep the
original coordinate order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel

from disp import tensor as T
from disp.errors import ContractViolation, DimensionError
from disp.tensor import Tensor


@dataclass(frozen=True)
class GateVector:
    """One binary selection vector, optionally with the latent logits that produced it"""

    bits: np.ndarray
    logits: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        bits = np.asarray(self.bits).reshape(-1)
        if bits.size and not np.all((bits == 0) | (bits == 1)):
            raise ContractViolation("Gate bits must be 0 or 1")
        object.__setattr__(self, "bits", bits.astype(np.int8))
        if self.logits is not None:
            logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
            if logits.shape != bits.shape:
                raise ContractViolation(f"Logits width {logits.size} != gate width {bits.size}")
            object.__setattr__(self, "logits", logits)

    @classmethod
    def ones(cls, dim: int) -> "GateVector":
        return cls(np.ones(dim, dtype=np.int8))

    @classmethod
    def zeros(cls, dim: int) -> "GateVector":
        return cls(np.zeros(dim, dtype=np.int8))

    @property
    def dim(self) -> int:
        return int(self.bits.size)

    @property
    def nnz(self) -> int:
        return int(self.bits.sum())

    def as_tensor(self) -> Tensor:
        return Tensor(self.bits)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, GateVector) and np.array_equal(self.bits, other.bits)

    def __hash__(self) -> int:
        return hash(self.bits.tobytes())


@dataclass(frozen=True)
class IndexSet:
    """Ascending positions of the 1-bits of a gate (Ind_i)"""

    indices: np.ndarray
    dim: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ContractViolation("Index set must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= self.dim:
                raise ContractViolation(f"Index set out of range for width {self.dim}")
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return int(self.indices.size)

    def __iter__(self):
        return iter(self.indices.tolist())

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, IndexSet)
            and self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
        )

    def __hash__(self) -> int:
        return hash((self.dim, self.indices.tobytes()))

    def serialize(self) -> np.ndarray:
        """Length-prefixed ascending integer list."""
        return np.concatenate([[len(self)], self.indices]).astype(np.int64)

    @classmethod
    def deserialize(cls, payload: np.ndarray, dim: int) -> "IndexSet":
        payload = np.asarray(payload, dtype=np.int64).reshape(-1)
        if payload.size == 0 or payload[0] != payload.size - 1:
            raise ContractViolation("Corrupt index-set payload: length prefix does not match")
        return cls(payload[1:], dim)


@dataclass(frozen=True)
class SelectionMatrix:
    kind: Literal["pseudo", "actual"]
    gate: GateVector

    def dense(self) -> np.ndarray:
        if self.kind == "pseudo":
            return np.diag(self.gate.bits.astype(np.float64))
        return np.eye(self.gate.dim)[:, to_index_set(self.gate).indices]

    def compose(self, other: "SelectionMatrix") -> "SelectionMatrix":
        """pseudo . pseudo is pseudo with the AND of both gates"""
        if self.kind != "pseudo" or other.kind != "pseudo":
            raise ContractViolation("Only pseudo-selection matrices compose into a selection matrix")
        _require_same_dim(self.gate, other.gate)
        return SelectionMatrix("pseudo", GateVector(self.gate.bits & other.gate.bits))


def pseudo(gate: GateVector) -> SelectionMatrix:
    return SelectionMatrix("pseudo", gate)


def actual(gate: GateVector) -> SelectionMatrix:
    return SelectionMatrix("actual", gate)


def _require_same_dim(a: GateVector, b: GateVector) -> None:
    if a.dim != b.dim:
        raise ContractViolation(f"Gate widths differ: {a.dim} vs {b.dim}")


def to_index_set(gate: GateVector) -> IndexSet:
    return IndexSet(np.flatnonzero(gate.bits), gate.dim)


def index_select(x: T.ArrayLike, ind: IndexSet) -> Tensor:
    x = T.as_tensor(x)
    if ind.dim != x.shape[-1]:
        raise ContractViolation(f"Index set over width {ind.dim} applied to width {x.shape[-1]}")
    return T.index_select(x, ind.indices)


def index_add(a: T.ArrayLike, b: T.ArrayLike, ind: IndexSet) -> Tensor:
    a, b = T.as_tensor(a), T.as_tensor(b)
    if ind.dim != a.shape[-1] or b.shape[-1] != len(ind):
        raise ContractViolation(
            f"index_add widths disagree: target {a.shape[-1]}, source {b.shape[-1]}, "
            f"index set {len(ind)} of {ind.dim}"
        )
    return T.index_add(a, b, ind.indices)


class NnzBoundReport(BaseModel):
    """Check of nnz(S_l^T S_{l+1}) <= min(nnz(S_l), nnz(S_{l+1}))"""

    nnz_product: int
    min_nnz: int
    holds: bool
    equality_condition_holds: bool


def compose_nnz_bound_check(s_l: GateVector, s_lp1: GateVector) -> NnzBoundReport:
    _require_same_dim(s_l, s_lp1)
    a, b = s_l.bits.astype(bool), s_lp1.bits.astype(bool)
    nnz_product = int(np.sum(a & b))
    min_nnz = min(int(a.sum()), int(b.sum()))
    nested = bool(np.all(a <= b) or np.all(b <= a))
    return NnzBoundReport(
        nnz_product=nnz_product,
        min_nnz=min_nnz,
        holds=nnz_product <= min_nnz,
        equality_condition_holds=nested,
    )


def slice_weight(
    w: T.ArrayLike,
    row_gate: Optional[GateVector] = None,
    col_gate: Optional[GateVector] = None,
) -> Tensor:
    """Restrict `w` to active rows/columns, order preserved (S_row^T W S_col)."""
    w = T.as_tensor(w)
    if w.ndim != 2:
        raise DimensionError(f"slice_weight expects a matrix, got {w.shape}")
    rows = np.arange(w.shape[0])
    cols = np.arange(w.shape[1])
    if row_gate is not None:
        if row_gate.dim != w.shape[0]:
            raise ContractViolation(f"Row gate width {row_gate.dim} != weight rows {w.shape[0]}")
        rows = to_index_set(row_gate).indices
    if col_gate is not None:
        if col_gate.dim != w.shape[1]:
            raise ContractViolation(f"Column gate width {col_gate.dim} != weight cols {w.shape[1]}")
        cols = to_index_set(col_gate).indices
    return Tensor(w.data[np.ix_(rows, cols)].copy())


def slice_vector(v: T.ArrayLike, gate: Optional[GateVector]) -> Tensor:
    v = T.as_tensor(v)
    if gate is None:
        return Tensor(v.data.copy())
    if gate.dim != v.shape[0]:
        raise ContractViolation(f"Gate width {gate.dim} != vector width {v.shape[0]}")
    return Tensor(v.data[to_index_set(gate).indices].copy())


# ---------------------------------------------------------------------------
# Residual-adapter oracle
# ---------------------------------------------------------------------------
class NnzSweepReport(BaseModel):
    dim: int
    trials: int
    violations: int
    max_violation: int
    equality_mismatches: int

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.equality_mismatches == 0


def _popcount(values: np.ndarray) -> np.ndarray:
    bits = np.unpackbits(values.astype(">u8").view(np.uint8).reshape(values.shape + (8,)), axis=-1)
    return bits.sum(axis=-1)


def _sweep(a: np.ndarray, b: np.ndarray, dim: int) -> NnzSweepReport:
    both = a & b
    nnz_product = _popcount(both)
    min_nnz = np.minimum(_popcount(a), _popcount(b))
    excess = nnz_product - min_nnz
    nested = (both == a) | (both == b)
    equality = nnz_product == min_nnz
    return NnzSweepReport(
        dim=dim,
        trials=int(nnz_product.size),
        violations=int(np.sum(excess > 0)),
        max_violation=int(max(excess.max(initial=0), 0)),
        equality_mismatches=int(np.sum(nested != equality)),
    )


def nnz_bound_exhaustive(dim: int = 8) -> NnzSweepReport:
    """Every pair of gates of width `dim` (2^dim x 2^dim pairs)."""
    if dim > 12:
        raise ContractViolation("Exhaustive sweep is limited to dim <= 12")
    codes = np.arange(2**dim, dtype=np.uint64)
    return _sweep(codes[:, None], codes[None, :], dim)


def nnz_bound_random(dim: int, trials: int, seed: int = 0) -> NnzSweepReport:
    if dim > 64:
        raise ContractViolation("Random sweep packs gates into 64-bit words (dim <= 64)")
    rng = np.random.default_rng(seed)
    high = np.uint64(2**dim - 1) if dim < 64 else np.iinfo(np.uint64).max
    a = rng.integers(0, high, size=trials, dtype=np.uint64, endpoint=True)
    b = rng.integers(0, high, size=trials, dtype=np.uint64, endpoint=True)
    return _sweep(a, b, dim)


def gates_from_code(code: int, dim: int) -> GateVector:
    return GateVector(np.array([(code >> j) & 1 for j in range(dim)], dtype=np.int8))
