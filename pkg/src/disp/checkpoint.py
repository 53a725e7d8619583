"""
Single-file tensor checkpoints.

Layout:

    DISPCKPT1\\n
    <manifest byte length>\\n
    <manifest: UTF-8 key=value lines>
    <payload: raw little-endian tensor bytes>

Manifest keys are `meta.<name>=<json value>` and
`tensor.<name>=<dtype>;<shape>;<offset>;<nbytes>` with offsets relative to
the payload start.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from disp.budget import PruneBudget
from disp.errors import ContractViolation, UsageError
from disp.hypernet import HyperNetwork
from disp.model import BLOCK_KEYS, BlockWeights, DenseModel, ModelSpec
from disp.pruner import PrunedBlock, PrunedModel
from disp.reinmax import GateRNG, ReinMaxConfig
from disp.selection import IndexSet
from disp.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"DISPCKPT1"
OPTIM_PREFIX = "optim."

PathLike = Union[str, Path]


def save_checkpoint(path: PathLike, tensors: Dict[str, np.ndarray], meta: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines, chunks, offset = [], [], 0
    for key in sorted(meta):
        lines.append(f"meta.{key}={json.dumps(meta[key], sort_keys=True)}")
    for name in sorted(tensors):
        if "=" in name or "\n" in name:
            raise ContractViolation(f"Tensor name '{name}' cannot be stored")
        arr = np.ascontiguousarray(tensors[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor.{name}={arr.dtype.str};{shape};{offset};{len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC + b"\n")
        f.write(f"{len(manifest)}\n".encode("ascii"))
        f.write(manifest)
        for raw in chunks:
            f.write(raw)
    logger.debug("Saved %d tensors to %s", len(tensors), path)
    return path


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"Checkpoint not found: {path}")
    blob = path.read_bytes()
    head, _, rest = blob.partition(b"\n")
    if head != MAGIC:
        raise ContractViolation(f"{path} is not a checkpoint (bad magic)")
    size_line, _, rest = rest.partition(b"\n")
    try:
        size = int(size_line)
    except ValueError as e:
        raise ContractViolation(f"{path}: corrupt manifest length") from e
    manifest, payload = rest[:size].decode("utf-8"), rest[size:]

    tensors: Dict[str, np.ndarray] = {}
    meta: Dict[str, Any] = {}
    for line in manifest.splitlines():
        if not line:
            continue
        key, _, value = line.partition("=")
        kind, _, name = key.partition(".")
        if kind == "meta":
            meta[name] = json.loads(value)
        elif kind == "tensor":
            dtype, shape, offset, nbytes = value.split(";")
            shape = tuple(int(s) for s in shape.split(",")) if shape else ()
            offset, nbytes = int(offset), int(nbytes)
            if offset + nbytes > len(payload):
                raise ContractViolation(f"{path}: tensor '{name}' runs past the end of the file")
            dt = np.dtype(dtype)
            if nbytes == 0:
                tensors[name] = np.zeros(shape, dtype=dt)
                continue
            arr = np.frombuffer(payload, dtype=dt, count=nbytes // dt.itemsize, offset=offset)
            tensors[name] = arr.reshape(shape).copy()
        else:
            raise ContractViolation(f"{path}: unknown manifest entry '{key}'")
    return tensors, meta


def file_sha256(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _expect_kind(meta: Dict[str, Any], kind: str, path: PathLike) -> ModelSpec:
    if meta.get("kind") != kind:
        raise UsageError(f"{path} holds a '{meta.get('kind')}' checkpoint, expected '{kind}'")
    return ModelSpec(**meta["spec"])


# ---------------------------------------------------------------------------
# Dense model
# ---------------------------------------------------------------------------
def save_dense(path: PathLike, model: DenseModel, **meta: Any) -> Path:
    return save_checkpoint(path, model.state_dict(), {"kind": "dense", "spec": model.spec.model_dump(), **meta})


def load_dense(path: PathLike) -> DenseModel:
    tensors, meta = load_checkpoint(path)
    spec = _expect_kind(meta, "dense", path)
    return DenseModel.from_state_dict(spec, tensors).freeze()


# ---------------------------------------------------------------------------
# Pruned model
# ---------------------------------------------------------------------------
def save_pruned(path: PathLike, pruned: PrunedModel, **meta: Any) -> Path:
    tensors = {f"shared.{k}": v.data for k, v in pruned.params.items()}
    for i, block in enumerate(pruned.blocks):
        for key, t in block.weights.tensors().items():
            tensors[f"blocks.{i}.{key}"] = t.data
        for k, ind in enumerate(block.index_sets, start=1):
            tensors[f"blocks.{i}.ind{k}"] = ind.serialize()
    meta = {"kind": "pruned", "spec": pruned.spec.model_dump(), "param_count": pruned.param_count(), **meta}
    return save_checkpoint(path, tensors, meta)


def load_pruned(path: PathLike) -> PrunedModel:
    tensors, meta = load_checkpoint(path)
    spec = _expect_kind(meta, "pruned", path)
    shared = {k[len("shared."):]: Tensor(v) for k, v in tensors.items() if k.startswith("shared.")}
    widths = [spec.d, spec.d, spec.d, spec.d_mid, spec.d]
    blocks = []
    for i in range(spec.n_layers):
        p = f"blocks.{i}."
        weights = BlockWeights(**{k: Tensor(tensors[p + k]) for k in BLOCK_KEYS if p + k in tensors})
        index_sets = [IndexSet.deserialize(tensors[f"{p}ind{k}"], widths[k - 1]) for k in range(1, 6)]
        blocks.append(PrunedBlock(weights, index_sets))
    pruned = PrunedModel(spec, blocks, shared)
    if "param_count" in meta and meta["param_count"] != pruned.param_count():
        raise ContractViolation(f"{path}: stored parameter count does not match the loaded tensors")
    return pruned


# ---------------------------------------------------------------------------
# Search state
# ---------------------------------------------------------------------------
@dataclass
class SearchState:
    net: HyperNetwork
    search_mode: str
    rng: GateRNG
    reinmax: ReinMaxConfig
    budget: PruneBudget
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    data_position: int = 0
    iteration: int = 0

    @property
    def tied(self) -> bool:
        return self.search_mode == "constrained"


def save_search_state(path: PathLike, state: SearchState, **meta: Any) -> Path:
    net = state.net
    meta = {
        "kind": "search",
        "spec": net.spec.model_dump(),
        "gate_param": net.mode,
        "hypernet_seed": net.seed,
        "search_mode": state.search_mode,
        "rng": state.rng.state(),
        "reinmax": state.reinmax.model_dump(),
        "budget": state.budget.model_dump(by_alias=True),
        "data_position": state.data_position,
        "iteration": state.iteration,
        **meta,
    }
    tensors = {**net.state_dict(), **state.optimizer_state}
    return save_checkpoint(path, tensors, meta)


def load_search_state(path: PathLike) -> SearchState:
    tensors, meta = load_checkpoint(path)
    spec = _expect_kind(meta, "search", path)
    net = HyperNetwork(spec, mode=meta["gate_param"], seed=meta["hypernet_seed"])
    net.load_state_dict({k: v for k, v in tensors.items() if not k.startswith(OPTIM_PREFIX)})
    return SearchState(
        net=net,
        search_mode=meta["search_mode"],
        rng=GateRNG.from_state(meta["rng"]),
        reinmax=ReinMaxConfig(**meta["reinmax"]),
        budget=PruneBudget(**meta["budget"]),
        optimizer_state={k: v for k, v in tensors.items() if k.startswith(OPTIM_PREFIX)},
        data_position=int(meta.get("data_position", 0)),
        iteration=int(meta.get("iteration", 0)),
    )
