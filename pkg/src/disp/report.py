"""
Architecture reports and run manifests.

widths.csv            one row per block: nnz of s1..s5
dim_preservation.csv  one row per embedding dimension: fraction of the
                      s1/s2/s3/s5 gates (over all blocks) that keep it
summary.csv           gate-controlled ratio T(s) / T_total and the whole-model
                      ratio (embeddings, final norm and head included)
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from disp import __version__
from disp.budget import count_params_exact, fixed_params, total_params
from disp.model import BlockGates, ModelSpec
from disp.pruner import PrunedModel

logger = logging.getLogger(__name__)

GATE_COLUMNS = ["s1", "s2", "s3", "s4", "s5"]


class ArchitectureReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    widths: pd.DataFrame
    dim_preservation: pd.DataFrame
    summary: pd.DataFrame
    paths: Dict[str, str] = Field(default_factory=dict)


def _bits(gates: Sequence[BlockGates]) -> List[List[np.ndarray]]:
    return [[v.bits for v in g.vectors()] for g in gates]


def widths_frame(gates: Sequence[BlockGates]) -> pd.DataFrame:
    rows = [[int(b.sum()) for b in block] for block in _bits(gates)]
    df = pd.DataFrame(rows, columns=GATE_COLUMNS)
    df.insert(0, "block", range(len(rows)))
    return df


def dim_preservation_frame(gates: Sequence[BlockGates], spec: ModelSpec) -> pd.DataFrame:
    kept = np.zeros(spec.d)
    for s1, s2, s3, _, s5 in _bits(gates):
        kept += s1 + s2 + s3 + s5
    return pd.DataFrame({"dim": np.arange(spec.d), "preserved": kept / (4 * len(gates))})


def summary_frame(gates: Sequence[BlockGates], spec: ModelSpec, p: Optional[float] = None) -> pd.DataFrame:
    t = count_params_exact([g.vectors() for g in gates], spec)
    t_total = total_params(spec)
    fixed = fixed_params(spec)
    row = {
        "T": t,
        "T_total": t_total,
        "ratio": t / t_total,
        "total_params_model": t + fixed,
        "total_params_dense": t_total + fixed,
        "model_ratio": (t + fixed) / (t_total + fixed),
    }
    if p is not None:
        row["target_ratio"] = p
    return pd.DataFrame([row])


def report_architecture(
    source: Union[PrunedModel, Sequence[BlockGates]],
    spec: Optional[ModelSpec] = None,
    out_dir: Optional[Union[str, Path]] = None,
    p: Optional[float] = None,
) -> ArchitectureReport:
    """Width tables for a pruned model or a list of deterministic gates; written as CSV when `out_dir` is set."""
    if isinstance(source, PrunedModel):
        spec, gates = source.spec, source.gates()
    else:
        gates = list(source)
        if spec is None:
            raise ValueError("A ModelSpec is needed when reporting on raw gates")
    report = ArchitectureReport(
        widths=widths_frame(gates),
        dim_preservation=dim_preservation_frame(gates, spec),
        summary=summary_frame(gates, spec, p),
    )

    ratio = float(report.summary["ratio"].iloc[0])
    mean_kept = float(report.dim_preservation["preserved"].mean())
    if abs(mean_kept - ratio) > 0.15:
        logger.warning("Mean dimension preservation %.3f is far from the parameter ratio %.3f", mean_kept, ratio)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in ("widths", "dim_preservation", "summary"):
            path = out / f"{name}.csv"
            getattr(report, name).to_csv(path, index=False)
            report.paths[name] = str(path)
    return report


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------
class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    inputs: Dict[str, str] = Field(default_factory=dict, description="Input path -> SHA-256")
    outputs: List[str] = Field(default_factory=list)
    version: str = __version__
    created_at: str = Field(default_factory=lambda: dt.datetime.now(dt.timezone.utc).isoformat())


def append_manifest(out_dir: Union[str, Path], manifest: RunManifest) -> Path:
    """One JSON line per command in <out_dir>/manifest.jsonl; existing lines are never rewritten."""
    path = Path(out_dir) / "manifest.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(manifest.model_dump(), sort_keys=True, default=str) + "\n")
    return path


def read_manifests(out_dir: Union[str, Path]) -> List[RunManifest]:
    path = Path(out_dir) / "manifest.jsonl"
    if not path.exists():
        return []
    return [RunManifest(**json.loads(line)) for line in path.read_text(encoding="utf-8").splitlines() if line]
