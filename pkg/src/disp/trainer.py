"""
Structure search: train the gate generator against a frozen dense model.

Each iteration samples binary gates with ReinMax, runs the masked model,
and minimizes  lm_loss + lambda * R(T(s))  with AdamW over the generator
parameters only.
"""

from __future__ import annotations

import contextlib
import logging
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from disp import tensor as T
from disp.budget import PruneBudget, budget_regularizer, count_params, total_objective
from disp.data import BatchSource, Prefetcher
from disp.errors import ContractViolation, NonFiniteLossError
from disp.hypernet import GateParam, HyperNetwork, latents_to_gates
from disp.model import BlockGates, DenseModel, lm_loss, model_forward
from disp.optim import AdamW, clip_grad_norm
from disp.reinmax import GateRNG, ReinMaxConfig

logger = logging.getLogger(__name__)

SearchMode = Literal["disp", "constrained", "elementwise", "no-gru"]
SEARCH_MODES = ("disp", "constrained", "elementwise", "no-gru")

_GATE_PARAM = {"disp": "hypernet", "constrained": "hypernet", "elementwise": "elementwise", "no-gru": "no-gru"}


class TrainConfig(BaseModel):
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    iterations: int = Field(10000, ge=1)
    batch_size: int = Field(1, ge=1)
    seq_len: int = Field(64, ge=1)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    seed: int = 0
    mode: SearchMode = "disp"
    log_every: int = Field(100, ge=1)
    grad_clip: float = Field(1.0, ge=0.0)
    prefetch: bool = False
    parametrization: Optional[GateParam] = Field(None, description="Overrides the generator the mode implies")

    @property
    def gate_param(self) -> str:
        return self.parametrization or _GATE_PARAM[self.mode]

    @property
    def tied(self) -> bool:
        return self.mode == "constrained"


class RunLog:
    """Per-iteration search records; R_norm is R_raw over its maximum in the run."""

    def __init__(self, n_layers: int):
        self.n_layers = n_layers
        self.records: List[Dict[str, float]] = []
        self.rng_state: Optional[Dict[str, int]] = None
        self.optimizer_state: Dict[str, np.ndarray] = {}
        self.data_position = 0

    def append(self, iteration: int, lm: float, r_raw: float, ratio: float, open_fractions: List[float]) -> None:
        if self.records and iteration <= self.records[-1]["iteration"]:
            raise ContractViolation(f"RunLog iterations must increase, got {iteration}")
        record = {"iteration": iteration, "lm": lm, "R_raw": r_raw, "ratio": ratio}
        for i, frac in enumerate(open_fractions):
            record[f"block_{i}_open"] = frac
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def frame(self) -> pd.DataFrame:
        columns = ["iteration", "lm", "R_raw", "R_norm", "ratio"] + [f"block_{i}_open" for i in range(self.n_layers)]
        if not self.records:
            return pd.DataFrame(columns=columns)
        df = pd.DataFrame(self.records)
        peak = df["R_raw"].max()
        df["R_norm"] = df["R_raw"] / peak if peak > 0 else 0.0
        return df[columns]

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame().to_csv(path, index=False)
        return path

    def final(self) -> Dict[str, float]:
        if not self.records:
            return {}
        return self.frame().iloc[-1].to_dict()

    @classmethod
    def from_csv(cls, path: Union[str, Path], n_layers: int) -> "RunLog":
        log = cls(n_layers)
        df = pd.read_csv(path).drop(columns=["R_norm"])
        log.records = [{**row, "iteration": int(row["iteration"])} for row in df.to_dict("records")]
        return log

    def extend(self, other: "RunLog") -> "RunLog":
        """Append the records of a resumed run; resume state comes from `other`."""
        if self.records and other.records and other.records[0]["iteration"] <= self.records[-1]["iteration"]:
            raise ContractViolation("Resumed run log must continue after the previous iterations")
        self.records.extend(other.records)
        self.rng_state = other.rng_state
        self.optimizer_state = other.optimizer_state
        self.data_position = other.data_position
        return self

    @property
    def last_iteration(self) -> int:
        return int(self.records[-1]["iteration"]) if self.records else 0


def _open_fractions(gates: List[BlockGates]) -> List[float]:
    fractions = []
    for g in gates:
        bits = [t.data for t in g.tensors()]
        fractions.append(float(sum(b.sum() for b in bits) / sum(b.size for b in bits)))
    return fractions


def assert_no_model_grads(model: DenseModel) -> None:
    holders = [k for k, t in model.params.items() if t.grad is not None or t.requires_grad]
    if holders:
        raise ContractViolation(f"Dense weights must stay frozen; gradient state on {holders[:3]}")


def search(
    model: DenseModel,
    data: BatchSource,
    budget: PruneBudget,
    cfg: TrainConfig,
    reinmax_cfg: Optional[ReinMaxConfig] = None,
    net: Optional[HyperNetwork] = None,
    rng: Optional[GateRNG] = None,
    optimizer_state: Optional[Dict[str, np.ndarray]] = None,
    start_iteration: int = 0,
) -> Tuple[HyperNetwork, RunLog]:
    """
    Train the gate generator; the dense weights are only read.

    `net`, `rng`, `optimizer_state` and `start_iteration` resume an
    interrupted search, with `data` already moved to the saved position
    (`BatchSource.seek`); otherwise everything is built from the config
    seeds. The returned log carries the state needed for the next resume.
    """
    spec = model.spec
    reinmax_cfg = reinmax_cfg or ReinMaxConfig()
    assert_no_model_grads(model)
    if net is None:
        net = HyperNetwork(spec, mode=cfg.gate_param, seed=cfg.seed)
    if rng is None:
        rng = GateRNG(cfg.seed).split(reinmax_cfg.rng_seed)

    optimizer = AdamW(
        net.parameters(),
        lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    if optimizer_state:
        optimizer.load_state_dict(optimizer_state)
    data_position = data.position + cfg.iterations * data.batch_size
    log = RunLog(spec.n_layers)
    logger.info(
        "Search: mode=%s iterations=%d p=%.3f lambda=%.2f tau=%.2f c=%.2f (%d generator parameters)",
        cfg.mode, cfg.iterations, budget.p, budget.lambda_, reinmax_cfg.tau, reinmax_cfg.c, net.num_parameters(),
    )

    with contextlib.ExitStack() as stack:
        batches = stack.enter_context(Prefetcher(data, cfg.iterations)) if cfg.prefetch else data
        last = start_iteration + cfg.iterations
        for it in range(start_iteration + 1, last + 1):
            inputs, targets = batches.next_batch()
            gates = latents_to_gates(net.forward(), spec, reinmax_cfg, "sample", rng, tied=cfg.tied)
            lm = lm_loss(model_forward(model, inputs, gates), targets)
            t = count_params(gates, spec)
            r = budget_regularizer(t, budget)
            loss = total_objective(lm, r, budget.lambda_)

            fractions = _open_fractions(gates)
            if not math.isfinite(loss.item()):
                raise NonFiniteLossError(
                    "Search objective is not finite",
                    it,
                    {"lm": lm.item(), "R": r.item(), "T": t.item(), "open": [round(f, 4) for f in fractions]},
                )

            optimizer.zero_grad()
            loss.backward()
            clip_grad_norm(net.parameters(), cfg.grad_clip)
            optimizer.step()

            ratio = t.item() / budget.t_total
            log.append(it, lm.item(), r.item(), ratio, fractions)
            if it % cfg.log_every == 0 or it == last:
                logger.info(
                    "iter %d lm %.4f R %.4f ratio %.4f open %s",
                    it, lm.item(), r.item(), ratio, " ".join(f"{f:.2f}" for f in fractions),
                )

    log.rng_state = rng.state()
    log.optimizer_state = {k: np.copy(v) for k, v in optimizer.state_dict().items()}
    log.data_position = data_position
    assert_no_model_grads(model)
    return net, log


def freeze_check(before: Union[DenseModel, Dict[str, np.ndarray]], after: Union[DenseModel, Dict[str, np.ndarray]]) -> bool:
    """True iff both hold bitwise identical tensors under the same names."""
    a = before.state_dict() if isinstance(before, DenseModel) else before
    b = after.state_dict() if isinstance(after, DenseModel) else after
    if a.keys() != b.keys():
        return False
    return all(
        a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a
    )


def main():
    from disp.data import Corpus
    from disp.model import ModelSpec

    logging.basicConfig(level=logging.INFO)
    spec = ModelSpec(d=16, n_layers=2, n_heads=2, d_mid=32, max_seq_len=16)
    corpus = Corpus(b"the quick brown fox jumps over the lazy dog. " * 40)
    model = DenseModel.init(spec, seed=0)
    before = model.copy()
    data = BatchSource(corpus.split("train"), seq_len=16, batch_size=1, seed=0)
    _, log = search(model, data, PruneBudget.for_spec(spec, p=0.5), TrainConfig(iterations=50, log_every=10))
    print(log.frame().tail())
    print(f"weights unchanged: {freeze_check(before, model)}")


if __name__ == "__main__":
    main()
