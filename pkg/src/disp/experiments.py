"""
Multi-run studies: random same-budget structures, parametrization
ablations and the lambda sweep. Every study returns a pandas DataFrame.
"""

from __future__ import annotations

import logging
from typing import Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from disp.budget import PruneBudget, block_param_count, count_params_exact
from disp.data import BatchSource, logits_fn, mean_nll
from disp.model import BlockGates, DenseModel, ModelSpec
from disp.pruner import GATE_NAMES, binarize, finalize_gates
from disp.reinmax import ReinMaxConfig
from disp.trainer import SEARCH_MODES, TrainConfig, search

logger = logging.getLogger(__name__)


def masked_loss(model: DenseModel, gates: Sequence[BlockGates], tokens: np.ndarray, seq_len: int) -> float:
    """Mean next-token loss of the masked model over non-overlapping windows."""
    return mean_nll(logits_fn(model, gates), tokens, seq_len)[0]


def achieved_ratio(gates: Sequence[BlockGates], spec: ModelSpec, budget: PruneBudget) -> float:
    return count_params_exact([g.vectors() for g in gates], spec) / budget.t_total


def uniform_keep_rate(spec: ModelSpec, budget: PruneBudget, iterations: int = 60) -> float:
    """Keep probability q for which a block with every gate at rate q hits the budget in expectation."""
    d, m = spec.d, spec.d_mid
    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        q = 0.5 * (lo + hi)
        expected = spec.n_layers * block_param_count(q * d, q * d, q * d, q * m, q * d, spec)
        if expected < budget.target:
            lo = q
        else:
            hi = q
    return 0.5 * (lo + hi)


def random_gates_at_budget(spec: ModelSpec, budget: PruneBudget, seed: int) -> List[BlockGates]:
    rng = np.random.default_rng(seed)
    q = uniform_keep_rate(spec, budget)
    widths = dict(zip(GATE_NAMES, (spec.d, spec.d, spec.d, spec.d_mid, spec.d)))
    # distance from the threshold orders the budget-enforcing flips
    probs = [{k: 0.5 + (q - rng.random(n)) for k, n in widths.items()} for _ in range(spec.n_layers)]
    return binarize(probs, spec, enforce_budget=True, budget=budget)


def random_structure_baseline(
    model: DenseModel,
    tokens: np.ndarray,
    budget: PruneBudget,
    seq_len: int,
    seeds: Iterable[int] = range(5),
) -> pd.DataFrame:
    rows = []
    for seed in seeds:
        gates = random_gates_at_budget(model.spec, budget, seed)
        rows.append({
            "seed": seed,
            "loss": masked_loss(model, gates, tokens, seq_len),
            "ratio": achieved_ratio(gates, model.spec, budget),
        })
        logger.info("random structure seed %d: loss %.4f ratio %.4f", seed, rows[-1]["loss"], rows[-1]["ratio"])
    return pd.DataFrame(rows)


def _run(
    model: DenseModel,
    train_tokens: np.ndarray,
    eval_tokens: np.ndarray,
    budget: PruneBudget,
    cfg: TrainConfig,
    reinmax_cfg: ReinMaxConfig,
) -> dict:
    data = BatchSource(train_tokens, cfg.seq_len, cfg.batch_size, seed=cfg.seed)
    net, log = search(model, data, budget, cfg, reinmax_cfg)
    gates = finalize_gates(net, reinmax_cfg, tied=cfg.tied)
    final = log.final()
    return {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "search_lm": final["lm"],
        "R_norm": final["R_norm"],
        "final_lm": masked_loss(model, gates, eval_tokens, cfg.seq_len),
        "ratio": achieved_ratio(gates, model.spec, budget),
    }


def ablation_study(
    model: DenseModel,
    train_tokens: np.ndarray,
    eval_tokens: np.ndarray,
    budget: PruneBudget,
    cfg: TrainConfig,
    reinmax_cfg: Optional[ReinMaxConfig] = None,
    modes: Sequence[str] = SEARCH_MODES,
    seeds: Sequence[int] = (0, 1, 2),
) -> pd.DataFrame:
    """One search per (mode, seed); final_lm is the masked loss of the finalized gates."""
    reinmax_cfg = reinmax_cfg or ReinMaxConfig()
    rows = []
    for mode in modes:
        for seed in seeds:
            run_cfg = cfg.model_copy(update={"mode": mode, "seed": seed})
            rows.append(_run(model, train_tokens, eval_tokens, budget, run_cfg, reinmax_cfg))
            logger.info("ablation %s seed %d: final lm %.4f", mode, seed, rows[-1]["final_lm"])
    return pd.DataFrame(rows)


def ablation_means(df: pd.DataFrame) -> pd.DataFrame:
    return df.groupby("mode", sort=False)[["final_lm", "search_lm", "ratio", "R_norm"]].mean().reset_index()


def lambda_sweep(
    model: DenseModel,
    train_tokens: np.ndarray,
    eval_tokens: np.ndarray,
    budget: PruneBudget,
    cfg: TrainConfig,
    reinmax_cfg: Optional[ReinMaxConfig] = None,
    lambdas: Sequence[float] = (4.0, 6.0, 8.0, 10.0),
) -> pd.DataFrame:
    reinmax_cfg = reinmax_cfg or ReinMaxConfig()
    rows = []
    for lam in lambdas:
        run_budget = budget.model_copy(update={"lambda_": float(lam)})
        row = _run(model, train_tokens, eval_tokens, run_budget, cfg, reinmax_cfg)
        rows.append({"lambda": float(lam), **row})
        logger.info("lambda %.2f: final lm %.4f ratio %.4f", lam, row["final_lm"], row["ratio"])
    return pd.DataFrame(rows)
