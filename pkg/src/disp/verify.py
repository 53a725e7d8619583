"""
Invariant suites behind `disp verify`.

gradcheck    every autograd op plus the composed block, generator and
             ReinMax graphs against central finite differences
prop1        nnz(S_l^T S_{l+1}) <= min(nnz) over all width-8 gate pairs and
             random pairs at widths 4, 8 and 16, equality exactly for nested index sets
reinmax      binary forward values, initial open rate, frozen-sample gradient
equivalence  masked model vs extracted pruned model on random gates
"""

from __future__ import annotations

import logging
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from disp import tensor as T
from disp.errors import UsageError
from disp.gradcheck import gradcheck, numerical_grad, relative_error
from disp.hypernet import HyperNetwork
from disp.model import BlockGates, DenseModel, ModelSpec, block_forward_masked
from disp.pruner import equivalence_report, extract
from disp.reinmax import GateRNG, ReinMaxConfig, gate_open_probability, reinmax_forward, reinmax_surrogate
from disp.selection import GateVector, nnz_bound_exhaustive, nnz_bound_random
from disp.tensor import Tensor

logger = logging.getLogger(__name__)

SUITES = ("gradcheck", "prop1", "reinmax", "equivalence")

OP_TOLERANCE = 1e-6
GRAPH_TOLERANCE = 1e-5


class SuiteResult(BaseModel):
    suite: str
    passed: bool
    trials: int
    max_error: float = Field(description="Worst observed deviation for the suite's metric")
    threshold: float
    details: Dict[str, Any] = Field(default_factory=dict)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection <out, weights> so every output entry gets its own gradient weight."""
    return (out * Tensor(weights)).sum()


def _param(rng: np.random.Generator, *shape: int, low: Optional[float] = None, high: Optional[float] = None) -> Tensor:
    data = rng.uniform(low, high, shape) if low is not None else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------
OpCase = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], List[Tensor]]]


def _unary(fn: Callable[[Tensor], Tensor], low: Optional[float] = None, high: Optional[float] = None) -> OpCase:
    def case(rng):
        x = _param(rng, 3, 4, low=low, high=high)
        w = rng.standard_normal((3, 4))
        return (lambda: _weighted_sum(fn(x), w)), [x]

    return case


def _binary(fn: Callable[[Tensor, Tensor], Tensor], low: Optional[float] = None, high: Optional[float] = None) -> OpCase:
    def case(rng):
        a, b = _param(rng, 3, 4), _param(rng, 3, 4, low=low, high=high)
        w = rng.standard_normal((3, 4))
        return (lambda: _weighted_sum(fn(a, b), w)), [a, b]

    return case


def _matmul_case(rng):
    a, b = _param(rng, 4, 5), _param(rng, 5, 3)
    w = rng.standard_normal((4, 3))
    return (lambda: _weighted_sum(T.matmul(a, b), w)), [a, b]


def _rowvec_case(rng):
    x, row = _param(rng, 3, 4), _param(rng, 4)
    w = rng.standard_normal((3, 4))
    return (lambda: _weighted_sum(T.broadcast_mul_rowvec(x, row), w)), [x, row]


def _softmax_case(rng):
    x = _param(rng, 2, 5)
    w = rng.standard_normal((2, 5))
    return (lambda: _weighted_sum(T.softmax_lastdim(x), w)), [x]


def _layernorm_case(rng):
    x, gain, bias = _param(rng, 2, 3, 6), _param(rng, 6), _param(rng, 6)
    mask = (rng.random(6) < 0.6).astype(np.float64)
    mask[0] = 1.0
    w = rng.standard_normal((2, 3, 6))
    return (lambda: _weighted_sum(T.masked_layernorm(x, mask, gain, bias), w)), [x, gain, bias]


def _rmsnorm_case(rng):
    x, gain = _param(rng, 2, 3, 6), _param(rng, 6)
    mask = (rng.random(6) < 0.6).astype(np.float64)
    mask[0] = 1.0
    w = rng.standard_normal((2, 3, 6))
    return (lambda: _weighted_sum(T.masked_rmsnorm(x, mask, gain), w)), [x, gain]


def _index_case(rng):
    x, b = _param(rng, 2, 6), _param(rng, 2, 3)
    ind = np.sort(rng.choice(6, size=3, replace=False))
    w1, w2 = rng.standard_normal((2, 3)), rng.standard_normal((2, 6))
    return (
        lambda: _weighted_sum(T.index_select(x, ind), w1) + _weighted_sum(T.index_add(x, b, ind), w2)
    ), [x, b]


def _cross_entropy_case(rng):
    logits = _param(rng, 2, 3, 7)
    targets = rng.integers(0, 7, size=(2, 3))
    return (lambda: T.cross_entropy(logits, targets)), [logits]


OP_CASES: Dict[str, OpCase] = {
    "matmul": _matmul_case,
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(lambda a, b: a / b, low=0.5, high=2.0),
    "maximum": _binary(T.maximum),
    "minimum": _binary(T.minimum),
    "broadcast_mul_rowvec": _rowvec_case,
    "sigmoid": _unary(T.sigmoid),
    "tanh": _unary(T.tanh),
    "gelu": _unary(T.gelu),
    "silu": _unary(T.silu),
    "log": _unary(T.log, low=0.5, high=2.0),
    "exp": _unary(T.exp),
    "softmax": _softmax_case,
    "masked_layernorm": _layernorm_case,
    "masked_rmsnorm": _rmsnorm_case,
    "index_select_add": _index_case,
    "cross_entropy": _cross_entropy_case,
}


def _block_case(rng, spec: ModelSpec):
    model = DenseModel.init(spec, seed=int(rng.integers(1 << 31)))
    w = model.block(0)
    for t in (w.wq, w.wo, w.w1, w.w3):
        t.data = rng.standard_normal(t.shape) * 0.3
    inputs = [w.wq, w.wo, w.w1, w.w3, w.norm1_gain]
    for t in inputs:
        t.requires_grad = True
    x = _param(rng, 1, 3, spec.d)
    widths = [spec.d, spec.d, spec.d, spec.d_mid, spec.d]
    gates = BlockGates.from_vectors([GateVector((rng.random(n) < 0.7).astype(np.int8)) for n in widths])
    cotangent = rng.standard_normal((1, 3, spec.d))
    return (lambda: _weighted_sum(block_forward_masked(x, w, gates, spec), cotangent)), [x] + inputs


def _hypernet_case(rng, spec: ModelSpec):
    net = HyperNetwork(spec, mode="hypernet", seed=int(rng.integers(1 << 31)))
    for name, t in net.params.items():
        if name.startswith("heads."):
            t.data = rng.standard_normal(t.shape) * 0.1
    cotangents = [rng.standard_normal(spec.latent_width) for _ in range(spec.n_layers)]

    def fn():
        latents = net.forward()
        total = _weighted_sum(latents[0], cotangents[0])
        for latent, cotangent in zip(latents[1:], cotangents[1:]):
            total = total + _weighted_sum(latent, cotangent)
        return total

    inputs = [net.params[k] for k in ("gru.fwd.b_hh", "gru.bwd.b_ih", "post_norm.gain", "heads.1.bias")]
    return fn, inputs


def frozen_sample_error(rng: np.random.Generator, cfg: ReinMaxConfig, width: int = 16) -> float:
    """
    Analytic ReinMax gradient for a frozen sample B vs central differences.

    The reference holds every stop_gradient term at its value at x0:
    f(x) = 2 * sigmoid(K + x + c) - sigmoid(x + c) / 2,  K = ln(pi1(x0)) - (x0 + c).
    """
    x = _param(rng, width)
    bits = (rng.random(width) < 0.5).astype(np.float64)
    cotangent = rng.standard_normal(width)
    _weighted_sum(reinmax_surrogate(x, bits, cfg), cotangent).backward()
    analytic = x.grad.copy()

    xc0 = x.data + cfg.c
    pi1 = 0.5 * (bits + 0.5 * (1.0 + np.tanh(0.5 * xc0 / cfg.tau)))
    k = Tensor(np.log(pi1) - xc0)
    ref = Tensor(x.data.copy())

    def frozen():
        xc = ref + cfg.c
        return _weighted_sum(T.sigmoid(k + xc) * 2.0 - T.sigmoid(xc) * 0.5, cotangent)

    return relative_error(analytic, numerical_grad(frozen, ref))


def gradcheck_suite(instances: int = 20, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    per_op: Dict[str, float] = {}
    for name, case in OP_CASES.items():
        worst = 0.0
        for _ in range(instances):
            fn, inputs = case(rng)
            worst = max(worst, gradcheck(fn, inputs))
        per_op[name] = worst

    spec = ModelSpec(d=8, n_layers=2, n_heads=2, d_mid=16, max_seq_len=8)
    small = ModelSpec(d=4, n_layers=2, n_heads=2, d_mid=8)
    graphs: Dict[str, Callable[[], float]] = {
        "block": lambda: gradcheck(*_block_case(rng, spec)),
        "hypernet": lambda: gradcheck(*_hypernet_case(rng, small)),
        "reinmax": lambda: frozen_sample_error(rng, ReinMaxConfig(tau=float(rng.uniform(0.5, 2.0)))),
    }
    per_graph = {name: max(check() for _ in range(instances)) for name, check in graphs.items()}

    op_worst, graph_worst = max(per_op.values()), max(per_graph.values())
    passed = op_worst <= OP_TOLERANCE and graph_worst <= GRAPH_TOLERANCE
    return SuiteResult(
        suite="gradcheck",
        passed=passed,
        trials=instances * (len(per_op) + len(per_graph)),
        max_error=max(op_worst, graph_worst),
        threshold=OP_TOLERANCE,
        details={"ops": per_op, "graphs": per_graph, "graph_threshold": GRAPH_TOLERANCE},
    )


# ---------------------------------------------------------------------------
# prop1
# ---------------------------------------------------------------------------
def prop1_suite(random_trials: int = 10_000, seed: int = 0, random_dims: Sequence[int] = (4, 8, 16)) -> SuiteResult:
    exhaustive = nnz_bound_exhaustive(8)
    sampled = [nnz_bound_random(dim, random_trials, seed=seed) for dim in random_dims]
    reports = [exhaustive] + sampled
    return SuiteResult(
        suite="prop1",
        passed=all(r.passed for r in reports),
        trials=sum(r.trials for r in reports),
        max_error=float(max(r.max_violation for r in reports)),
        threshold=0.0,
        details={"exhaustive": exhaustive.model_dump(), "random": {f"d{r.dim}": r.model_dump() for r in sampled}},
    )


# ---------------------------------------------------------------------------
# reinmax
# ---------------------------------------------------------------------------
def reinmax_suite(samples: int = 1_000_000, seed: int = 0) -> SuiteResult:
    cfg = ReinMaxConfig(tau=1.0, c=3.0, rng_seed=seed)
    rng = np.random.default_rng(seed)

    x = Tensor(rng.standard_normal(samples) * 3.0, requires_grad=True)
    out = reinmax_forward(x, cfg, "sample", rng=GateRNG(seed))
    replay = reinmax_forward(x, cfg, "sample", rng=GateRNG(seed))
    non_binary = int(np.sum((out.data != 0.0) & (out.data != 1.0)))
    deterministic = bool(np.array_equal(out.data, replay.data))

    zeros = reinmax_forward(np.zeros(10_000), cfg, "sample", rng=GateRNG(seed, stream=1))
    expected = float(gate_open_probability(0.0, cfg).item())
    open_error = abs(float(zeros.data.mean()) - expected)

    grad_error = max(frozen_sample_error(rng, cfg) for _ in range(20))

    # the sampled estimator must route its gradient through the surrogate
    xs = Tensor(rng.standard_normal(32), requires_grad=True)
    u = rng.random(32)
    cotangent = rng.standard_normal(32)
    _weighted_sum(reinmax_forward(xs, cfg, "sample", uniforms=u), cotangent).backward()
    with T.no_grad():
        bits = (u < gate_open_probability(xs, cfg).data).astype(np.float64)
    xr = Tensor(xs.data.copy(), requires_grad=True)
    _weighted_sum(reinmax_surrogate(xr, bits, cfg), cotangent).backward()
    route_error = float(np.max(np.abs(xs.grad - xr.grad)))

    passed = (
        non_binary == 0
        and deterministic
        and open_error <= 0.01
        and grad_error <= OP_TOLERANCE
        and route_error <= 1e-12
    )
    return SuiteResult(
        suite="reinmax",
        passed=passed,
        trials=samples,
        max_error=grad_error,
        threshold=OP_TOLERANCE,
        details={
            "non_binary_values": non_binary,
            "replay_identical": deterministic,
            "open_rate": float(zeros.data.mean()),
            "expected_open_rate": expected,
            "estimator_route_error": route_error,
        },
    )


# ---------------------------------------------------------------------------
# equivalence
# ---------------------------------------------------------------------------
def random_gates(spec: ModelSpec, rng: np.random.Generator) -> List[BlockGates]:
    """Independent random gates per block with a random keep rate in [0.2, 0.9]."""
    widths = [spec.d, spec.d, spec.d, spec.d_mid, spec.d]
    out = []
    for _ in range(spec.n_layers):
        keep = rng.uniform(0.2, 0.9)
        out.append(BlockGates.from_vectors([GateVector((rng.random(n) < keep).astype(np.int8)) for n in widths]))
    return out


def equivalence_suite(
    configurations: int = 20, seed: int = 0, spec: Optional[ModelSpec] = None, seq_len: int = 16, tolerance: float = 1e-9
) -> SuiteResult:
    spec = spec or ModelSpec(d=64, n_layers=4, n_heads=4, d_mid=256)
    model = DenseModel.init(spec, seed=seed)
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, []
    for i in range(configurations):
        gates = random_gates(spec, rng)
        report = equivalence_report(
            model, extract(model, gates), gates, trials=1, seq_len=seq_len, seed=seed + i, tolerance=tolerance
        )
        worst = max(worst, report.max_abs_diff, *report.per_block_diffs)
        if not report.passed:
            failures.append({"configuration": i, "block": report.offending_block})
    return SuiteResult(
        suite="equivalence",
        passed=not failures,
        trials=configurations,
        max_error=worst,
        threshold=tolerance,
        details={"failures": failures, "d": spec.d, "n_layers": spec.n_layers},
    )


_RUNNERS: Dict[str, Callable[..., SuiteResult]] = {
    "gradcheck": lambda seed: gradcheck_suite(seed=seed),
    "prop1": lambda seed: prop1_suite(seed=seed),
    "reinmax": lambda seed: reinmax_suite(seed=seed),
    "equivalence": lambda seed: equivalence_suite(seed=seed),
}


def run_suites(names: Sequence[str], seed: int = 0) -> List[SuiteResult]:
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UsageError(f"Unknown suite(s) {unknown}; choose from {SUITES}")
    results = []
    for name in names:
        result = _RUNNERS[name](seed)
        logger.info("suite %s: %s (max error %.3e over %d trials)",
                    name, "pass" if result.passed else "FAIL", result.max_error, result.trials)
        results.append(result)
    return results
