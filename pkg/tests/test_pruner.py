import numpy as np
import pytest

from disp import tensor as T
from disp.budget import PruneBudget, count_params_exact, total_params
from disp.errors import ContractViolation
from disp.hypernet import HyperNetwork
from disp.model import BlockGates, DenseModel, ModelSpec, block_forward_masked, embed, model_forward, ones_gates
from disp.pruner import (
    binarize,
    equivalence_report,
    extract,
    finalize_gates,
    gate_probabilities,
    pruned_block_forward,
    pruned_model_forward,
)
from disp.reinmax import ReinMaxConfig
from disp.selection import GateVector
from disp.verify import random_gates


def _tokens(spec, n=8, seed=0):
    return np.random.default_rng(seed).integers(0, spec.vocab_size, size=(2, n))


def test_all_ones_extraction_is_the_dense_model(tiny_model, tiny_spec):
    pruned = extract(tiny_model, ones_gates(tiny_spec))
    for i, block in enumerate(pruned.blocks):
        for key, t in block.weights.tensors().items():
            assert np.array_equal(t.data, tiny_model.params[f"blocks.{i}.{key}"].data)
    assert pruned.param_count() == total_params(tiny_spec)
    tokens = _tokens(tiny_spec)
    with T.no_grad():
        dense = model_forward(tiny_model, tokens).data
        sliced = pruned_model_forward(pruned, tokens).data
    assert np.max(np.abs(dense - sliced)) <= 1e-12


def test_sliced_shapes():
    spec = ModelSpec(d=8, n_layers=1, n_heads=2, d_mid=16, max_seq_len=8)
    model = DenseModel.init(spec, seed=0)
    s1 = GateVector([1, 1, 1, 0, 0, 0, 0, 0])
    gates = BlockGates.from_vectors([s1, GateVector.ones(8), GateVector.ones(8), GateVector.ones(16),
                                     GateVector.ones(8)])
    block = extract(model, [gates]).blocks[0]
    assert block.weights.wq.shape == (3, 8)
    assert block.weights.norm1_gain.shape == (3,)
    assert block.widths == [3, 8, 8, 16, 8]


def test_parameter_count_matches_formula(tiny_model, tiny_spec):
    rng = np.random.default_rng(1)
    for _ in range(100):
        gates = random_gates(tiny_spec, rng)
        pruned = extract(tiny_model, gates)
        assert pruned.param_count() == count_params_exact([g.vectors() for g in gates], tiny_spec)


def test_pruned_blocks_match_masked_blocks(tiny_model, tiny_spec):
    rng = np.random.default_rng(2)
    x = embed(tiny_model, _tokens(tiny_spec))
    for _ in range(10):
        gates = random_gates(tiny_spec, rng)
        pruned = extract(tiny_model, gates)
        for i in range(tiny_spec.n_layers):
            a = block_forward_masked(x, tiny_model.block(i), gates[i], tiny_spec).data
            b = pruned_block_forward(x, pruned.blocks[i], tiny_spec).data
            assert np.max(np.abs(a - b)) <= 1e-9


def test_empty_write_sets_are_residual_passthrough(tiny_model, tiny_spec):
    d, m = tiny_spec.d, tiny_spec.d_mid
    gates = BlockGates.from_vectors([GateVector.ones(d), GateVector.zeros(d), GateVector.ones(d),
                                     GateVector.ones(m), GateVector.zeros(d)])
    block = extract(tiny_model, [gates, BlockGates.ones(tiny_spec)]).blocks[0]
    x = embed(tiny_model, _tokens(tiny_spec))
    assert np.array_equal(pruned_block_forward(x, block, tiny_spec).data, x.data)


@pytest.mark.parametrize("mlp_kind,norm_kind", [("standard", "layernorm"), ("gated", "rmsnorm")])
def test_equivalence_for_variants(mlp_kind, norm_kind):
    spec = ModelSpec(d=16, n_layers=2, n_heads=4, d_mid=32, max_seq_len=16, mlp_kind=mlp_kind, norm_kind=norm_kind)
    model = DenseModel.init(spec, seed=3)
    gates = random_gates(spec, np.random.default_rng(3))
    report = equivalence_report(model, extract(model, gates), gates, trials=3)
    assert report.passed
    assert report.offending_block is None


def test_equivalence_names_the_broken_block(tiny_model, tiny_spec):
    gates = ones_gates(tiny_spec)
    pruned = extract(tiny_model, gates)
    pruned.blocks[1].weights.w3.data = pruned.blocks[1].weights.w3.data + 0.5
    report = equivalence_report(tiny_model, pruned, gates, trials=2)
    assert not report.passed
    assert report.offending_block == 1


def test_extract_validates_gates(tiny_model, tiny_spec):
    with pytest.raises(ContractViolation):
        extract(tiny_model, ones_gates(tiny_spec)[:1])


def test_finalize_thresholds_at_one_half(tiny_spec):
    cfg = ReinMaxConfig()
    net = HyperNetwork(tiny_spec, mode="elementwise", seed=0)
    assert all(np.all(t.data == 1.0) for g in finalize_gates(net, cfg) for t in g.tensors())

    net.params["latents.0"].data[0] = -10.0
    net.params["latents.0"].data[1] = -3.0
    s1 = finalize_gates(net, cfg)[0].s1.data
    assert s1[0] == 0.0
    assert s1[1] == 1.0
    assert gate_probabilities(net, cfg)[0]["s1"][1] == 0.5


def test_tied_finalization(tiny_spec):
    net = HyperNetwork(tiny_spec, mode="elementwise", seed=0)
    net.params["latents.1"].data[:] = np.random.default_rng(0).standard_normal(tiny_spec.latent_width) * 4
    gates = finalize_gates(net, ReinMaxConfig(), tied=True)
    assert all(g.is_tied() for g in gates)


def test_enforced_budget_lands_on_target():
    spec = ModelSpec(d=32, n_layers=2, n_heads=2, d_mid=64, max_seq_len=8)
    rng = np.random.default_rng(5)
    for p in (0.3, 0.5, 0.7):
        budget = PruneBudget.for_spec(spec, p=p)
        probs = [{k: rng.random(n) for k, n in zip(("s1", "s2", "s3", "s4", "s5"), (32, 32, 32, 64, 32))}
                 for _ in range(spec.n_layers)]
        gates = binarize(probs, spec, enforce_budget=True, budget=budget)
        achieved = count_params_exact([g.vectors() for g in gates], spec) / budget.t_total
        assert abs(achieved - p) <= 0.005


def test_enforced_budget_needs_a_budget(tiny_spec):
    probs = [{k: np.full(n, 0.9) for k, n in zip(("s1", "s2", "s3", "s4", "s5"), (16, 16, 16, 32, 16))}] * 2
    with pytest.raises(ContractViolation):
        binarize(probs, tiny_spec, enforce_budget=True)


def test_recovered_gates_round_trip(tiny_model, tiny_spec):
    gates = random_gates(tiny_spec, np.random.default_rng(6))
    recovered = extract(tiny_model, gates).gates()
    for a, b in zip(gates, recovered):
        assert a.vectors() == b.vectors()
