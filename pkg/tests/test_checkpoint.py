import numpy as np
import pytest

from disp.budget import PruneBudget
from disp.checkpoint import (
    SearchState,
    file_sha256,
    load_checkpoint,
    load_dense,
    load_pruned,
    load_search_state,
    save_checkpoint,
    save_dense,
    save_pruned,
    save_search_state,
)
from disp.data import BatchSource, Corpus
from disp.errors import ContractViolation, UsageError
from disp.hypernet import HyperNetwork
from disp.model import BlockGates, DenseModel, ModelSpec
from disp.pruner import extract, pruned_model_forward
from disp.reinmax import GateRNG, ReinMaxConfig
from disp.selection import GateVector
from disp.trainer import TrainConfig, freeze_check, search
from disp.verify import random_gates


def test_raw_checkpoint_round_trip(tmp_path):
    tensors = {
        "a": np.arange(6.0).reshape(2, 3),
        "b": np.array([1, 2, 3], dtype=np.int64),
        "empty": np.zeros((4, 0)),
        "scalar": np.array(2.5),
    }
    path = save_checkpoint(tmp_path / "x.ckpt", tensors, {"kind": "raw", "note": [1, 2]})
    loaded, meta = load_checkpoint(path)
    assert meta == {"kind": "raw", "note": [1, 2]}
    for k, v in tensors.items():
        assert loaded[k].dtype == v.dtype
        assert loaded[k].shape == v.shape
        assert np.array_equal(loaded[k], v)


def test_identical_content_gives_identical_files(tmp_path):
    tensors = {"w": np.linspace(0, 1, 10)}
    a = save_checkpoint(tmp_path / "a.ckpt", tensors, {"kind": "raw"})
    b = save_checkpoint(tmp_path / "b.ckpt", tensors, {"kind": "raw"})
    assert file_sha256(a) == file_sha256(b)


def test_bad_files(tmp_path):
    with pytest.raises(UsageError):
        load_checkpoint(tmp_path / "missing.ckpt")
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"NOTACKPT\n12\n")
    with pytest.raises(ContractViolation):
        load_checkpoint(junk)

    good = save_checkpoint(tmp_path / "t.ckpt", {"w": np.ones(100)}, {"kind": "raw"})
    truncated = tmp_path / "truncated.ckpt"
    truncated.write_bytes(good.read_bytes()[:-40])
    with pytest.raises(ContractViolation):
        load_checkpoint(truncated)


def test_dense_round_trip_is_bit_exact(tmp_path, tiny_model):
    path = save_dense(tmp_path / "dense.ckpt", tiny_model, seed=0)
    loaded = load_dense(path)
    assert loaded.spec == tiny_model.spec
    assert freeze_check(tiny_model, loaded)
    assert all(not t.requires_grad for t in loaded.parameters())


def test_kind_is_checked(tmp_path, tiny_model):
    path = save_dense(tmp_path / "dense.ckpt", tiny_model)
    with pytest.raises(UsageError):
        load_pruned(path)


def test_pruned_round_trip(tmp_path, tiny_model, tiny_spec):
    gates = random_gates(tiny_spec, np.random.default_rng(0))
    pruned = extract(tiny_model, gates)
    loaded = load_pruned(save_pruned(tmp_path / "pruned.ckpt", pruned))
    assert loaded.param_count() == pruned.param_count()
    for a, b in zip(pruned.blocks, loaded.blocks):
        assert a.index_sets == b.index_sets
    tokens = np.random.default_rng(1).integers(0, 257, size=(1, 8))
    assert np.array_equal(pruned_model_forward(pruned, tokens).data, pruned_model_forward(loaded, tokens).data)


def test_pruned_block_with_empty_gates_survives(tmp_path):
    spec = ModelSpec(d=8, n_layers=1, n_heads=2, d_mid=8, max_seq_len=8)
    model = DenseModel.init(spec, seed=0)
    gates = BlockGates.from_vectors([GateVector.ones(8), GateVector.zeros(8), GateVector.ones(8),
                                     GateVector.zeros(8), GateVector.ones(8)])
    pruned = extract(model, [gates])
    loaded = load_pruned(save_pruned(tmp_path / "p.ckpt", pruned))
    assert loaded.blocks[0].weights.wo.shape == (8, 0)
    assert loaded.blocks[0].weights.w1.shape == (8, 0)
    assert len(loaded.blocks[0].index_sets[1]) == 0


def test_search_state_round_trip(tmp_path, tiny_spec):
    rng = np.random.default_rng(2)
    net = HyperNetwork(tiny_spec, mode="no-gru", seed=3)
    for t in net.parameters():
        t.data = rng.standard_normal(t.shape)
    state = SearchState(net, "no-gru", GateRNG(4, stream=1, step=17), ReinMaxConfig(tau=0.7),
                        PruneBudget.for_spec(tiny_spec, p=0.4, lambda_=8.0))
    loaded = load_search_state(save_search_state(tmp_path / "search.ckpt", state))
    assert loaded.search_mode == "no-gru"
    assert loaded.rng.state() == {"seed": 4, "stream": 1, "step": 17}
    assert loaded.reinmax.tau == 0.7
    assert loaded.budget == state.budget
    for a, b in zip(net.forward(), loaded.net.forward()):
        assert np.array_equal(a.data, b.data)


def test_search_resumes_from_checkpoint(tmp_path, tiny_model, tiny_spec, text_bytes):
    budget = PruneBudget.for_spec(tiny_spec, p=0.5)
    cfg, rm = TrainConfig(iterations=3, seq_len=16, mode="no-gru"), ReinMaxConfig()

    def source():
        return BatchSource(Corpus(text_bytes).split("train"), 16, seed=0)

    full, _ = search(tiny_model, source(), budget, cfg.model_copy(update={"iterations": 6}), rm)
    half, log = search(tiny_model, source(), budget, cfg, rm)
    state = SearchState(half, "no-gru", GateRNG.from_state(log.rng_state), rm, budget,
                        optimizer_state=log.optimizer_state, data_position=log.data_position,
                        iteration=log.last_iteration)
    loaded = load_search_state(save_search_state(tmp_path / "search.ckpt", state))
    assert (loaded.iteration, loaded.data_position) == (3, 3)
    assert int(loaded.optimizer_state["optim.t"][0]) == 3

    data = source()
    data.seek(loaded.data_position)
    resumed, _ = search(tiny_model, data, budget, cfg, rm, net=loaded.net, rng=loaded.rng,
                        optimizer_state=loaded.optimizer_state, start_iteration=loaded.iteration)
    for name, t in full.params.items():
        assert np.array_equal(t.data, resumed.params[name].data), name
