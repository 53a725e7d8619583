import numpy as np
import pytest

from disp.errors import ContractViolation
from disp.selection import (
    GateVector,
    IndexSet,
    actual,
    compose_nnz_bound_check,
    gates_from_code,
    index_add,
    index_select,
    nnz_bound_exhaustive,
    nnz_bound_random,
    pseudo,
    slice_vector,
    slice_weight,
    to_index_set,
)


def test_to_index_set():
    assert list(to_index_set(GateVector([1, 0, 1]))) == [0, 2]
    assert list(to_index_set(GateVector.ones(4))) == [0, 1, 2, 3]
    assert len(to_index_set(GateVector.zeros(4))) == 0


def test_gate_bits_must_be_binary():
    with pytest.raises(ContractViolation):
        GateVector([0, 2, 1])


def test_index_set_must_be_ascending():
    with pytest.raises(ContractViolation):
        IndexSet(np.array([2, 1]), 4)
    with pytest.raises(ContractViolation):
        IndexSet(np.array([0, 4]), 4)


def test_index_select_and_add_with_index_sets():
    ind = IndexSet(np.array([0, 2]), 4)
    assert np.array_equal(index_select(np.array([[1.0, 2.0, 3.0, 4.0]]), ind).data, [[1.0, 3.0]])
    out = index_add(np.array([1.0, 2.0, 3.0, 4.0]), np.array([10.0, 20.0]), ind)
    assert np.array_equal(out.data, [11.0, 2.0, 23.0, 4.0])

    x = np.arange(4.0)
    full = to_index_set(GateVector.ones(4))
    assert np.array_equal(index_select(x, full).data, x)

    empty = to_index_set(GateVector.zeros(4))
    assert np.array_equal(index_add(x, np.zeros(0), empty).data, x)


def test_index_add_width_mismatch():
    ind = IndexSet(np.array([0, 2]), 4)
    with pytest.raises(ContractViolation):
        index_add(np.zeros(4), np.zeros(3), ind)
    with pytest.raises(ContractViolation):
        index_select(np.zeros(5), ind)


def test_compose_nnz_bound_examples():
    report = compose_nnz_bound_check(GateVector([1, 1, 0, 0]), GateVector([0, 1, 1, 0]))
    assert report.nnz_product == 1
    assert report.min_nnz == 2
    assert report.holds
    assert not report.equality_condition_holds

    identity = compose_nnz_bound_check(GateVector.ones(8), GateVector.ones(8))
    assert identity.nnz_product == identity.min_nnz == 8
    assert identity.equality_condition_holds

    with pytest.raises(ContractViolation):
        compose_nnz_bound_check(GateVector.ones(3), GateVector.ones(4))


def test_exhaustive_sweep_over_width_eight():
    report = nnz_bound_exhaustive(8)
    assert report.trials == 65_536
    assert report.violations == 0
    assert report.equality_mismatches == 0
    assert report.passed


@pytest.mark.parametrize("dim", [4, 8, 16])
def test_random_sweep(dim):
    report = nnz_bound_random(dim, 10_000, seed=3)
    assert report.trials == 10_000
    assert report.passed
    assert report.max_violation == 0


def test_sweep_agrees_with_single_pair_check():
    for a, b in [(0b1010, 0b0110), (0b1111, 0b0011), (0, 0b1001)]:
        single = compose_nnz_bound_check(gates_from_code(a, 4), gates_from_code(b, 4))
        assert single.holds
        assert single.equality_condition_holds == (single.nnz_product == single.min_nnz)


def test_selection_matrices():
    gate = GateVector([1, 0, 1, 1])
    S, S_hat = pseudo(gate).dense(), actual(gate).dense()
    assert S_hat.shape == (4, 3)
    assert np.array_equal(S_hat @ S_hat.T, S)
    assert np.array_equal(S_hat.T @ S_hat, np.eye(3))

    other = pseudo(GateVector([1, 1, 0, 1]))
    assert np.array_equal(pseudo(gate).compose(other).gate.bits, [1, 0, 0, 1])
    with pytest.raises(ContractViolation):
        actual(gate).compose(other)


def test_slice_weight():
    w = np.arange(9.0).reshape(3, 3)
    rows = slice_weight(w, row_gate=GateVector([1, 0, 1])).data
    assert np.array_equal(rows, w[[0, 2]])
    assert np.array_equal(slice_weight(w, GateVector.ones(3), GateVector.ones(3)).data, w)
    both = slice_weight(w, GateVector([0, 1, 1]), GateVector([1, 0, 0])).data
    assert np.array_equal(both, [[3.0], [6.0]])
    with pytest.raises(ContractViolation):
        slice_weight(w, col_gate=GateVector.ones(4))


def test_slice_matches_selection_matrix_product():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((5, 4))
    rg, cg = GateVector([1, 0, 1, 1, 0]), GateVector([0, 1, 1, 0])
    expected = actual(rg).dense().T @ w @ actual(cg).dense()
    assert np.array_equal(slice_weight(w, rg, cg).data, expected)


def test_slice_vector():
    assert np.array_equal(slice_vector(np.array([1.0, 2.0, 3.0]), GateVector([0, 1, 1])).data, [2.0, 3.0])


def test_index_set_payload():
    ind = IndexSet(np.array([1, 3, 4]), 6)
    assert IndexSet.deserialize(ind.serialize(), 6) == ind
    with pytest.raises(ContractViolation):
        IndexSet.deserialize(np.array([5, 1, 2]), 6)
