import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from weightlora.adapters import AdapterState, adapter_param_count
from weightlora.errors import ContractError, DegeneracyError, StateError
from weightlora.sparsifier import (GateVector, freeze_and_disconnect, gate_step,
                                   gate_step_on_support, hard_threshold_topk, l0,
                                   random_select_rlora, rlora_gates)
from weightlora.tensor import Tensor

from oracles import best_sparse_projection, topk_by_sort


def gates_from(values, K):
    return GateVector(Tensor(np.asarray(values, dtype=float), requires_grad=True), K)


def adapters(n):
    rng = np.random.default_rng(0)
    return [AdapterState.init(i, 4, 4, 1, rng=rng) for i in range(n)]


# -- hard thresholding -----------------------------------------------------------------
def test_topk_examples():
    assert hard_threshold_topk([3.0, -5.0, 1.0], 1).tolist() == [0.0, -5.0, 0.0]
    assert hard_threshold_topk([2.0, 2.0, 2.0], 2).tolist() == [2.0, 2.0, 0.0]


def test_topk_matches_sort_oracle():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 12))
        v = rng.standard_normal(n) if rng.random() < 0.7 else rng.integers(-3, 4, n).astype(float)
        K = int(rng.integers(1, n + 1))
        assert np.array_equal(hard_threshold_topk(v, K), topk_by_sort(v.tolist(), K))


@pytest.mark.parametrize("K", [0, 4])
def test_topk_rejects_bad_k(K):
    with pytest.raises(ContractError):
        hard_threshold_topk([1.0, 2.0, 3.0], K)


def test_topk_accepts_tensor_and_returns_new_array():
    t = Tensor([1.0, -4.0, 2.0])
    out = hard_threshold_topk(t, 1)
    assert out.tolist() == [0.0, -4.0, 0.0] and t.data.tolist() == [1.0, -4.0, 2.0]


vectors = st.integers(1, 8).flatmap(
    lambda n: st.tuples(arrays(np.float64, n, elements=st.floats(-100, 100, allow_nan=False)),
                        st.integers(1, n)))


@settings(max_examples=150, deadline=None)
@given(vectors)
def test_topk_is_a_euclidean_projection(case):
    v, K = case
    out = hard_threshold_topk(v, K)
    assert l0(out) <= K
    assert float(np.sum((v - out) ** 2)) == pytest.approx(best_sparse_projection(v, K),
                                                           rel=1e-12, abs=1e-12)


@settings(max_examples=150, deadline=None)
@given(vectors, st.floats(1e-3, 1e3))
def test_topk_idempotent_and_support_scale_invariant(case, c):
    v, K = case
    once = hard_threshold_topk(v, K)
    assert np.array_equal(hard_threshold_topk(once, K), once)
    scaled = hard_threshold_topk(c * v, K)
    # rescaling may merge or split exact magnitude ties only through rounding; compare supports
    if len(set(np.abs(v))) == len(v):
        assert np.array_equal(scaled != 0, once != 0)


# -- gate steps ----------------------------------------------------------------------------
def test_gate_step_zero_gradient_is_a_fixed_point():
    g = gates_from([0.0, 1.3, 0.0, -0.2], K=2)
    gate_step(g, np.zeros(4), lr=0.5)
    assert g.values.tolist() == [0.0, 1.3, 0.0, -0.2]


def test_gate_step_hand_example():
    g = gates_from([1.0, 1.0], K=1)
    gate_step(g, np.array([0.0, 10.0]), lr=0.1)
    assert g.values.tolist() == [1.0, 0.0]


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(0, 10))
def test_gate_step_is_always_feasible(case, lr):
    v, K = case
    g = gates_from(np.ones_like(v), K)
    gate_step(g, v, lr)
    assert l0(g.values) <= K


def test_gate_step_refuses_frozen_gates_and_bad_shapes():
    g = gates_from([1.0, 0.0], K=1)
    with pytest.raises(ContractError):
        gate_step(g, np.zeros(3), 0.1)
    freeze_and_disconnect(g, adapters(2))
    with pytest.raises(StateError):
        gate_step(g, np.zeros(2), 0.1)


def test_unprojected_step_defers_projection():
    g = gates_from([1.0, 1.0, 1.0], K=1)
    gate_step(g, np.array([0.1, 0.2, 0.3]), 1.0, project=False)
    assert l0(g.values) == 3
    g.project()
    assert g.support() == (0,)


# -- freeze ----------------------------------------------------------------------------------
def test_freeze_example():
    g = gates_from([0.0, 0.9, 0.0], K=1)
    ads = adapters(3)
    assert freeze_and_disconnect(g, ads) == (1,)
    assert [a.active for a in ads] == [False, True, False]
    assert g.frozen and not g.omega.requires_grad
    assert not ads[0].A.requires_grad and ads[1].A.requires_grad


def test_freeze_drops_parameter_count_to_active_set():
    g = gates_from([0.0, 0.4, -1.2, 0.0], K=2)
    ads = [AdapterState.init(i, 6, 3 + i, 2, rng=np.random.default_rng(i)) for i in range(4)]
    freeze_and_disconnect(g, ads)
    assert sum(adapter_param_count(a) for a in ads) == 2 * (6 + 4) + 2 * (6 + 5)


def test_all_zero_gates_are_degenerate():
    g = gates_from([0.0, 0.0], K=1)
    with pytest.raises(DegeneracyError):
        freeze_and_disconnect(g, adapters(2))
    assert g.frozen and g.active_set == ()


def test_double_freeze_is_a_state_error():
    g = gates_from([1.0, 0.0], K=1)
    freeze_and_disconnect(g, adapters(2))
    with pytest.raises(StateError):
        freeze_and_disconnect(g, adapters(2))


def test_support_steps_keep_the_zero_pattern():
    g = gates_from([0.0, 0.5, 0.0, 2.0], K=2)
    freeze_and_disconnect(g, adapters(4))
    rng = np.random.default_rng(2)
    for _ in range(50):
        gate_step_on_support(g, rng.standard_normal(4), 0.3)
        assert g.support() == (1, 3)
    g.omega.data[1] = 0.25
    gate_step_on_support(g, np.array([0.0, 1.0, 0.0, 0.0]), 0.25)  # would land on 0
    assert g.support() == (1, 3)


def test_gates_only_close_after_freezing():
    g = gates_from([0.0, 1.0], K=1)
    assert g.is_open(0)
    freeze_and_disconnect(g, adapters(2))
    assert not g.is_open(0) and g.is_open(1)


# -- random selection ----------------------------------------------------------------------
def test_rlora_full_set_and_determinism():
    assert random_select_rlora(5, 5, seed=123) == (0, 1, 2, 3, 4)
    assert random_select_rlora(10, 3, seed=7) == random_select_rlora(10, 3, seed=7)


def test_rlora_selection_frequencies_are_uniform():
    counts = np.zeros(10)
    rng = np.random.default_rng(3)
    for _ in range(10_000):
        counts[list(random_select_rlora(10, 3, seed=rng.integers(2**63)))] += 1
    assert np.all(np.abs(counts / 10_000 - 0.3) <= 0.015)


def test_rlora_gates_are_frozen_ones_on_the_subset():
    g = rlora_gates(6, 2, seed=4)
    assert g.frozen and set(g.support()) == set(g.active_set)
    assert sorted(g.values[list(g.active_set)]) == [1.0, 1.0] and l0(g.values) == 2


def test_rlora_rejects_bad_k():
    with pytest.raises(ContractError):
        random_select_rlora(4, 5, seed=0)
