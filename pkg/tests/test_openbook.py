"""Dataset encoder folds, auxiliary bank construction, cross-attention
invariants, gating, and attention-mass extraction."""

import numpy as np
import pytest

from narob.autodiff import Tensor
from narob.openbook import (AttentionRecord, AuxiliaryBank, build_bank,
                            encode_auxiliary, extract_attention, gate_combine,
                            openbook_attend, raw_node_states, raw_state_width)
from narob.tasks import TASKS, build_dataset

from conftest import bank_triples, permute_instance, small_params


# ---------------------------------------------------------------------------
# raw state folds


@pytest.mark.parametrize("task_id", sorted(TASKS))
def test_raw_state_width_matches_fold(task_id):
    task = TASKS[task_id]
    inst = build_dataset(task, 1, 5, seed=1).instances[0]
    for p in range(inst.num_steps + 1):
        raw = raw_node_states(task, inst, p)
        assert raw.shape == (5, raw_state_width(task))


def test_raw_state_zero_step_uses_initial_hints():
    task = TASKS["bfs"]
    inst = build_dataset(task, 1, 5, seed=2).instances[0]
    raw0 = raw_node_states(task, inst, 0)
    raw1 = raw_node_states(task, inst, 1)
    # visited column: all zero before the algorithm starts, source-only after
    names = []
    for f in task.features:
        names.extend([f.name] * (2 if f.kind == "pointer" else 1))
    vis = names.index("visited")
    assert np.all(raw0[:, vis] == 0.0)
    assert raw1[:, vis].sum() == 1.0


def test_raw_state_fold_is_permutation_equivariant():
    task = TASKS["dijkstra"]
    inst = build_dataset(task, 1, 6, seed=3).instances[0]
    perm = np.random.default_rng(0).permutation(6)
    pinst = permute_instance(inst, perm)
    for p in range(inst.num_steps + 1):
        a = raw_node_states(task, inst, p)
        b = raw_node_states(task, pinst, p)
        assert np.max(np.abs(b[perm] - a)) < 1e-12


# ---------------------------------------------------------------------------
# dataset encoder and bank


def test_encode_auxiliary_deterministic():
    params = small_params("bfs", hidden=8)
    inst = build_dataset(TASKS["bfs"], 1, 5, seed=4).instances[0]
    a = encode_auxiliary(inst, params, np.random.default_rng(9)).data
    b = encode_auxiliary(inst, params, np.random.default_rng(9)).data
    assert np.array_equal(a, b)
    assert a.shape == (8,)


def test_encode_auxiliary_invariant_under_relabeling():
    params = small_params("insertion_sort", hidden=8)
    inst = build_dataset(TASKS["insertion_sort"], 1, 6, seed=5).instances[0]
    perm = np.random.default_rng(1).permutation(6)
    pinst = permute_instance(inst, perm)
    a = encode_auxiliary(inst, params, np.random.default_rng(3)).data
    b = encode_auxiliary(pinst, params, np.random.default_rng(3)).data
    assert np.max(np.abs(a - b)) < 1e-12


def test_build_bank_order_and_size():
    params = small_params("bfs", hidden=8, aux_task_ids=["bfs", "minimum"])
    bfs = build_dataset(TASKS["bfs"], 3, 5, seed=6)
    mins = build_dataset(TASKS["minimum"], 2, 5, seed=7)
    triples = bank_triples(bfs) + bank_triples(mins)
    bank = build_bank(triples, params, np.random.default_rng(0))
    assert bank.size == 5
    assert bank.reps.data.shape == (5, 8)
    assert bank.source_tasks == ["bfs"] * 3 + ["minimum"] * 2
    assert bank.source_indices == [0, 1, 2, 0, 1]


def test_build_bank_matches_single_instance_encoder():
    """Single-step instances pin the sampled pair, so batched bank rows must
    equal one-at-a-time encodings."""
    params = small_params("bfs", hidden=8)
    inst = build_dataset(TASKS["bfs"], 1, 1, seed=8).instances[0]
    assert inst.num_steps == 1
    bank = build_bank([("bfs", 0, inst)] * 3, params, np.random.default_rng(0))
    solo = encode_auxiliary(inst, params, np.random.default_rng(0)).data
    for row in bank.reps.data:
        assert np.max(np.abs(row - solo)) < 1e-12


def test_build_bank_rejects_empty():
    params = small_params("bfs", hidden=8)
    with pytest.raises(ValueError):
        build_bank([], params, np.random.default_rng(0))


def test_encode_auxiliary_rejects_stepless_instance():
    params = small_params("bfs", hidden=8)
    inst = build_dataset(TASKS["bfs"], 1, 4, seed=9).instances[0]
    inst.hints = {k: v[:0] for k, v in inst.hints.items()}
    with pytest.raises(ValueError):
        encode_auxiliary(inst, params, np.random.default_rng(0))


# ---------------------------------------------------------------------------
# attention


def _attend_setup(hidden=8, ell=4, n=5, seed=0):
    params = small_params("bfs", hidden=hidden)
    rng = np.random.default_rng(seed)
    h = Tensor(rng.normal(size=(n, hidden)))
    bank = AuxiliaryBank(reps=Tensor(rng.normal(size=(ell, hidden))),
                         source_tasks=["bfs"] * ell,
                         source_indices=list(range(ell)))
    return params, h, bank


def test_attention_rows_sum_to_one():
    params, h, bank = _attend_setup()
    _, rec = openbook_attend(h, bank, params)
    assert rec.weights.shape == (5, 9)
    assert np.allclose(rec.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(rec.weights > 0)


def test_zero_query_gives_uniform_attention():
    params, h, bank = _attend_setup()
    params["openbook/q/w"].data[:] = 0.0
    params["openbook/q/b"].data[:] = 0.0
    _, rec = openbook_attend(h, bank, params)
    assert np.allclose(rec.weights, 1.0 / 9.0, atol=1e-12)


def test_zero_values_give_zero_attended():
    params, h, bank = _attend_setup()
    params["openbook/v/w"].data[:] = 0.0
    params["openbook/v/b"].data[:] = 0.0
    attended, _ = openbook_attend(h, bank, params)
    assert np.allclose(attended.data, 0.0)


def test_duplicate_bank_rows_share_mass():
    params, h, bank = _attend_setup()
    bank.reps.data[1] = bank.reps.data[0]  # rows 0 and 1 identical
    _, rec = openbook_attend(h, bank, params)
    assert np.allclose(rec.weights[:, 0], rec.weights[:, 1], atol=1e-12)


# ---------------------------------------------------------------------------
# gate


def test_gate_extremes_select_inputs():
    params, h, bank = _attend_setup()
    attended, _ = openbook_attend(h, bank, params)
    params["openbook/gate/w"].data[:] = 0.0
    params["openbook/gate/b"].data[:] = 50.0  # sigmoid ~= 1
    out = gate_combine(h, attended, params)
    assert np.allclose(out.data, attended.data, atol=1e-12)
    params["openbook/gate/b"].data[:] = -50.0  # sigmoid ~= 0
    out = gate_combine(h, attended, params)
    assert np.allclose(out.data, h.data, atol=1e-12)


def test_gate_output_is_channelwise_convex_blend():
    params, h, bank = _attend_setup(seed=3)
    attended, _ = openbook_attend(h, bank, params)
    out = gate_combine(h, attended, params).data
    lo = np.minimum(h.data, attended.data)
    hi = np.maximum(h.data, attended.data)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


# ---------------------------------------------------------------------------
# attention-mass extraction


def test_extract_attention_groups_by_source_and_skips_self_rows():
    w = np.array([[0.1, 0.2, 0.3, 0.4],
                  [0.25, 0.25, 0.25, 0.25]])
    rec = AttentionRecord(weights=w, bank_size=3,
                          source_tasks=["bfs", "minimum", "bfs"])
    mass = extract_attention(rec)
    assert set(mass) == {"bfs", "minimum"}
    assert np.isclose(mass["bfs"], 0.1 + 0.3 + 0.25 + 0.25)
    assert np.isclose(mass["minimum"], 0.2 + 0.25)
    # the final (self) column contributes nothing
    assert not np.isclose(sum(mass.values()), w.sum())
