"""Auxiliary-instance memory: dataset encoder, bank, cross-attention, gate.

A full training instance (inputs, execution states, outputs) is folded into a
fixed per-node raw vector, mapped through a per-task adapter to the shared
hidden width, encoded by a shared linear layer, and mean-pooled into one
representation per instance. At each reasoning step the current node states
cross-attend (single head, scaled QKV) over the bank rows plus projections of
themselves, and a channel-wise sigmoid gate blends the attended values back
into the hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tasks import TASKS


@dataclass
class AuxiliaryBank:
    reps: object          # Tensor [l, d]
    source_tasks: list    # task_id per row
    source_indices: list  # instance index per row

    @property
    def size(self):
        return len(self.source_tasks)


@dataclass
class AttentionRecord:
    """Softmax weights of one reasoning step: rows are target nodes, columns
    are the l bank rows followed by the n projected self rows."""
    weights: np.ndarray   # [n, l + n]
    bank_size: int
    source_tasks: list


def raw_state_width(task) -> int:
    w = 0
    for f in task.features:
        if f.location == "node":
            if f.kind == "pointer":
                w += 2  # self-pointer indicator + normalized pointer in-degree
            elif f.kind == "categorical":
                w += f.num_classes
            else:
                w += 1
        else:  # edge and graph features fold to one channel each
            w += 1
    return w


def _hints_at(task, instance, p):
    if p == 0:
        return task.initial_hints(instance.graph, instance.inputs)
    return {f.name: instance.hints[f.name][p - 1] for f in task.stage_features("hint")}


def raw_node_states(task, instance, p) -> np.ndarray:
    """Per-node raw vector of state p (0 = pre-algorithm): node-located input,
    hint and output values, row means of edge features, broadcast graph
    features. Pointer features fold to equivariant channels so mean pooling is
    relabeling-invariant."""
    n = instance.graph.n
    hints = _hints_at(task, instance, p)
    cols = []
    for f in task.features:
        val = {"input": instance.inputs, "hint": hints, "output": instance.outputs}[f.stage]
        val = val[f.name]
        if f.location == "node":
            if f.kind == "pointer":
                ptr = np.asarray(val, dtype=np.int64)
                indeg = np.bincount(ptr, minlength=n).astype(np.float64)
                cols.append((ptr == np.arange(n)).astype(np.float64).reshape(n, 1))
                cols.append((indeg / n).reshape(n, 1))
            elif f.kind == "categorical":
                cols.append(np.eye(f.num_classes)[np.asarray(val, dtype=np.int64)])
            else:
                cols.append(np.asarray(val, dtype=np.float64).reshape(n, 1))
        elif f.location == "edge":
            cols.append(np.asarray(val, dtype=np.float64).mean(axis=1).reshape(n, 1))
        else:
            cols.append(np.full((n, 1), float(val)))
    return np.concatenate(cols, axis=1)


def _raw_cached(task, instance, p):
    cache = getattr(instance, "_raw_cache", None)
    if cache is None:
        cache = {}
        instance._raw_cache = cache
    if p not in cache:
        cache[p] = raw_node_states(task, instance, p)
    return cache[p]


def _sample_pair(task, instance, rng):
    t = instance.num_steps
    p = int(rng.integers(t))  # adjacent states y^(p), y^(p+1), 0 <= p < T
    return 0.5 * (_raw_cached(task, instance, p) + _raw_cached(task, instance, p + 1))


def encode_auxiliary(instance, params, rng, task=None):
    """Single-instance dataset encoding: adapter -> shared layer -> node mean."""
    task = task or TASKS[instance.task_id]
    if instance.num_steps < 1:
        raise ValueError("instance has no execution steps")
    avg = _sample_pair(task, instance, rng)
    z = ad.linear(avg, params[f"task_adapters/{task.task_id}/w"],
                  params[f"task_adapters/{task.task_id}/b"])
    z = ad.linear(z, params["dataset_encoder/shared/w"], params["dataset_encoder/shared/b"])
    return ad.reduce_mean(z, axis=0)


def build_bank(instances, params, rng) -> AuxiliaryBank:
    """Encode auxiliary instances into a bank, order-preserving. `instances`
    is a list of (task_id, index, TraceInstance); contiguous same-task runs
    are batched through their adapter."""
    if not instances:
        raise ValueError("auxiliary bank needs at least one instance")
    avgs, sizes, tasks_seq, indices = [], [], [], []
    for task_id, idx, inst in instances:
        avgs.append(_sample_pair(TASKS[task_id], inst, rng))
        sizes.append(inst.graph.n)
        tasks_seq.append(task_id)
        indices.append(idx)

    parts = []
    i = 0
    while i < len(instances):
        j = i
        while j < len(instances) and tasks_seq[j] == tasks_seq[i]:
            j += 1
        stacked = np.concatenate(avgs[i:j], axis=0)
        tid = tasks_seq[i]
        parts.append(ad.linear(stacked, params[f"task_adapters/{tid}/w"],
                               params[f"task_adapters/{tid}/b"]))
        i = j
    z = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    z = ad.linear(z, params["dataset_encoder/shared/w"], params["dataset_encoder/shared/b"])
    reps = ad.segment_mean(z, sizes)
    return AuxiliaryBank(reps=reps, source_tasks=tasks_seq, source_indices=indices)


def openbook_attend(h, bank: AuxiliaryBank, params):
    """Scaled single-head cross-attention of node states over the bank rows
    extended with a linear projection of the node states themselves."""
    n, d = h.data.shape
    if bank.size < 1 and n == 0:
        raise ValueError("nothing to attend over")
    proj = ad.linear(h, params["openbook/proj/w"], params["openbook/proj/b"])
    r_t = ad.concat([bank.reps, proj], axis=0)
    q = ad.linear(h, params["openbook/q/w"], params["openbook/q/b"])
    k = ad.linear(r_t, params["openbook/k/w"], params["openbook/k/b"])
    v = ad.linear(r_t, params["openbook/v/w"], params["openbook/v/b"])
    scores = ad.scale(ad.matmul(q, k, transpose_b=True), 1.0 / np.sqrt(d))
    weights = ad.softmax_rows(scores)
    attended = ad.matmul(weights, v)
    record = AttentionRecord(weights=weights.data.copy(), bank_size=bank.size,
                             source_tasks=list(bank.source_tasks))
    return attended, record


def openbook_attend_batch(h, bank: AuxiliaryBank, params, n, blocks):
    """openbook_attend for `blocks` same-size instances stacked row-wise:
    every node row attends over the shared bank plus the projected rows of
    its own instance only."""
    d = h.data.shape[1]
    ell = bank.size
    proj = ad.linear(h, params["openbook/proj/w"], params["openbook/proj/b"])
    q = ad.linear(h, params["openbook/q/w"], params["openbook/q/b"])
    kb = ad.linear(bank.reps, params["openbook/k/w"], params["openbook/k/b"])
    vb = ad.linear(bank.reps, params["openbook/v/w"], params["openbook/v/b"])
    ks = ad.linear(proj, params["openbook/k/w"], params["openbook/k/b"])
    vs = ad.linear(proj, params["openbook/v/w"], params["openbook/v/b"])
    scores = ad.concat([ad.matmul(q, kb, transpose_b=True),
                        ad.block_matmul(q, ks, n, transpose_b=True)], axis=1)
    weights = ad.softmax_rows(ad.scale(scores, 1.0 / np.sqrt(d)))
    attended = ad.add(ad.matmul(ad.slice_cols(weights, 0, ell), vb),
                      ad.block_matmul(ad.slice_cols(weights, ell, ell + n), vs, n))
    return attended


def gate_combine(h, attended, params):
    """Channel-wise convex blend: g*attended + (1-g)*h with g = sigmoid(linear)."""
    g = ad.sigmoid(ad.linear(ad.concat([h, attended]),
                             params["openbook/gate/w"], params["openbook/gate/b"]))
    ones = np.ones_like(g.data)
    return ad.add(ad.mul(g, attended), ad.mul(ad.sub(ones, g), h))


def extract_attention(record: AttentionRecord, bank: AuxiliaryBank = None) -> dict:
    """Unnormalized per-source-task attention mass over the bank rows only
    (self rows are not task evidence), summed over target nodes."""
    mass = record.weights[:, :record.bank_size].sum(axis=0)
    out = {}
    for task_id, m in zip(record.source_tasks, mass):
        out[task_id] = out.get(task_id, 0.0) + float(m)
    return out
