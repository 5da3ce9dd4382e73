"""Encode-process-decode network over graph-structured algorithm states.

Per algorithm step: feature encoders sum kind-specific linear embeddings into
node/edge/graph states, a single message-passing step with elementwise-max
aggregation updates node hidden states, and per-feature heads decode the next
state. The open-book attention path (see openbook.py) sits between processor
and decoders; with the gate forced to 0 the model reduces exactly to this
baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import init_linear

HIDDEN_DEFAULT = 128


class SchemaError(Exception):
    pass


@dataclass
class EncodedState:
    node: object    # Tensor [n, d]
    edge: object    # Tensor [n*n, d]
    graph: object   # Tensor [1, d]


def _feature_width(f):
    if f.kind in ("scalar", "mask", "mask_one"):
        return 1
    if f.kind == "categorical":
        return f.num_classes
    if f.kind == "pointer":
        return 1  # encoded as an edge indicator channel
    raise SchemaError(f"unknown feature kind {f.kind}")


def init_params(task, hidden, rng, aux_tasks=None):
    """All learnable weights, named by partition. `aux_tasks` lists the tasks
    whose instances may appear in the auxiliary bank (each gets an adapter)."""
    from .openbook import raw_state_width  # adapters are sized by the raw fold

    params = {}
    d = hidden
    for f in task.features:
        if f.stage == "output":
            continue
        params[f"encoders/{f.name}/w"] = Tensor(_xv(_feature_width(f), d, rng))
    params["encoders/node_bias"] = Tensor(np.zeros((1, d)))
    params["encoders/edge_bias"] = Tensor(np.zeros((1, d)))
    params["encoders/graph_bias"] = Tensor(np.zeros((1, d)))

    init_linear(params, "processor/f1", 2 * d, d, rng)
    # f2 is one linear layer over [z_v, z_u, h_uv, h_g]; its weight is stored
    # blockwise so the big pairwise product can be computed at node scale
    w2 = _xv(4 * d, d, rng)
    params["processor/f2/w_dst"] = Tensor(w2[:d])
    params["processor/f2/w_src"] = Tensor(w2[d:2 * d])
    params["processor/f2/w_edge"] = Tensor(w2[2 * d:3 * d])
    params["processor/f2/w_graph"] = Tensor(w2[3 * d:])
    params["processor/f2/b"] = Tensor(np.zeros(d))
    init_linear(params, "processor/f3", 2 * d, d, rng)

    init_linear(params, "dataset_encoder/shared", d, d, rng)
    for t in (aux_tasks or []):
        init_linear(params, f"task_adapters/{t.task_id}", raw_state_width(t), d, rng)

    init_linear(params, "openbook/proj", d, d, rng)
    init_linear(params, "openbook/q", d, d, rng)
    init_linear(params, "openbook/k", d, d, rng)
    init_linear(params, "openbook/v", d, d, rng)
    init_linear(params, "openbook/gate", 2 * d, d, rng)
    # Start the gate mostly closed (sigmoid(-2) ~ 0.12) so early training tracks
    # the plain processor and the memory blend is phased in where it helps.
    params["openbook/gate/b"].data[:] = -2.0

    for f in task.features:
        if f.stage == "input":
            continue
        base = f"decoders/{f.name}"
        if f.kind in ("scalar", "mask", "mask_one"):
            init_linear(params, base, 2 * d, 1, rng)
        elif f.kind == "categorical":
            init_linear(params, base, 2 * d, f.num_classes, rng)
        elif f.kind == "pointer":
            params[base + "/src"] = Tensor(_xv(2 * d, d, rng))
            params[base + "/dst"] = Tensor(_xv(2 * d, d, rng))
            params[base + "/edge"] = Tensor(_xv(d, 1, rng))
        else:
            raise SchemaError(f.kind)
    return params


def _xv(fi, fo, rng):
    from .optim import xavier_uniform
    return xavier_uniform(fi, fo, rng)


# ---------------------------------------------------------------------------
# encoder


def _pointer_indicator(ptr, n):
    p = np.zeros((n * n, 1))
    p[np.arange(n) * n + np.asarray(ptr, dtype=np.int64), 0] = 1.0
    return p


def encode_step(task, inputs, prev_hints, params, n) -> EncodedState:
    """Embed current inputs and previous-step hint values into node/edge/graph
    states. Every kind is linear in its value, so all-zero features leave only
    the location biases."""
    d = params["encoders/node_bias"].data.shape[1]
    ones_n = np.ones((n, 1))
    ones_e = np.ones((n * n, 1))
    node = ad.matmul(ones_n, params["encoders/node_bias"])
    edge = ad.matmul(ones_e, params["encoders/edge_bias"])
    graph = params["encoders/graph_bias"]

    for f in task.features:
        if f.stage == "output":
            continue
        val = inputs[f.name] if f.stage == "input" else prev_hints[f.name]
        w = params[f"encoders/{f.name}/w"]
        if f.location == "node":
            if f.kind == "pointer":
                edge = ad.add(edge, ad.matmul(_pointer_indicator(val, n), w))
            elif f.kind == "categorical":
                oh = np.eye(f.num_classes)[np.asarray(val, dtype=np.int64)]
                node = ad.add(node, ad.matmul(oh, w))
            else:
                col = np.asarray(val, dtype=np.float64).reshape(n, 1)
                node = ad.add(node, ad.matmul(col, w))
        elif f.location == "edge":
            col = np.asarray(val, dtype=np.float64).reshape(n * n, 1)
            edge = ad.add(edge, ad.matmul(col, w))
        elif f.location == "graph":
            col = np.asarray(val, dtype=np.float64).reshape(1, 1)
            graph = ad.add(graph, ad.matmul(col, w))
        else:
            raise SchemaError(f.location)
    return EncodedState(node=node, edge=edge, graph=graph)


def encode_batch(task, values, params, n, blocks) -> EncodedState:
    """Like encode_step, for `blocks` same-size instances stacked row-wise.
    `values` maps each non-output feature name to a list of per-instance
    values (current inputs or previous-step hints)."""
    node = ad.matmul(np.ones((blocks * n, 1)), params["encoders/node_bias"])
    edge = ad.matmul(np.ones((blocks * n * n, 1)), params["encoders/edge_bias"])
    graph = ad.matmul(np.ones((blocks, 1)), params["encoders/graph_bias"])

    for f in task.features:
        if f.stage == "output":
            continue
        vs = values[f.name]
        w = params[f"encoders/{f.name}/w"]
        if f.location == "node":
            if f.kind == "pointer":
                ind = np.concatenate([_pointer_indicator(v, n) for v in vs])
                edge = ad.add(edge, ad.matmul(ind, w))
            elif f.kind == "categorical":
                oh = np.eye(f.num_classes)[
                    np.concatenate([np.asarray(v, dtype=np.int64) for v in vs])]
                node = ad.add(node, ad.matmul(oh, w))
            else:
                col = np.concatenate(
                    [np.asarray(v, dtype=np.float64).reshape(n, 1) for v in vs])
                node = ad.add(node, ad.matmul(col, w))
        elif f.location == "edge":
            col = np.concatenate(
                [np.asarray(v, dtype=np.float64).reshape(n * n, 1) for v in vs])
            edge = ad.add(edge, ad.matmul(col, w))
        elif f.location == "graph":
            col = np.asarray(vs, dtype=np.float64).reshape(blocks, 1)
            graph = ad.add(graph, ad.matmul(col, w))
        else:
            raise SchemaError(f.location)
    return EncodedState(node=node, edge=edge, graph=graph)


# ---------------------------------------------------------------------------
# processor


def mpnn_step(enc: EncodedState, h_prev, adj_mask, params, n, blocks=1):
    """One message-passing step; incoming messages aggregate with elementwise
    max (empty in-neighborhoods give the zero vector). With blocks > 1 the
    encoded state holds that many same-size instances stacked row-wise."""
    z = ad.relu(ad.linear(ad.concat([enc.node, h_prev]),
                          params["processor/f1/w"], params["processor/f1/b"]))
    # f2 blockwise: project z once at node scale, then expand to pairs
    # (row u*n+v holds the message u -> v)
    zd = ad.matmul(z, params["processor/f2/w_dst"])
    zs = ad.matmul(z, params["processor/f2/w_src"])
    pre = ad.add(ad.tile_rows(zd, n, blocks), ad.repeat_rows(zs, n))
    pre = ad.add(pre, ad.matmul(enc.edge, params["processor/f2/w_edge"]))
    gterm = ad.matmul(enc.graph, params["processor/f2/w_graph"])
    if blocks > 1:
        gterm = ad.repeat_rows(gterm, n * n)
    pre = ad.add(pre, gterm)
    m = ad.relu(ad.add(pre, params["processor/f2/b"]))
    agg = ad.neighbor_max(m, adj_mask, n, blocks)
    return ad.relu(ad.linear(ad.concat([z, agg]),
                             params["processor/f3/w"], params["processor/f3/b"]))


# ---------------------------------------------------------------------------
# decoders


def decode_step(hath, enc: EncodedState, params, task, n, blocks=1):
    """Per-feature heads over [hath_v, h_v]; pointer heads score pairs with a
    scaled bilinear form plus an edge-state term. Pointer logits come out as
    [blocks*n, n]: one row of candidate targets per node."""
    x = ad.concat([hath, enc.node])
    d = hath.data.shape[1]
    preds = {}
    for f in task.features:
        if f.stage == "input":
            continue
        base = f"decoders/{f.name}"
        if f.kind in ("scalar", "mask", "mask_one"):
            preds[f.name] = ad.linear(x, params[base + "/w"], params[base + "/b"])
        elif f.kind == "categorical":
            preds[f.name] = ad.linear(x, params[base + "/w"], params[base + "/b"])
        elif f.kind == "pointer":
            src = ad.matmul(x, params[base + "/src"])
            dst = ad.matmul(x, params[base + "/dst"])
            scores = ad.scale(ad.block_matmul(src, dst, n, transpose_b=True),
                              1.0 / np.sqrt(d))
            eterm = ad.reshape(ad.matmul(enc.edge, params[base + "/edge"]),
                               (blocks * n, n))
            preds[f.name] = ad.add(scores, eterm)
        elif f.location == "graph":
            pooled = ad.reduce_mean(x, axis=0)
            preds[f.name] = ad.linear(ad.reshape(pooled, (1, 2 * d)),
                                      params[base + "/w"], params[base + "/b"])
        else:
            raise SchemaError(f.kind)
    return preds


def hard_decode(preds, task, stage):
    """Greedy decode to concrete values: argmax for pointer/categorical/
    mask_one (ties to the lowest index), 0.5 threshold for masks, raw scalars."""
    out = {}
    for f in task.stage_features(stage):
        logits = preds[f.name].data
        if f.kind == "pointer":
            out[f.name] = np.argmax(logits, axis=1).astype(np.int64)
        elif f.kind == "mask_one":
            v = np.zeros(logits.shape[0], dtype=np.int64)
            v[int(np.argmax(logits[:, 0]))] = 1
            out[f.name] = v
        elif f.kind == "mask":
            out[f.name] = (logits[:, 0] > 0.0).astype(np.int64)
        elif f.kind == "categorical":
            out[f.name] = np.argmax(logits, axis=1).astype(np.int64)
        else:
            out[f.name] = logits[:, 0].copy()
    return out


# ---------------------------------------------------------------------------
# rollout


def rollout(instance, params, task, bank=None, mode="teacher_forced",
            use_openbook=True, gate_override=None, record_attention=False):
    """Run the per-step pipeline for every algorithm step of the instance.

    Returns (per-step predictions, per-step attention records). In
    teacher_forced mode ground-truth previous hints are fed; autoregressive
    mode feeds hard decodes of the model's own hint predictions.
    """
    from . import openbook as ob

    n = instance.graph.n
    d = params["encoders/node_bias"].data.shape[1]
    adj_mask = instance.inputs["adj"].reshape(-1).astype(bool)
    if use_openbook and gate_override != 0.0:
        if bank is None:
            raise ValueError("open-book rollout requires an auxiliary bank")
        if bank.reps.data.shape[1] != d:
            raise ad.ShapeError("bank width does not match hidden width")
    h = Tensor(np.zeros((n, d)))
    prev = task.initial_hints(instance.graph, instance.inputs)
    steps = instance.num_steps
    preds_seq, attn_seq = [], []
    for t in range(steps):
        enc = encode_step(task, instance.inputs, prev, params, n)
        h = mpnn_step(enc, h, adj_mask, params, n)
        if use_openbook and gate_override != 0.0:
            raw, rec = ob.openbook_attend(h, bank, params)
            if record_attention:
                attn_seq.append(rec)
            if gate_override == 1.0:
                hath = raw
            else:
                hath = ob.gate_combine(h, raw, params)
        else:
            hath = h
        preds = decode_step(hath, enc, params, task, n)
        preds_seq.append(preds)
        if t + 1 < steps:
            if mode == "teacher_forced":
                prev = {f.name: instance.hints[f.name][t]
                        for f in task.stage_features("hint")}
            else:
                prev = hard_decode(preds, task, "hint")
    return preds_seq, attn_seq


def rollout_batch(instances, params, task, bank=None, use_openbook=True):
    """Teacher-forced rollout over several same-size, same-length instances
    stacked block-wise (one tape, one set of ops per step). Returns per-step
    predictions whose rows hold the instances back to back."""
    from . import openbook as ob

    n = instances[0].graph.n
    steps = instances[0].num_steps
    if any(i.graph.n != n or i.num_steps != steps for i in instances):
        raise ad.ShapeError("batched rollout needs uniform size and length")
    blocks = len(instances)
    d = params["encoders/node_bias"].data.shape[1]
    adj_mask = np.concatenate(
        [i.inputs["adj"].reshape(-1) for i in instances]).astype(bool)
    if use_openbook:
        if bank is None:
            raise ValueError("open-book rollout requires an auxiliary bank")
        if bank.reps.data.shape[1] != d:
            raise ad.ShapeError("bank width does not match hidden width")

    input_vals = {f.name: [i.inputs[f.name] for i in instances]
                  for f in task.stage_features("input")}
    hint_feats = task.stage_features("hint")
    prevs = [task.initial_hints(i.graph, i.inputs) for i in instances]

    h = Tensor(np.zeros((blocks * n, d)))
    preds_seq = []
    for t in range(steps):
        values = dict(input_vals)
        for f in hint_feats:
            values[f.name] = [p[f.name] for p in prevs]
        enc = encode_batch(task, values, params, n, blocks)
        h = mpnn_step(enc, h, adj_mask, params, n, blocks)
        if use_openbook:
            raw = ob.openbook_attend_batch(h, bank, params, n, blocks)
            hath = ob.gate_combine(h, raw, params)
        else:
            hath = h
        preds_seq.append(decode_step(hath, enc, params, task, n, blocks))
        if t + 1 < steps:
            prevs = [{f.name: i.hints[f.name][t] for f in hint_feats}
                     for i in instances]
    return preds_seq
