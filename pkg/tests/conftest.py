import numpy as np
import pytest

from narob.model import init_params
from narob.tasks import TASKS, Graph, TraceInstance, build_dataset


def small_params(task_id="bfs", hidden=16, seed=0, aux_task_ids=None):
    aux = [TASKS[t] for t in (aux_task_ids or [task_id])]
    rng = np.random.default_rng(seed)
    return init_params(TASKS[task_id], hidden, rng, aux_tasks=aux)


def bank_triples(dataset, count=None):
    insts = dataset.instances if count is None else dataset.instances[:count]
    return [(dataset.task_id, i, inst) for i, inst in enumerate(insts)]


@pytest.fixture(scope="session")
def bfs_train():
    return build_dataset(TASKS["bfs"], 16, 5, seed=11)


@pytest.fixture(scope="session")
def sort_train():
    return build_dataset(TASKS["insertion_sort"], 16, 5, seed=12)


def permute_instance(inst, perm):
    """Relabel an instance's nodes: node v becomes perm[v]. Pointer values are
    mapped through perm; edge arrays are conjugated."""
    task = TASKS[inst.task_id]
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.argsort(perm)
    n = inst.graph.n

    def remap(f, val):
        if f.location == "graph":
            return np.copy(val)
        if f.location == "edge":
            return val[inv][:, inv]
        if f.kind == "pointer":
            return perm[val[inv]]
        return val[inv]

    def remap_hint(f, val):
        return np.stack([
            perm[v[inv]] if f.kind == "pointer" and f.location == "node"
            else (v[inv][:, inv] if f.location == "edge" else
                  (np.copy(v) if f.location == "graph" else v[inv]))
            for v in val])

    inputs = {f.name: remap(f, inst.inputs[f.name])
              for f in task.stage_features("input")}
    hints = {f.name: remap_hint(f, inst.hints[f.name])
             for f in task.stage_features("hint")}
    outputs = {f.name: remap(f, inst.outputs[f.name])
               for f in task.stage_features("output")}

    g = inst.graph
    edges = sorted(tuple(sorted((int(perm[u]), int(perm[v])))) for u, v in g.edges)
    emap = {tuple(sorted((int(perm[u]), int(perm[v])))): w
            for (u, v), w in zip(g.edges, g.weights if g.weights is not None
                                 else [0.0] * len(g.edges))}
    weights = (np.array([emap[e] for e in edges]) if g.weights is not None
               else None)
    source = int(perm[g.source]) if g.source is not None else None
    graph = Graph(n=n, edges=edges, weights=weights, source=source)
    return TraceInstance(inst.task_id, graph, inputs, hints, outputs)
