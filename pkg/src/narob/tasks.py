"""Classical-algorithm trace datasets.

Each task executes an instrumented textbook algorithm on a sampled instance
and records its internal state once per outer-loop iteration (the first hint
step is the state right after initialization). Tie-breaking everywhere is
"lowest node index wins" so brute-force oracles are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import container


class GenerationError(Exception):
    pass


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    stage: str       # input | hint | output
    location: str    # node | edge | graph
    kind: str        # scalar | mask | mask_one | categorical | pointer
    num_classes: int = 0


@dataclass
class TaskSpec:
    task_id: str
    category: str    # graphs | sorting | search | greedy
    features: list
    executor: object = None        # (graph, inputs) -> (hints, outputs)
    sample_inputs: object = None   # (graph, rng) -> inputs
    initial_hints: object = None   # (graph, inputs) -> hint values at step 0
    weighted: bool = False
    needs_source: bool = False
    complete_graph: bool = False

    def stage_features(self, stage):
        return [f for f in self.features if f.stage == stage]


@dataclass
class Graph:
    n: int
    edges: list                      # (u, v) pairs, u < v, no self-loops
    weights: np.ndarray = None       # per-edge, aligned with `edges`
    source: int = None

    def adjacency(self):
        a = np.zeros((self.n, self.n))
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        return a

    def weight_matrix(self):
        w = np.zeros((self.n, self.n))
        for (u, v), wt in zip(self.edges, self.weights):
            w[u, v] = w[v, u] = wt
        return w


@dataclass
class TraceInstance:
    task_id: str
    graph: Graph
    inputs: dict     # name -> array
    hints: dict      # name -> array with leading time axis [T, ...]
    outputs: dict    # name -> array

    @property
    def num_steps(self):
        return next(iter(self.hints.values())).shape[0]


@dataclass
class Dataset:
    task_id: str
    split: str
    instances: list
    node_count: int


# ---------------------------------------------------------------------------
# instance sampling


def _connected(n, edges):
    if n == 1:
        return True
    adj = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    seen = [False] * n
    stack = [0]
    seen[0] = True
    count = 1
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                count += 1
                stack.append(v)
    return count == n


def generate_graph(n, edge_prob, weighted, rng) -> Graph:
    """Connected undirected Erdos-Renyi graph; resamples until connected."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0 < edge_prob <= 1):
        raise ValueError("edge_prob must be in (0, 1]")
    for _ in range(1000):
        mask = rng.random((n, n)) < edge_prob
        edges = [(u, v) for u in range(n) for v in range(u + 1, n) if mask[u, v]]
        if _connected(n, edges):
            weights = 1.0 - rng.random(len(edges)) if weighted else None
            return Graph(n=n, edges=edges, weights=weights)
    raise GenerationError(f"no connected graph in 1000 resamples (n={n}, p={edge_prob})")


def _uniform01(rng, size=None):
    # uniform on (0, 1]
    return 1.0 - rng.random(size)


# ---------------------------------------------------------------------------
# executors (hints include the post-initialization state as step 1)


def _pred_of(order):
    n = len(order)
    pred = np.zeros(n, dtype=np.int64)
    pred[order[0]] = order[0]
    for t in range(1, n):
        pred[order[t]] = order[t - 1]
    return pred


def _onehot(i, n):
    v = np.zeros(n, dtype=np.int64)
    v[i] = 1
    return v


def _bfs_exec(g, inputs):
    n = g.n
    adj = inputs["adj"]
    s = int(np.argmax(inputs["source"]))
    visited = np.zeros(n, dtype=np.int64)
    frontier = np.zeros(n, dtype=np.int64)
    pi = np.arange(n, dtype=np.int64)
    visited[s] = frontier[s] = 1
    hv, hf, hp = [], [], []
    while True:
        hv.append(visited.copy())
        hf.append(frontier.copy())
        hp.append(pi.copy())
        nxt = np.zeros(n, dtype=np.int64)
        for v in range(n):
            if visited[v]:
                continue
            parents = [u for u in range(n) if frontier[u] and adj[u, v]]
            if parents:
                nxt[v] = 1
                pi[v] = min(parents)
        if not nxt.any():
            break
        visited |= nxt
        frontier = nxt
    hints = {"visited": np.stack(hv), "frontier": np.stack(hf), "pi_h": np.stack(hp)}
    return hints, {"pi": pi}


def _bellman_ford_exec(g, inputs):
    n = g.n
    adj, w = inputs["adj"], inputs["w"]
    s = int(np.argmax(inputs["source"]))
    d = np.zeros(n)
    reach = np.zeros(n, dtype=np.int64)
    pi = np.arange(n, dtype=np.int64)
    reach[s] = 1
    hd, hr, hp = [d.copy()], [reach.copy()], [pi.copy()]
    for _ in range(n):
        nd, nr, npi = d.copy(), reach.copy(), pi.copy()
        changed = False
        for v in range(n):
            best, best_u = np.inf, -1
            for u in range(n):
                if adj[u, v] and reach[u]:
                    cand = d[u] + w[u, v]
                    if cand < best:
                        best, best_u = cand, u
            if best_u < 0:
                continue
            if not reach[v] or best < d[v] or (best == d[v] and best_u < pi[v]):
                if reach[v] and best == d[v] and best_u == pi[v]:
                    continue
                nd[v], npi[v], nr[v] = best, best_u, 1
                changed = changed or (not reach[v]) or best < d[v] or best_u != pi[v]
        if not changed:
            break
        d, reach, pi = nd, nr, npi
        hd.append(d.copy())
        hr.append(reach.copy())
        hp.append(pi.copy())
    hints = {"d": np.stack(hd), "reach": np.stack(hr), "pi_h": np.stack(hp)}
    return hints, {"pi": pi}


def _dijkstra_exec(g, inputs):
    n = g.n
    adj, w = inputs["adj"], inputs["w"]
    s = int(np.argmax(inputs["source"]))
    tent = np.full(n, np.inf)
    tent[s] = 0.0
    visited = np.zeros(n, dtype=np.int64)
    pi = np.arange(n, dtype=np.int64)
    hv, hc, hd, hp = [], [], [], []
    for _ in range(n):
        masked = np.where(visited == 0, tent, np.inf)
        u = int(np.argmin(masked))
        visited[u] = 1
        for v in range(n):
            if adj[u, v] and not visited[v]:
                cand = tent[u] + w[u, v]
                if cand < tent[v] or (cand == tent[v] and u < pi[v]):
                    tent[v] = cand
                    pi[v] = u
        hv.append(visited.copy())
        hc.append(_onehot(u, n))
        hd.append(np.where(np.isfinite(tent), tent, 0.0))
        hp.append(pi.copy())
    hints = {"visited": np.stack(hv), "cur": np.stack(hc),
             "d": np.stack(hd), "pi_h": np.stack(hp)}
    return hints, {"pi": pi}


def _insertion_sort_exec(g, inputs):
    n = g.n
    key = inputs["key"]
    order = list(range(n))
    hp, hi = [_pred_of(order)], [_onehot(order[0], n)]
    for j in range(1, n):
        x = order[j]
        k = j - 1
        while k >= 0 and key[order[k]] > key[x]:
            order[k + 1] = order[k]
            k -= 1
        order[k + 1] = x
        hp.append(_pred_of(order))
        hi.append(_onehot(x, n))
    hints = {"pred_h": np.stack(hp), "i": np.stack(hi)}
    return hints, {"pred": _pred_of(order)}


def _bubble_sort_exec(g, inputs):
    n = g.n
    key = inputs["key"]
    arr = list(range(n))
    hp = [_pred_of(arr)]
    while True:
        swapped = False
        for idx in range(n - 1):
            if key[arr[idx]] > key[arr[idx + 1]]:
                arr[idx], arr[idx + 1] = arr[idx + 1], arr[idx]
                swapped = True
        if not swapped:
            break
        hp.append(_pred_of(arr))
    return {"pred_h": np.stack(hp)}, {"pred": _pred_of(arr)}


def _binary_search_exec(g, inputs):
    n = g.n
    key = inputs["key"]
    target = float(inputs["target"])
    lo, hi = 0, n - 1

    def active():
        a = np.zeros(n, dtype=np.int64)
        a[lo:hi + 1] = 1
        return a

    ha, hm = [active()], [_onehot((lo + hi) // 2, n)]
    while lo < hi:
        mid = (lo + hi) // 2
        if key[mid] >= target:
            hi = mid
        else:
            lo = mid + 1
        ha.append(active())
        hm.append(_onehot((lo + hi) // 2, n))
    hints = {"active": np.stack(ha), "mid": np.stack(hm)}
    return hints, {"ret": _onehot(lo, n)}


def _minimum_exec(g, inputs):
    n = g.n
    key = inputs["key"]
    m = 0
    hm, hi = [_onehot(0, n)], [_onehot(0, n)]
    for idx in range(1, n):
        if key[idx] < key[m]:
            m = idx
        hm.append(_onehot(m, n))
        hi.append(_onehot(idx, n))
    return {"min_h": np.stack(hm), "i": np.stack(hi)}, {"min": _onehot(m, n)}


def _activity_exec(g, inputs):
    n = g.n
    start, finish = inputs["start"], inputs["finish"]
    order = sorted(range(n), key=lambda a: (finish[a], a))
    sel = np.zeros(n, dtype=np.int64)
    cur = order[0]
    sel[cur] = 1
    hs, hc = [sel.copy()], [_onehot(cur, n)]
    for a in order[1:]:
        if start[a] >= finish[cur]:
            sel[a] = 1
            cur = a
            hs.append(sel.copy())
            hc.append(_onehot(cur, n))
    return {"selected_h": np.stack(hs), "cur": np.stack(hc)}, {"selected": sel}


# ---------------------------------------------------------------------------
# input samplers and step-0 states


def _graph_inputs(weighted):
    def sample(g, rng):
        inp = {"pos": np.arange(g.n) / g.n,
               "source": _onehot(g.source, g.n).astype(np.float64),
               "adj": g.adjacency()}
        if weighted:
            inp["w"] = g.weight_matrix()
        return inp
    return sample


def _key_inputs(g, rng):
    return {"pos": np.arange(g.n) / g.n, "adj": g.adjacency(),
            "key": _uniform01(rng, g.n)}


def _sorted_key_inputs(g, rng):
    return {"pos": np.arange(g.n) / g.n, "adj": g.adjacency(),
            "key": np.sort(_uniform01(rng, g.n)),
            "target": np.float64(_uniform01(rng))}


def _interval_inputs(g, rng):
    a = _uniform01(rng, g.n)
    b = _uniform01(rng, g.n)
    return {"pos": np.arange(g.n) / g.n, "adj": g.adjacency(),
            "start": np.minimum(a, b), "finish": np.maximum(a, b)}


def _self_ptr(n):
    return np.arange(n, dtype=np.int64)


def _bfs_init(g, inputs):
    n = g.n
    src = inputs["source"].astype(np.int64)
    return {"visited": np.zeros(n, dtype=np.int64), "frontier": src.copy(),
            "pi_h": _self_ptr(n)}


def _bf_init(g, inputs):
    n = g.n
    return {"d": np.zeros(n), "reach": inputs["source"].astype(np.int64).copy(),
            "pi_h": _self_ptr(n)}


def _dijkstra_init(g, inputs):
    n = g.n
    return {"visited": np.zeros(n, dtype=np.int64),
            "cur": inputs["source"].astype(np.int64).copy(),
            "d": np.zeros(n), "pi_h": _self_ptr(n)}


def _pos_order(inputs):
    # ordering by the pos input keeps step-0 states relabeling-equivariant
    return list(np.argsort(inputs["pos"], kind="stable"))


def _ins_init(g, inputs):
    n = g.n
    order = _pos_order(inputs)
    return {"pred_h": _pred_of(order), "i": _onehot(order[0], n)}


def _bubble_init(g, inputs):
    return {"pred_h": _pred_of(_pos_order(inputs))}


def _binsearch_init(g, inputs):
    n = g.n
    mid = _pos_order(inputs)[(n - 1) // 2]
    return {"active": np.ones(n, dtype=np.int64), "mid": _onehot(mid, n)}


def _minimum_init(g, inputs):
    first = _pos_order(inputs)[0]
    return {"min_h": _onehot(first, g.n), "i": _onehot(first, g.n)}


def _activity_init(g, inputs):
    first = _pos_order(inputs)[0]
    return {"selected_h": np.zeros(g.n, dtype=np.int64), "cur": _onehot(first, g.n)}


# ---------------------------------------------------------------------------
# registry


def _fs(name, stage, location, kind, k=0):
    return FeatureSpec(name, stage, location, kind, k)


_COMMON = [_fs("pos", "input", "node", "scalar"), _fs("adj", "input", "edge", "mask")]

TASKS = {}


def _register(task):
    names = [f.name for f in task.features]
    assert len(names) == len(set(names)), task.task_id
    assert task.stage_features("output"), task.task_id
    TASKS[task.task_id] = task


_register(TaskSpec(
    "bfs", "graphs",
    _COMMON + [_fs("source", "input", "node", "mask_one"),
               _fs("visited", "hint", "node", "mask"),
               _fs("frontier", "hint", "node", "mask"),
               _fs("pi_h", "hint", "node", "pointer"),
               _fs("pi", "output", "node", "pointer")],
    executor=_bfs_exec, sample_inputs=_graph_inputs(False), initial_hints=_bfs_init,
    needs_source=True))

_register(TaskSpec(
    "bellman_ford", "graphs",
    _COMMON + [_fs("source", "input", "node", "mask_one"),
               _fs("w", "input", "edge", "scalar"),
               _fs("d", "hint", "node", "scalar"),
               _fs("reach", "hint", "node", "mask"),
               _fs("pi_h", "hint", "node", "pointer"),
               _fs("pi", "output", "node", "pointer")],
    executor=_bellman_ford_exec, sample_inputs=_graph_inputs(True),
    initial_hints=_bf_init, weighted=True, needs_source=True))

_register(TaskSpec(
    "dijkstra", "graphs",
    _COMMON + [_fs("source", "input", "node", "mask_one"),
               _fs("w", "input", "edge", "scalar"),
               _fs("visited", "hint", "node", "mask"),
               _fs("cur", "hint", "node", "mask_one"),
               _fs("d", "hint", "node", "scalar"),
               _fs("pi_h", "hint", "node", "pointer"),
               _fs("pi", "output", "node", "pointer")],
    executor=_dijkstra_exec, sample_inputs=_graph_inputs(True),
    initial_hints=_dijkstra_init, weighted=True, needs_source=True))

_register(TaskSpec(
    "insertion_sort", "sorting",
    _COMMON + [_fs("key", "input", "node", "scalar"),
               _fs("pred_h", "hint", "node", "pointer"),
               _fs("i", "hint", "node", "mask_one"),
               _fs("pred", "output", "node", "pointer")],
    executor=_insertion_sort_exec, sample_inputs=_key_inputs,
    initial_hints=_ins_init, complete_graph=True))

_register(TaskSpec(
    "bubble_sort", "sorting",
    _COMMON + [_fs("key", "input", "node", "scalar"),
               _fs("pred_h", "hint", "node", "pointer"),
               _fs("pred", "output", "node", "pointer")],
    executor=_bubble_sort_exec, sample_inputs=_key_inputs,
    initial_hints=_bubble_init, complete_graph=True))

_register(TaskSpec(
    "binary_search", "search",
    _COMMON + [_fs("key", "input", "node", "scalar"),
               _fs("target", "input", "graph", "scalar"),
               _fs("active", "hint", "node", "mask"),
               _fs("mid", "hint", "node", "mask_one"),
               _fs("ret", "output", "node", "mask_one")],
    executor=_binary_search_exec, sample_inputs=_sorted_key_inputs,
    initial_hints=_binsearch_init, complete_graph=True))

_register(TaskSpec(
    "minimum", "search",
    _COMMON + [_fs("key", "input", "node", "scalar"),
               _fs("min_h", "hint", "node", "mask_one"),
               _fs("i", "hint", "node", "mask_one"),
               _fs("min", "output", "node", "mask_one")],
    executor=_minimum_exec, sample_inputs=_key_inputs,
    initial_hints=_minimum_init, complete_graph=True))

_register(TaskSpec(
    "activity_selector", "greedy",
    _COMMON + [_fs("start", "input", "node", "scalar"),
               _fs("finish", "input", "node", "scalar"),
               _fs("selected_h", "hint", "node", "mask"),
               _fs("cur", "hint", "node", "mask_one"),
               _fs("selected", "output", "node", "mask")],
    executor=_activity_exec, sample_inputs=_interval_inputs,
    initial_hints=_activity_init, complete_graph=True))


# ---------------------------------------------------------------------------
# trace construction and validation


def validate_instance(task: TaskSpec, inst: TraceInstance):
    n = inst.graph.n
    assert inst.num_steps >= 1
    for f in task.stage_features("hint"):
        vals = inst.hints[f.name]
        assert vals.shape[0] == inst.num_steps, f.name
        if f.kind == "pointer":
            assert vals.min() >= 0 and vals.max() < n, f.name
        if f.kind == "mask_one":
            assert np.all(vals.sum(axis=-1) == 1), f.name
    for f in task.stage_features("output"):
        vals = inst.outputs[f.name]
        if f.kind == "pointer":
            assert vals.min() >= 0 and vals.max() < n, f.name
        if f.kind == "mask_one":
            assert vals.sum() == 1, f.name
    # final hint state agrees with outputs under the `<name>_h` convention
    for f in task.stage_features("output"):
        h = f.name + "_h"
        if h in inst.hints:
            assert np.array_equal(inst.hints[h][-1], inst.outputs[f.name]), f.name


def execute_task(task: TaskSpec, graph: Graph, rng) -> TraceInstance:
    if task.weighted and graph.weights is None:
        raise ValueError(f"{task.task_id} requires a weighted graph")
    if task.needs_source and graph.source is None:
        raise ValueError(f"{task.task_id} requires a designated source node")
    inputs = task.sample_inputs(graph, rng)
    hints, outputs = task.executor(graph, inputs)
    inst = TraceInstance(task.task_id, graph, inputs, hints, outputs)
    validate_instance(task, inst)
    return inst


def build_dataset(task: TaskSpec, count, n, seed, split="train", edge_prob=0.5) -> Dataset:
    """count i.i.d. instances of size n; instance i uses a generator derived
    from (seed, i) so generation is order-independent and reproducible."""
    if count < 1 or n < 1:
        raise ValueError("count and n must be >= 1")
    p = 1.0 if task.complete_graph else edge_prob
    instances = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, i)))
        g = generate_graph(n, p, task.weighted, rng)
        if task.needs_source:
            g.source = int(rng.integers(n))
        instances.append(execute_task(task, g, rng))
    return Dataset(task.task_id, split, instances, n)


# ---------------------------------------------------------------------------
# persistence (.nardat)


def _schema_meta(task: TaskSpec):
    return [{"name": f.name, "stage": f.stage, "location": f.location,
             "kind": f.kind, "num_classes": f.num_classes} for f in task.features]


def persist_dataset(dataset: Dataset, path):
    task = TASKS[dataset.task_id]
    meta = {"task_id": dataset.task_id, "split": dataset.split,
            "node_count": dataset.node_count, "count": len(dataset.instances),
            "schema": _schema_meta(task)}
    arrays = {}
    for i, inst in enumerate(dataset.instances):
        p = f"inst{i:05d}"
        g = inst.graph
        arrays[f"{p}/graph/n"] = np.array([g.n])
        arrays[f"{p}/graph/edges"] = (np.array(g.edges, dtype=np.int64).reshape(-1, 2)
                                      if g.edges else np.zeros((0, 2), dtype=np.int64))
        if g.weights is not None:
            arrays[f"{p}/graph/weights"] = np.asarray(g.weights)
        arrays[f"{p}/graph/source"] = np.array([g.source if g.source is not None else -1])
        for name, v in inst.inputs.items():
            arrays[f"{p}/inputs/{name}"] = v
        for name, v in inst.hints.items():
            arrays[f"{p}/hints/{name}"] = v
        for name, v in inst.outputs.items():
            arrays[f"{p}/outputs/{name}"] = v
    container.write_container(path, meta, arrays)


def load_dataset(path) -> Dataset:
    meta, arrays = container.read_container(path)
    task = TASKS[meta["task_id"]]
    kinds = {f.name: f.kind for f in task.features}

    def fix(name, v):
        if kinds[name] in ("mask", "mask_one", "pointer", "categorical"):
            return v.astype(np.int64)
        return v.astype(np.float64)

    instances = []
    for i in range(meta["count"]):
        p = f"inst{i:05d}"
        n = int(arrays[f"{p}/graph/n"][0])
        edges = [tuple(e) for e in arrays[f"{p}/graph/edges"].tolist()]
        weights = arrays.get(f"{p}/graph/weights")
        src = int(arrays[f"{p}/graph/source"][0])
        g = Graph(n=n, edges=edges, weights=weights,
                  source=src if src >= 0 else None)
        inputs = {f.name: fix(f.name, arrays[f"{p}/inputs/{f.name}"])
                  for f in task.stage_features("input")}
        hints = {f.name: fix(f.name, arrays[f"{p}/hints/{f.name}"])
                 for f in task.stage_features("hint")}
        outputs = {f.name: fix(f.name, arrays[f"{p}/outputs/{f.name}"])
                   for f in task.stage_features("output")}
        instances.append(TraceInstance(meta["task_id"], g, inputs, hints, outputs))
    return Dataset(meta["task_id"], meta["split"], instances, meta["node_count"])


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if (a.task_id, a.split, a.node_count, len(a.instances)) != \
            (b.task_id, b.split, b.node_count, len(b.instances)):
        return False
    for x, y in zip(a.instances, b.instances):
        if x.graph.n != y.graph.n or x.graph.edges != y.graph.edges:
            return False
        if x.graph.source != y.graph.source:
            return False
        if (x.graph.weights is None) != (y.graph.weights is None):
            return False
        if x.graph.weights is not None and not np.array_equal(x.graph.weights, y.graph.weights):
            return False
        for d1, d2 in ((x.inputs, y.inputs), (x.hints, y.hints), (x.outputs, y.outputs)):
            if d1.keys() != d2.keys():
                return False
            for k in d1:
                if not np.array_equal(d1[k], d2[k]):
                    return False
    return True
