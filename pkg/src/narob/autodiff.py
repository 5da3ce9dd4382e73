"""Dense float64 tensors with a reverse-mode tape.

Primitives cover the minimal closure needed by the message-passing processor,
the cross-attention memory path, and the per-feature losses: matmul,
broadcast add/sub/mul, relu/sigmoid/tanh, stable (log-)softmax, softplus,
concat, reductions, gather/scatter, row tiling, masked neighbor max, and
segment mean. Every primitive records onto the active tape (if any) with a
closure computing parent gradients.
"""

from __future__ import annotations

import os

import numpy as np

DEBUG_CHECK = bool(os.environ.get("NAROB_DEBUG"))

_ACTIVE_TAPE = None


class ShapeError(Exception):
    pass


class Tensor:
    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


class Tape:
    """Ordered record of primitive applications; appending order is topological."""

    def __init__(self):
        self.ops = []  # (out, tracked (index, Tensor) pairs, backward_fn)

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev


def _d(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(out_data, parents, backward_fn):
    out = Tensor(out_data)
    if DEBUG_CHECK and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite value produced by forward op")
    tape = _ACTIVE_TAPE
    if tape is not None:
        tracked = [(i, p) for i, p in enumerate(parents) if isinstance(p, Tensor)]
        if tracked:
            tape.ops.append((out, tracked, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor):
    """Populate .grad on every tensor reachable from recorded ops, seeded at loss."""
    if loss.data.size != 1:
        raise ValueError("loss must be scalar")
    loss.grad = np.ones_like(loss.data)
    for out, tracked, bw in reversed(tape.ops):
        g = out.grad
        if g is None:
            continue
        grads = bw(g)
        for i, p in tracked:
            gp = grads[i]
            if gp is None:
                continue
            # accumulation always allocates, so aliasing g here is safe
            p.grad = gp if p.grad is None else p.grad + gp


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def leaf_grad(t: Tensor) -> np.ndarray:
    """Gradient of a leaf after backward; untouched leaves read as zero."""
    return t.grad if t.grad is not None else np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b, transpose_b=False):
    ad, bd = _d(a), _d(b)
    bm = bd.T if transpose_b else bd
    if ad.shape[-1] != bm.shape[0]:
        raise ShapeError(f"matmul {ad.shape} x {bd.shape} (transpose_b={transpose_b})")
    out = ad @ bm
    need_a, need_b = isinstance(a, Tensor), isinstance(b, Tensor)

    def bw(g):
        ga = g @ (bd if transpose_b else bd.T) if need_a else None
        if not need_b:
            return ga, None
        gb = g.T @ ad if transpose_b else ad.T @ g
        return ga, gb

    return _make(out, [a, b], bw)


def _bcast_bw(g, shape):
    # reduce gradient g down to `shape` (row-bias or scalar broadcasting)
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return g.sum().reshape(shape)
    # trailing-axis broadcast: sum over leading axes
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    r = g.sum(axis=axes, keepdims=False)
    return r.reshape(shape)


def add(a, b):
    ad, bd = _d(a), _d(b)
    out = ad + bd
    if ad.shape == bd.shape:
        return _make(out, [a, b], lambda g: (g, g))
    return _make(out, [a, b], lambda g: (_bcast_bw(g, ad.shape), _bcast_bw(g, bd.shape)))


def sub(a, b):
    ad, bd = _d(a), _d(b)
    out = ad - bd
    if ad.shape == bd.shape:
        return _make(out, [a, b], lambda g: (g, -g))
    return _make(out, [a, b], lambda g: (_bcast_bw(g, ad.shape), _bcast_bw(-g, bd.shape)))


def mul(a, b):
    ad, bd = _d(a), _d(b)
    out = ad * bd
    if ad.shape == bd.shape:
        return _make(out, [a, b], lambda g: (g * bd, g * ad))
    return _make(
        out, [a, b], lambda g: (_bcast_bw(g * bd, ad.shape), _bcast_bw(g * ad, bd.shape))
    )


def scale(a, c: float):
    ad = _d(a)
    return _make(ad * c, [a], lambda g: (g * c,))


def relu(a):
    ad = _d(a)
    mask = ad > 0
    return _make(ad * mask, [a], lambda g: (g * mask,))


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-_d(a)))
    return _make(s, [a], lambda g: (g * s * (1.0 - s),))


def tanh(a):
    t = np.tanh(_d(a))
    return _make(t, [a], lambda g: (g * (1.0 - t * t),))


def log(a):
    ad = _d(a)
    return _make(np.log(ad), [a], lambda g: (g / ad,))


def softplus(a):
    ad = _d(a)
    out = np.logaddexp(0.0, ad)
    s = 1.0 / (1.0 + np.exp(-ad))
    return _make(out, [a], lambda g: (g * s,))


def softmax_rows(a):
    ad = _d(a)
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return ((g - dot) * s,)

    return _make(s, [a], bw)


def log_softmax_rows(a):
    ad = _d(a)
    shifted = ad - ad.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, [a], bw)


def concat(parts, axis=-1):
    datas = [_d(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, list(parts), bw)


def reduce_sum(a, axis=None):
    ad = _d(a)
    out = ad.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full_like(ad, g),)
        return (np.broadcast_to(np.expand_dims(g, axis), ad.shape).copy(),)

    return _make(out, [a], bw)


def reduce_mean(a, axis=None):
    ad = _d(a)
    n = ad.size if axis is None else ad.shape[axis]
    out = ad.mean(axis=axis)

    def bw(g):
        if axis is None:
            return (np.full_like(ad, g / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, ad.shape).copy(),)

    return _make(out, [a], bw)


def reduce_max(a, axis):
    ad = _d(a)
    out = ad.max(axis=axis)
    hit = ad == np.expand_dims(out, axis)
    # route gradient to the first argmax only (subgradient choice)
    first = np.cumsum(hit, axis=axis) == 1
    sel = hit & first

    def bw(g):
        return (np.expand_dims(g, axis) * sel,)

    return _make(out, [a], bw)


def gather_rows(a, idx):
    ad = _d(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = ad[idx]

    def bw(g):
        ga = np.zeros_like(ad)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(out, [a], bw)


def scatter_add(a, idx, updates):
    """Rows of `updates` added into rows idx of `a`."""
    ad, ud = _d(a), _d(updates)
    idx = np.asarray(idx, dtype=np.intp)
    out = ad.copy()
    np.add.at(out, idx, ud)
    return _make(out, [a, updates], lambda g: (g, g[idx]))


def repeat_rows(a, k: int):
    """[m, d] -> [m*k, d], each row repeated k times consecutively."""
    ad = _d(a)
    out = np.repeat(ad, k, axis=0)
    m = ad.shape[0]

    def bw(g):
        return (g.reshape(m, k, -1).sum(axis=1),)

    return _make(out, [a], bw)


def tile_rows(a, k: int, blocks: int = 1):
    """[blocks*m, d] -> [blocks*m*k, d]; each m-row block is tiled k times in
    place (blocks=1 tiles the whole array)."""
    ad = _d(a)
    total, d = ad.shape
    m = total // blocks
    if blocks == 1:
        out = np.tile(ad, (k, 1))
    else:
        out = np.broadcast_to(ad.reshape(blocks, 1, m, d),
                              (blocks, k, m, d)).reshape(blocks * k * m, d)

    def bw(g):
        return (g.reshape(blocks, k, m, -1).sum(axis=1).reshape(total, -1),)

    return _make(out, [a], bw)


def slice_cols(a, j0: int, j1: int):
    """Contiguous column slice [:, j0:j1]."""
    ad = _d(a)
    out = ad[:, j0:j1].copy()

    def bw(g):
        ga = np.zeros_like(ad)
        ga[:, j0:j1] = g
        return (ga,)

    return _make(out, [a], bw)


def block_matmul(a, b, n: int, transpose_b=False):
    """Per-block matrix product of row-stacked operands. Both arguments hold
    `blocks = rows/n` stacked blocks of n rows; block i of the output equals
    a_i @ b_i (or a_i @ b_i.T)."""
    ad, bd = _d(a), _d(b)
    blocks = ad.shape[0] // n
    a3 = ad.reshape(blocks, n, ad.shape[1])
    b3 = bd.reshape(blocks, n, bd.shape[1])
    bm = b3.swapaxes(1, 2) if transpose_b else b3
    if a3.shape[2] != bm.shape[1]:
        raise ShapeError(f"block_matmul {ad.shape} x {bd.shape} "
                         f"(n={n}, transpose_b={transpose_b})")
    out3 = np.matmul(a3, bm)
    out = out3.reshape(blocks * n, out3.shape[2])
    need_a, need_b = isinstance(a, Tensor), isinstance(b, Tensor)

    def bw(g):
        g3 = g.reshape(blocks, n, -1)
        ga = gb = None
        if need_a:
            ga = np.matmul(g3, b3 if transpose_b else b3.swapaxes(1, 2))
            ga = ga.reshape(ad.shape)
        if need_b:
            gb = np.matmul(g3.swapaxes(1, 2), a3) if transpose_b \
                else np.matmul(a3.swapaxes(1, 2), g3)
            gb = gb.reshape(bd.shape)
        return ga, gb

    return _make(out, [a, b], bw)


def reshape(a, shape):
    ad = _d(a)
    out = ad.reshape(shape)
    return _make(out, [a], lambda g: (g.reshape(ad.shape),))


def neighbor_max(msgs, mask, n: int, blocks: int = 1):
    """Max over incoming messages. msgs is [blocks*n*n, d] with row u*n+v of
    each block holding the message u->v; mask is a boolean [blocks*n*n] of
    real edges. Nodes with no incoming edge aggregate to the zero vector."""
    md = _d(msgs)
    d = md.shape[1]
    cube = md.reshape(blocks, n, n, d)
    mk = np.asarray(mask, dtype=bool).reshape(blocks, n, n, 1)
    masked = np.where(mk, cube, -np.inf)
    out = masked.max(axis=1)
    has_in = mk.any(axis=1)
    out = np.where(has_in, out, 0.0)
    hit = (masked == out[:, None, :, :]) & mk
    first = np.cumsum(hit, axis=1) == 1
    sel = hit & first
    out = out.reshape(blocks * n, d)

    def bw(g):
        g4 = g.reshape(blocks, 1, n, d)
        return ((sel * g4).reshape(blocks * n * n, d),)

    return _make(out, [msgs], bw)


def segment_mean(a, sizes):
    """Mean-pool consecutive row blocks of the given sizes: [sum(sizes), d] -> [k, d]."""
    ad = _d(a)
    sizes = list(sizes)
    bounds = np.cumsum([0] + sizes)
    out = np.stack([ad[bounds[i]:bounds[i + 1]].mean(axis=0) for i in range(len(sizes))])

    def bw(g):
        ga = np.empty_like(ad)
        for i, s in enumerate(sizes):
            ga[bounds[i]:bounds[i + 1]] = g[i] / s
        return (ga,)

    return _make(out, [a], bw)


def linear(x, w, b):
    """y = xW + b as one fused primitive (the workhorse layer)."""
    xd, wd, bd = _d(x), _d(w), _d(b)
    if xd.shape[-1] != wd.shape[0]:
        raise ShapeError(f"linear {xd.shape} x {wd.shape}")
    out = xd @ wd + bd
    need_x = isinstance(x, Tensor)
    row_bias = bd.shape == out.shape[-1:] and out.ndim == 2

    if row_bias:
        def bw(g):
            gx = g @ wd.T if need_x else None
            return gx, xd.T @ g, g.sum(axis=0)
    else:
        def bw(g):
            gx = g @ wd.T if need_x else None
            return gx, xd.T @ g, _bcast_bw(g, bd.shape)

    return _make(out, [x, w, b], bw)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params, eps=1e-5, max_coords=24, rng=None):
    """Compare analytic gradients of a scalar-valued function against central
    finite differences; returns the worst relative error over sampled
    coordinates of every parameter tensor."""
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    analytic = {name: leaf_grad(t).copy() for name, t in params.items()}
    zero_grads(params.values())

    worst = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        coords = range(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = float(f().data)
            flat[c] = orig - eps
            dn = float(f().data)
            flat[c] = orig
            numeric = (up - dn) / (2 * eps)
            a = analytic[name].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
