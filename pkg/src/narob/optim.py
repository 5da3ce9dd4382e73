"""Adam optimizer (with bias correction) and seeded parameter initialization."""

from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor


class AdamState:
    """First/second-moment accumulators keyed by parameter name, plus step count."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.step = 0


def adam_update(params: dict, grads: dict, state: AdamState,
                lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam step over the named parameter tensors."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {k}")
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def xavier_uniform(fan_in: int, fan_out: int, rng) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(params: dict, name: str, fan_in: int, fan_out: int, rng):
    """Register a weight (Xavier-uniform) and zero bias pair under `name`."""
    params[name + "/w"] = Tensor(xavier_uniform(fan_in, fan_out, rng))
    params[name + "/b"] = Tensor(np.zeros(fan_out))
