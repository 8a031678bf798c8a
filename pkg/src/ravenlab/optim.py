"""ADAM optimizer with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(params, grads, state: AdamState, learning_rate: float):
    """One bias-corrected update; mutates params/state in place and returns them."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    sqrt_bias2 = np.sqrt(bias2)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"param {name!r}: grad shape {g.shape} != {p.shape}")
        # single-pass screen; the precise check only runs to name the culprit
        if not np.isfinite(float(np.sum(g, dtype=np.float64))):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        # p -= lr * (m / bias1) / (sqrt(v / bias2) + eps), with v-scaling folded
        # into the numerator and eps to keep allocations down
        denom = np.sqrt(v)
        denom += state.eps * sqrt_bias2
        update = m / denom
        update *= learning_rate * sqrt_bias2 / bias1
        p -= update.astype(p.dtype, copy=False)
    return params, state
