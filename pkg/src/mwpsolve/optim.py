"""Adam with decoupled weight decay, over named parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter


class NonFiniteGradientError(ValueError):
    """A gradient contained NaN/inf; the update was rejected."""


@dataclass
class AdamState:
    """First/second-moment accumulators keyed by parameter name."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Parameter], **kw) -> "AdamState":
        return cls(m={n: np.zeros_like(p.data) for n, p in params.items()},
                   v={n: np.zeros_like(p.data) for n, p in params.items()},
                   **kw)


def adam_update(params: dict[str, Parameter], grads: dict[str, np.ndarray],
                state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam step plus a decoupled decay term lr*wd*theta.

    Mutates parameter data in place (the exclusive update phase between
    tapes). Rejects the whole update if any gradient is non-finite.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")

    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data -= lr * update
