"""Adaptive-moment gradient descent and a finite-difference gradient oracle."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus the shared step counter."""

    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Tensor], grads, state: AdamState) -> AdamState:
    """One bias-corrected adaptive-moment update; parameters change in place.

    ``grads`` is either the dict returned by ``Tape.grad`` or a list aligned
    with ``params``.
    """
    if isinstance(grads, dict):
        grads = [grads[p] for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("params, grads and state must have matching lengths")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        gd = g.data if isinstance(g, Tensor) else np.asarray(g)
        if gd.shape != p.data.shape:
            raise ValueError(f"gradient shape {gd.shape} does not match parameter shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * gd
        v *= b2
        v += (1.0 - b2) * gd * gd
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Convenience wrapper owning an :class:`AdamState` for a parameter list."""

    def __init__(self, params: Sequence[Tensor], learning_rate=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState.for_params(
            self.params, learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps
        )

    def step(self, grads) -> None:
        adam_step(self.params, grads, self.state)


def finite_difference_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_param: int = 50,
    seed: int = 0,
) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    Error per coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12);
    coordinates are subsampled deterministically when a parameter is large.
    """
    params = list(params)
    with Tape() as tape:
        loss = f(params)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite at the evaluation point")
    grads = tape.grad(loss, params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        g = grads[p].data.reshape(-1)
        n = p.data.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        flat = p.data.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = float(f(params).data)
            flat[idx] = orig - eps
            f_minus = float(f(params).data)
            flat[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("function evaluation is not finite during differencing")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = float(g[idx])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
            worst = max(worst, err)
    return worst
