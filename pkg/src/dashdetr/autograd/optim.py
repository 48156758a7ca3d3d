"""Adam with bias correction and per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(params: Sequence[Tensor], states: Sequence[AdamState], lr: float) -> None:
    """Apply one bias-corrected Adam update in place, then zero the grads."""
    if len(params) != len(states):
        raise ValueError(f"{len(params)} params but {len(states)} optimizer states")
    for p, st in zip(params, states):
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
    for p, st in zip(params, states):
        g = p.grad
        st.step += 1
        st.m *= st.beta1
        st.m += (1.0 - st.beta1) * g
        st.v *= st.beta2
        st.v += (1.0 - st.beta2) * (g * g)
        m_hat = st.m / (1.0 - st.beta1 ** st.step)
        v_hat = st.v / (1.0 - st.beta2 ** st.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + st.eps)
        p.grad = np.zeros_like(p.data)


@dataclass
class ParamGroup:
    params: list[Tensor]
    lr: float
    states: list[AdamState] = field(default_factory=list)


class Adam:
    """Thin owner of parameter groups, each stepped with its own learning rate."""

    def __init__(self, groups: Sequence[tuple[Sequence[Tensor], float]], beta1=0.9, beta2=0.999, eps=1e-8):
        self.groups = []
        for params, lr in groups:
            params = list(params)
            states = [AdamState.for_param(p, beta1=beta1, beta2=beta2, eps=eps) for p in params]
            self.groups.append(ParamGroup(params, float(lr), states))

    @property
    def step_count(self) -> int:
        for g in self.groups:
            if g.states:
                return g.states[0].step
        return 0

    def all_params(self) -> list[Tensor]:
        return [p for g in self.groups for p in g.params]

    def step(self) -> None:
        for g in self.groups:
            adam_step(g.params, g.states, g.lr)

    def zero_grad(self) -> None:
        for p in self.all_params():
            p.zero_grad()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total
