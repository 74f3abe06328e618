"""Adam with bias correction, updating numpy buffers in place."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamHyper:
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if not (self.lr >= 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ContractError(f"invalid Adam hyperparameters {self}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              hyper: AdamHyper) -> None:
    """One Adam update; a missing gradient counts as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("params, grads and optimizer state differ in length")
    state.t += 1
    t = state.t
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ContractError(f"gradient dims {list(g.shape)} do not match parameter {p.dims}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if hyper.lr == 0:
            continue
        m_hat = m / c1
        v_hat = v / c2
        p.data -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], hyper: AdamHyper | None = None):
        self.params = list(params)
        self.hyper = hyper or AdamHyper()
        self.state = AdamState.zeros_like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.hyper)
