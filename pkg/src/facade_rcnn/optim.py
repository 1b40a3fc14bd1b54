"""Gradient-descent optimizers over lists of :class:`Tensor` parameters."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    """Hyper-parameters plus per-parameter moment buffers.

    ``first_moment``/``second_moment`` are populated only for the adaptive
    (Adam) variant.
    """

    learning_rate: float = 2e-4
    weight_decay: float = 0.0
    adaptive: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: Optional[Dict[int, np.ndarray]] = None
    second_moment: Optional[Dict[int, np.ndarray]] = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.adaptive:
            self.first_moment = {} if self.first_moment is None else self.first_moment
            self.second_moment = {} if self.second_moment is None else self.second_moment


def optimizer_step(params: List[Tensor], state: OptimState) -> None:
    """Update ``params`` in place from their gradients and zero the gradients.

    Weight decay is the coupled (L2) form: ``grad + weight_decay * param``.
    """
    for p in params:
        if p.grad is None:
            raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient")
    state.step_count += 1
    lr, wd = state.learning_rate, state.weight_decay
    for i, p in enumerate(params):
        g = p.grad + wd * p.data if wd else p.grad
        if state.adaptive:
            m = state.first_moment.setdefault(i, np.zeros_like(p.data))
            v = state.second_moment.setdefault(i, np.zeros_like(p.data))
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            mhat = m / (1 - state.beta1 ** state.step_count)
            vhat = v / (1 - state.beta2 ** state.step_count)
            p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
        else:
            p.data -= (lr * g).astype(p.dtype)
        p.grad = None


@dataclass
class SGD:
    params: List[Tensor]
    lr: float = 0.01
    weight_decay: float = 0.0
    state: OptimState = field(init=False)

    def __post_init__(self):
        self.state = OptimState(self.lr, self.weight_decay)

    def step(self):
        optimizer_step(self.params, self.state)


@dataclass
class Adam:
    params: List[Tensor]
    lr: float = 2e-4
    weight_decay: float = 0.0
    state: OptimState = field(init=False)

    def __post_init__(self):
        self.state = OptimState(self.lr, self.weight_decay, adaptive=True)

    def step(self):
        optimizer_step(self.params, self.state)
