"""Adam with parameter groups and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingGradientError, ParameterError
from .tensor import Tensor


@dataclass
class ParamGroup:
    """A named set of parameters sharing a learning-rate multiplier."""

    id: str
    tensors: list[Tensor]
    lr_multiplier: float = 1.0

    def __post_init__(self):
        if self.lr_multiplier <= 0:
            raise ParameterError(f"lr_multiplier must be positive, got {self.lr_multiplier}")


@dataclass
class AdamState:
    """Optimizer hyperparameters plus per-parameter moment buffers.

    Weight decay is decoupled: it shrinks the weights directly and never
    enters the moment buffers.
    """

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-4
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(groups: list[ParamGroup], state: AdamState) -> None:
    """One bias-corrected Adam update over all groups; zeroes gradients.

    The effective learning rate of a group is ``state.lr *
    group.lr_multiplier``; both the moment update and the decoupled
    decay use it.
    """
    for group in groups:
        for i, p in enumerate(group.tensors):
            if p.grad is None:
                raise MissingGradientError(f"parameter {group.id}[{i}] has no gradient")

    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for group in groups:
        lr_eff = state.lr * group.lr_multiplier
        for i, p in enumerate(group.tensors):
            key = (group.id, i)
            g = p.grad
            m = state.m.get(key)
            if m is None:
                m = np.zeros_like(p.data)
                state.m[key] = m
                state.v[key] = np.zeros_like(p.data)
            v = state.v[key]
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
            if state.weight_decay:
                update = update + state.weight_decay * p.data
            p.data -= lr_eff * update
            p.grad = None
