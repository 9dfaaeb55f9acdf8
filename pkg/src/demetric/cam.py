"""Channel attention with an adversarial diversity constraint.

Each channel-attention module squeezes a feature map to a channel
descriptor, runs it through a bias-free two-layer gate (hidden width
64, ReLU then sigmoid), and reweights the channels.  Parallel modules
feeding a shared trunk would happily collapse onto the same gating, so
a small adversary network is trained to *minimize* the discrepancy
between branch embeddings while, through a gradient-reversal node, the
branches themselves are pushed to maximize it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InsufficientBranchesError
from . import tensor as T
from .tensor import Tensor

GATE_HIDDEN = 64
ADVERSARY_HIDDEN = 64
ADVERSARY_OUT = 64


@dataclass
class CamParams:
    """Bias-free squeeze gate: (C,) -> 64 -> (C,) channel weights."""

    w1: Tensor  # (64, C)
    w2: Tensor  # (C, 64)

    @property
    def channels(self) -> int:
        return self.w1.data.shape[1]


def init_cam(channels: int, rng: np.random.Generator) -> CamParams:
    s1 = 1.0 / np.sqrt(channels)
    s2 = 1.0 / np.sqrt(GATE_HIDDEN)
    return CamParams(
        w1=Tensor(rng.normal(0.0, s1, size=(GATE_HIDDEN, channels)), requires_grad=True),
        w2=Tensor(rng.normal(0.0, s2, size=(channels, GATE_HIDDEN)), requires_grad=True),
    )


def cam_gates(u: Tensor, params: CamParams) -> Tensor:
    """Per-channel gate vector in (0, 1): sigmoid(W2 relu(W1 pool(U)))."""
    pooled = T.spatial_avg_pool(u)
    squeeze = pooled.data.ndim == 1
    if squeeze:
        pooled = T.reshape(pooled, (1, -1))
    if pooled.data.shape[1] != params.channels:
        raise DimensionError(
            f"feature map has {pooled.data.shape[1]} channels, gate expects {params.channels}")
    hidden = T.relu(T.matmul(pooled, T.transpose(params.w1)))
    gates = T.sigmoid(T.matmul(hidden, T.transpose(params.w2)))
    if squeeze:
        gates = T.reshape(gates, (-1,))
    return gates


def cam_forward(u: Tensor, params: CamParams) -> Tensor:
    """Reweight each channel of ``u`` by its learned gate."""
    return T.scale_channels(u, cam_gates(u, params))


@dataclass
class AdversaryNet:
    """Two bias-free linear layers with a ReLU between them.

    One instance serves all branches at a given scale; its parameters
    descend on the discrepancy loss while the branches, receiving
    reversed gradients, ascend on it.
    """

    a1: Tensor  # (64, in_dim)
    a2: Tensor  # (64, 64)

    def forward(self, e: Tensor) -> Tensor:
        squeeze = e.data.ndim == 1
        if squeeze:
            e = T.reshape(e, (1, -1))
        h = T.relu(T.matmul(e, T.transpose(self.a1)))
        out = T.matmul(h, T.transpose(self.a2))
        if squeeze:
            out = T.reshape(out, (-1,))
        return out


def init_adversary(in_dim: int, rng: np.random.Generator) -> AdversaryNet:
    s1 = 1.0 / np.sqrt(in_dim)
    s2 = 1.0 / np.sqrt(ADVERSARY_HIDDEN)
    return AdversaryNet(
        a1=Tensor(rng.normal(0.0, s1, size=(ADVERSARY_HIDDEN, in_dim)), requires_grad=True),
        a2=Tensor(rng.normal(0.0, s2, size=(ADVERSARY_OUT, ADVERSARY_HIDDEN)), requires_grad=True),
    )


def adversary_loss(embeddings: list[Tensor], net: AdversaryNet, lambda0: float = 1.0) -> Tensor:
    """Discrepancy of adversary outputs over unordered branch pairs.

    Each embedding (a vector or a batch-rows matrix) passes through
    gradient reversal and then the adversary; the loss is lambda0 times
    the sum over pairs j < j' of the mean-per-sample squared L2
    difference of the outputs.
    """
    if len(embeddings) < 2:
        raise InsufficientBranchesError(
            f"adversary loss needs at least 2 branches, got {len(embeddings)}")
    dim = embeddings[0].data.shape[-1]
    for e in embeddings:
        if e.data.shape[-1] != dim:
            raise DimensionError("branch embeddings must share their length")
    outs = [net.forward(T.grad_reverse(e)) for e in embeddings]
    rows = 1 if embeddings[0].data.ndim == 1 else embeddings[0].data.shape[0]
    loss = None
    for j in range(len(outs)):
        for jp in range(j + 1, len(outs)):
            pair = T.tensor_sum(T.square(T.sub(outs[j], outs[jp])))
            loss = pair if loss is None else T.add(loss, pair)
    return T.mul(loss, lambda0 / rows)
