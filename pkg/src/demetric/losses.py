"""Training objective: pairwise metric loss plus regularizers.

The supervised term is a binomial deviance over cosine similarities of
all unordered within-batch pairs, with positive and negative pairs
weighted by their inverse counts so each side contributes its mean.
Activation decay penalizes embedding magnitude; the companion
orthogonality term keeps learner weights away from the all-zero
solution that would otherwise minimize it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, InvalidBatchError
from . import tensor as T
from .tensor import Tensor

_NORM_SQ_EPS = 1e-24


@dataclass
class LossConfig:
    alpha: float = 2.0
    beta: float = 0.5
    gamma_pos: float = 1.0
    gamma_neg: float = 35.0
    lambda0: float = 1.0
    lambda1: float = 0.014
    lambda2: float = 0.25


def pair_labels(labels) -> np.ndarray:
    """Boolean same-class matrix for a label vector."""
    labels = np.asarray(labels)
    return labels[:, None] == labels[None, :]


def _cosine_matrix(e: Tensor) -> Tensor:
    """Pairwise cosine similarities of the rows of ``e`` (differentiable)."""
    gram = T.matmul(e, T.transpose(e))
    sq_norms = T.diagonal(gram)
    if np.any(sq_norms.data < _NORM_SQ_EPS):
        raise DegenerateVectorError("embedding with (near-)zero norm in batch")
    inv = T.power(sq_norms, -0.5)
    return T.row_scale(T.col_scale(gram, inv), inv)


def binomial_deviance(bank, labels, cfg: LossConfig) -> Tensor:
    """Mean binomial deviance over learners, pair-count weighted.

    For each unordered pair the term is
    ``(1/w) * log(1 + exp(-(2s-1) * alpha * (D - beta) * gamma))`` with
    ``D`` the cosine similarity, ``gamma`` the per-sign penalty and
    ``w`` the count of pairs with the same sign.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if n < 2:
        raise InvalidBatchError(f"need at least 2 samples, got {n}")
    same = pair_labels(labels)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    n_pos = int((same & upper).sum())
    n_neg = int((~same & upper).sum())
    if n_pos == 0 or n_neg == 0:
        raise InvalidBatchError(
            f"batch needs both pair kinds, got {n_pos} positive / {n_neg} negative")

    gamma = np.where(same, cfg.gamma_pos, cfg.gamma_neg)
    sign = np.where(same, 1.0, -1.0)
    neg_a = Tensor(-sign * cfg.alpha * gamma)
    weights = np.zeros((n, n))
    weights[same & upper] = 1.0 / n_pos
    weights[~same & upper] = 1.0 / n_neg
    weights_t = Tensor(weights)

    total = None
    for e in bank.embeddings:
        cos = _cosine_matrix(e)
        exponent = T.mul(T.add(cos, -cfg.beta), neg_a)
        learner = T.tensor_sum(T.mul(T.softplus(exponent), weights_t))
        total = learner if total is None else T.add(total, learner)
    return T.mul(total, 1.0 / bank.n_learners)


def activation_decay(bank, cfg: LossConfig) -> Tensor:
    """Squared-magnitude penalty on all learner embeddings."""
    batch = bank.batch_size
    total = None
    for e in bank.embeddings:
        s = T.tensor_sum(T.square(e))
        total = s if total is None else T.add(total, s)
    return T.mul(total, cfg.lambda1 / (2.0 * bank.n_learners * batch))


def ntri_regularizer(learner_weights: list[Tensor], cfg: LossConfig) -> Tensor:
    """Penalty on the deviation of each ``w w^T`` from the identity."""
    total = None
    for w in learner_weights:
        gram = T.matmul(w, T.transpose(w))
        delta = T.sub(gram, Tensor(np.eye(gram.data.shape[0])))
        term = T.tensor_sum(T.square(delta))
        total = term if total is None else T.add(total, term)
    return T.mul(total, cfg.lambda2)


def total_loss(metric: Tensor, act: Tensor, ntri: Tensor, adv) -> Tensor:
    """Sum of the objective components (the adversary term may be 0)."""
    return T.add(T.add(T.add(metric, act), ntri), adv)
