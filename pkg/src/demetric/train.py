"""Balanced-batch training loop for the decoupled model."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .cam import adversary_loss
from .data import GlyphDataset
from .errors import DatasetError, DivergenceError, ParameterError
from .losses import LossConfig, activation_decay, binomial_deviance, ntri_regularizer, total_loss
from .model import DecoupledNet
from .optim import AdamState, ParamGroup, adam_step
from .tensor import Tensor


@dataclass
class TrainConfig:
    """Optimizer settings, loss weights, and batch layout.

    ``m`` classes with ``k`` images each per batch; both must be at
    least 2 so every batch carries positive and negative pairs.
    """

    base_lr: float = 1e-5
    learner_lr_multiplier: float = 10.0
    weight_decay: float = 2e-4
    lambda0: float = 1.0
    lambda1: float = 0.014
    lambda2: float = 0.25
    alpha: float = 2.0
    beta: float = 0.5
    gamma_neg: float = 35.0
    T: int = 10
    iterations: int = 100
    m: int = 4
    k: int = 4
    seed: int = 0
    eval_every: int = 0

    def __post_init__(self):
        if self.m < 2 or self.k < 2:
            raise ParameterError(f"need m >= 2 and k >= 2, got m={self.m}, k={self.k}")
        if self.T < 1 or self.iterations < 0:
            raise ParameterError("T must be >= 1 and iterations >= 0")

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, beta=self.beta, gamma_neg=self.gamma_neg,
                          lambda0=self.lambda0, lambda1=self.lambda1, lambda2=self.lambda2)


def sample_batch(dataset: GlyphDataset, m: int, k: int,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``m`` distinct classes with ``k`` images each."""
    labels = dataset.labels
    ids, counts = np.unique(labels, return_counts=True)
    eligible = ids[counts >= k]
    if len(eligible) < m:
        raise DatasetError(
            f"need {m} classes with at least {k} images, dataset offers {len(eligible)}")
    chosen = rng.choice(np.sort(eligible), size=m, replace=False)
    picks = []
    for cid in chosen:
        pool = np.flatnonzero(labels == cid)
        picks.append(rng.choice(pool, size=k, replace=False))
    idx = np.concatenate(picks)
    return dataset.images[idx], labels[idx]


def make_optimizer(model: DecoupledNet, cfg: TrainConfig) -> tuple[list[ParamGroup], AdamState]:
    """Parameter groups (learners at the boosted rate) plus Adam state.

    Adversary parameters join only when the adversarial term is live,
    since they receive gradients from nothing else.
    """
    train_adv = model.adversaries is not None and cfg.lambda0 != 0.0
    backbone = [k for stack in model.fnet for k in stack]
    backbone += [k for stack in model.gnet for k in stack]
    if model.cams is not None:
        backbone += [t for row in model.cams for cam in row for t in (cam.w1, cam.w2)]
    if train_adv:
        backbone += [t for adv in model.adversaries for t in (adv.a1, adv.a2)]
    groups = [
        ParamGroup(id="backbone", tensors=backbone, lr_multiplier=1.0),
        ParamGroup(id="learners", tensors=model.learner_weight_list(),
                   lr_multiplier=cfg.learner_lr_multiplier),
    ]
    state = AdamState(lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    return groups, state


def train_step(model: DecoupledNet, images: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, groups: list[ParamGroup], state: AdamState) -> dict:
    """One optimization step; returns the scalar loss components."""
    lcfg = cfg.loss_config()
    bank = model.forward_all_scales(images)
    metric = binomial_deviance(bank, labels, lcfg)
    act = activation_decay(bank, lcfg)
    ntri = ntri_regularizer(model.learner_weight_list(), lcfg)
    if model.adversaries is not None and cfg.lambda0 != 0.0:
        adv = None
        for i in range(model.config.I):
            term = adversary_loss(bank.scale_slice(i), model.adversaries[i], cfg.lambda0)
            adv = term if adv is None else adv + term
    else:
        adv = Tensor(0.0)
    total = total_loss(metric, act, ntri, adv)
    components = {
        "total": float(total.data),
        "metric": float(metric.data),
        "act": float(act.data),
        "ntri": float(ntri.data),
        "adv": float(adv.data),
    }
    if not np.isfinite(components["total"]):
        raise DivergenceError(f"non-finite loss at step {state.t + 1}: {components}")
    total.backward()
    adam_step(groups, state)
    return components


def train_model(model: DecoupledNet, dataset: GlyphDataset, cfg: TrainConfig,
                log_path=None, eval_hook=None) -> list[dict]:
    """Run the full loop; optionally log per-step components as CSV.

    ``eval_hook(iteration)`` fires every ``cfg.eval_every`` steps and
    once more after the last step.
    """
    rng = np.random.default_rng(cfg.seed)
    groups, state = make_optimizer(model, cfg)
    history = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(["step", "L_metric", "L_act", "L_ntri", "L_adv"])
    try:
        for it in range(cfg.iterations):
            images, labels = sample_batch(dataset, cfg.m, cfg.k, rng)
            comps = train_step(model, images, labels, cfg, groups, state)
            history.append(comps)
            if writer is not None:
                writer.writerow([it + 1, comps["metric"], comps["act"],
                                 comps["ntri"], comps["adv"]])
            if (eval_hook is not None and cfg.eval_every
                    and ((it + 1) % cfg.eval_every == 0 or it + 1 == cfg.iterations)):
                eval_hook(it + 1)
    finally:
        if log_file is not None:
            log_file.close()
    return history
