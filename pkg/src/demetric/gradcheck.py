"""Finite-difference verification of every differentiable operation.

Each entry builds a scalar loss from randomized small tensors and
compares analytic gradients against central differences (h = 1e-5,
relative error below 1e-4 with an absolute floor of 1e-7; the
end-to-end model check allows 1e-3).  Gradient reversal is exempt from
differencing by construction; its negation contract is verified by a
dual backward pass instead.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .cam import AdversaryNet, adversary_loss, cam_forward, init_cam
from .losses import LossConfig, activation_decay, binomial_deviance, ntri_regularizer
from .model import BackboneConfig, DecoupledNet, LearnerBank, ModelConfig
from .tensor import Tensor, gradient_check

DEFAULT_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape, margin=0.2):
    vals = rng.uniform(margin, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(vals, requires_grad=True)


def _check_entries(rng):
    a = _rand(rng, 3, 4)
    b = _rand(rng, 4, 2)
    wm = Tensor(rng.standard_normal((3, 2)))
    yield "matmul", [a, b], lambda: T.tensor_sum(T.mul(T.matmul(a, b), wm)), DEFAULT_TOL

    x1 = _rand(rng, 2, 4, 4)
    k1 = _rand(rng, 3, 2, 3, 3)
    w1 = Tensor(rng.standard_normal((3, 4, 4)))
    yield "conv2d_stride1", [x1, k1], lambda: T.tensor_sum(T.mul(T.conv2d(x1, k1, 1), w1)), 1e-5

    x2 = _rand(rng, 1, 2, 5, 5)
    k2 = _rand(rng, 2, 2, 3, 3)
    w2 = Tensor(rng.standard_normal((1, 2, 3, 3)))
    yield "conv2d_stride2", [x2, k2], lambda: T.tensor_sum(T.mul(T.conv2d(x2, k2, 2), w2)), 1e-5

    xr = _away_from_zero(rng, 6)
    wr = Tensor(rng.standard_normal(6))
    yield "relu", [xr], lambda: T.tensor_sum(T.mul(T.relu(xr), wr)), DEFAULT_TOL

    xs = _rand(rng, 5)
    ws = Tensor(rng.standard_normal(5))
    yield "sigmoid", [xs], lambda: T.tensor_sum(T.mul(T.sigmoid(xs), ws)), DEFAULT_TOL

    xp = _rand(rng, 5, lo=-3.0, hi=3.0)
    wp = Tensor(rng.standard_normal(5))
    yield "softplus", [xp], lambda: T.tensor_sum(T.mul(T.softplus(xp), wp)), DEFAULT_TOL

    ea, eb = _rand(rng, 4), _rand(rng, 4)
    yield "add_mul_sub", [ea, eb], lambda: T.tensor_sum(T.mul(T.add(ea, eb), T.sub(ea, eb))), DEFAULT_TOL

    eq = _rand(rng, 4)
    yield "square", [eq], lambda: T.tensor_sum(T.square(eq)), DEFAULT_TOL

    pw = Tensor(rng.uniform(0.5, 2.0, size=5), requires_grad=True)
    yield "power", [pw], lambda: T.tensor_sum(T.power(pw, -0.5)), DEFAULT_TOL

    mm = _rand(rng, 3, 3)
    yield "diagonal", [mm], lambda: T.tensor_sum(T.square(T.diagonal(mm))), DEFAULT_TOL

    rs = _rand(rng, 3, 4)
    sv = Tensor(rng.uniform(0.5, 1.5, size=3), requires_grad=True)
    yield "row_scale", [rs, sv], lambda: T.tensor_sum(T.square(T.row_scale(rs, sv))), DEFAULT_TOL

    cv = Tensor(rng.uniform(0.5, 1.5, size=4), requires_grad=True)
    yield "col_scale", [rs, cv], lambda: T.tensor_sum(T.square(T.col_scale(rs, cv))), DEFAULT_TOL

    tp = _rand(rng, 2, 5)
    yield "transpose_reshape", [tp], lambda: T.tensor_sum(T.square(T.reshape(T.transpose(tp), (10,)))), DEFAULT_TOL

    pa, pb = _rand(rng, 3), _rand(rng, 2)
    wc = Tensor(rng.standard_normal(5))
    yield "concat_narrow", [pa, pb], lambda: T.tensor_sum(T.mul(T.concat([pa, pb])[1:4], wc[1:4])), DEFAULT_TOL

    ap = _rand(rng, 2, 3, 3)
    wa = Tensor(rng.standard_normal(2))
    yield "spatial_avg_pool", [ap], lambda: T.tensor_sum(T.mul(T.spatial_avg_pool(ap), wa)), DEFAULT_TOL

    u = _rand(rng, 2, 3, 4, 4)
    gt = Tensor(rng.uniform(0.2, 0.8, size=(2, 3)), requires_grad=True)
    wg = Tensor(rng.standard_normal((2, 3, 4, 4)))
    yield "scale_channels", [u, gt], lambda: T.tensor_sum(T.mul(T.scale_channels(u, gt), wg)), DEFAULT_TOL


def _loss_entries(rng):
    cfg = LossConfig()
    e1 = _rand(rng, 4, 5)
    e2 = _rand(rng, 4, 5)
    labels = np.array([0, 0, 1, 1])

    def deviance():
        bank = LearnerBank(1, 2, [e1, e2])
        return binomial_deviance(bank, labels, cfg)

    yield "binomial_deviance", [e1, e2], deviance, DEFAULT_TOL

    def act():
        bank = LearnerBank(1, 2, [e1, e2])
        return activation_decay(bank, cfg)

    yield "activation_decay", [e1, e2], act, DEFAULT_TOL

    w = _rand(rng, 3, 6)
    yield "ntri_regularizer", [w], lambda: ntri_regularizer([w], cfg), DEFAULT_TOL

    net = AdversaryNet(a1=_rand(rng, 64, 5), a2=_rand(rng, 64, 64))
    ea = _rand(rng, 3, 5)
    eb = _rand(rng, 3, 5)
    yield "adversary_loss_net_params", [net.a1, net.a2], \
        lambda: adversary_loss([ea, eb], net, 1.0), DEFAULT_TOL

    cam = init_cam(3, rng)
    uc = _rand(rng, 2, 3, 4, 4)
    wc = Tensor(rng.standard_normal((2, 3, 4, 4)))
    yield "cam_forward", [uc, cam.w1, cam.w2], \
        lambda: T.tensor_sum(T.mul(cam_forward(uc, cam), wc)), DEFAULT_TOL


def _grad_reverse_contract(rng) -> float:
    """Max elementwise deviation of reversed vs negated plain gradients."""
    x = _rand(rng, 3, 4)
    w = Tensor(rng.standard_normal((3, 4)))

    x.zero_grad()
    T.tensor_sum(T.mul(T.square(T.grad_reverse(x)), w)).backward()
    reversed_grad = x.grad.copy()

    x.zero_grad()
    T.tensor_sum(T.mul(T.square(x), w)).backward()
    plain_grad = x.grad.copy()

    return float(np.max(np.abs(reversed_grad + plain_grad)))


def _end_to_end(rng) -> float:
    config = ModelConfig(I=1, J=2, d=8, walk_steps=3)
    backbone = BackboneConfig(fnet=((1, 3, 2),), gnet=((3, 4, 2),))
    model = DecoupledNet(config, backbone, seed=7)
    images = rng.uniform(0.0, 1.0, size=(4, 1, 8, 8))
    labels = np.array([0, 0, 1, 1])
    cfg = LossConfig()

    def build():
        bank = model.forward_all_scales(images)
        return binomial_deviance(bank, labels, cfg)

    params = [p for name, p in model.named_parameters().items() if not name.startswith("adv")]
    return gradient_check(build, params, rel_tol=END_TO_END_TOL, max_coords=12,
                          rng=np.random.default_rng(3), raise_on_fail=False)


def run_suite(seed: int = 0) -> list[tuple[str, float, float]]:
    """Run every check; returns (name, max relative error, tolerance)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, tensors, build, tol in list(_check_entries(rng)) + list(_loss_entries(rng)):
        err = gradient_check(build, tensors, rel_tol=tol, raise_on_fail=False)
        results.append((name, err, tol))
    results.append(("grad_reverse_contract", _grad_reverse_contract(rng), 1e-12))
    results.append(("end_to_end_micro_model", _end_to_end(rng), END_TO_END_TOL))
    return results
