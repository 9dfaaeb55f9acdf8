"""Training loop: batch sampling, steps, determinism, divergence."""

import numpy as np
import pytest

from demetric.data import GlyphDataset
from demetric.errors import DatasetError, DivergenceError, ParameterError
from demetric.losses import pair_labels
from demetric.model import BackboneConfig, DecoupledNet, ModelConfig
from demetric.train import TrainConfig, make_optimizer, sample_batch, train_model, train_step

TINY_BACKBONE = BackboneConfig(fnet=((1, 4, 2),), gnet=((4, 6, 2),))


def _toy_dataset(n_classes=4, per_class=5, size=16, seed=0):
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for cid in range(n_classes):
        proto = rng.uniform(0.0, 1.0, size=(1, size, size))
        for _ in range(per_class):
            images.append(np.clip(proto + rng.normal(0, 0.05, proto.shape), 0, 1))
            labels.append(cid)
    return GlyphDataset(images=np.stack(images), labels=np.array(labels))


def _tiny_model(seed=0, **kwargs):
    cfg = ModelConfig(I=kwargs.pop("I", 1), J=kwargs.pop("J", 2),
                      d=kwargs.pop("d", 8), **kwargs)
    return DecoupledNet(cfg, TINY_BACKBONE, seed=seed)


class TestSampleBatch:
    def test_pair_structure_of_minimal_batch(self):
        """m=2, k=2 gives 2 positive and 4 negative pairs."""
        ds = _toy_dataset(n_classes=2, per_class=3)
        images, labels = sample_batch(ds, 2, 2, np.random.default_rng(0))
        assert images.shape[0] == 4
        same = pair_labels(labels)
        upper = np.triu(np.ones((4, 4), dtype=bool), k=1)
        assert int((same & upper).sum()) == 2
        assert int((~same & upper).sum()) == 4

    def test_same_seed_identical_batches(self):
        ds = _toy_dataset()
        a = sample_batch(ds, 3, 2, np.random.default_rng(42))
        b = sample_batch(ds, 3, 2, np.random.default_rng(42))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_class_frequencies_uniform_within_three_sigma(self):
        """10k draws of m=2 over 5 classes: per-class inclusion counts
        concentrate around 4000 with sigma = sqrt(n p (1-p))."""
        ds = _toy_dataset(n_classes=5, per_class=2)
        rng = np.random.default_rng(7)
        counts = np.zeros(5)
        draws = 10_000
        for _ in range(draws):
            _, labels = sample_batch(ds, 2, 2, rng)
            for cid in np.unique(labels):
                counts[cid] += 1
        p = 2 / 5
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) < 3 * sigma)

    def test_insufficient_classes_rejected(self):
        ds = _toy_dataset(n_classes=2, per_class=5)
        with pytest.raises(DatasetError):
            sample_batch(ds, 3, 2, np.random.default_rng(0))

    def test_insufficient_images_rejected(self):
        ds = _toy_dataset(n_classes=3, per_class=2)
        with pytest.raises(DatasetError):
            sample_batch(ds, 2, 4, np.random.default_rng(0))


class TestTrainStep:
    def test_zero_learning_rate_keeps_parameters(self):
        model = _tiny_model()
        ds = _toy_dataset(size=16)
        cfg = TrainConfig(base_lr=0.0, iterations=1, m=2, k=2)
        groups, state = make_optimizer(model, cfg)
        before = {k: v.data.copy() for k, v in model.named_parameters().items()}
        images, labels = sample_batch(ds, 2, 2, np.random.default_rng(0))
        comps = train_step(model, images, labels, cfg, groups, state)
        assert np.isfinite(comps["total"])
        for k, v in model.named_parameters().items():
            np.testing.assert_array_equal(before[k], v.data)

    def test_single_branch_has_no_adversary_term(self):
        model = _tiny_model(J=1)
        assert model.adversaries is None
        ds = _toy_dataset(size=16)
        cfg = TrainConfig(iterations=1, m=2, k=2)
        groups, state = make_optimizer(model, cfg)
        images, labels = sample_batch(ds, 2, 2, np.random.default_rng(0))
        comps = train_step(model, images, labels, cfg, groups, state)
        assert comps["adv"] == 0.0

    def test_lambda0_zero_skips_adversary_gracefully(self):
        model = _tiny_model(J=2)
        ds = _toy_dataset(size=16)
        cfg = TrainConfig(lambda0=0.0, iterations=1, m=2, k=2)
        groups, state = make_optimizer(model, cfg)
        assert all(t is not adv for g in groups for t in g.tensors
                   for adv in (model.adversaries[0].a1, model.adversaries[0].a2))
        images, labels = sample_batch(ds, 2, 2, np.random.default_rng(0))
        comps = train_step(model, images, labels, cfg, groups, state)
        assert comps["adv"] == 0.0

    def test_fifty_steps_overfit_a_fixed_microbatch(self):
        """The smoothed metric loss on one repeated batch must fall."""
        model = _tiny_model(seed=1)
        ds = _toy_dataset(size=16, seed=1)
        cfg = TrainConfig(base_lr=3e-3, iterations=50, m=2, k=2, lambda0=0.1)
        groups, state = make_optimizer(model, cfg)
        images, labels = sample_batch(ds, 2, 2, np.random.default_rng(1))
        trace = [train_step(model, images, labels, cfg, groups, state)["metric"]
                 for _ in range(50)]
        assert np.mean(trace[-5:]) < np.mean(trace[:5])

    def test_divergence_aborts_loudly(self):
        model = _tiny_model()
        model.learners[0][0].data[:] = np.nan
        ds = _toy_dataset(size=16)
        cfg = TrainConfig(iterations=1, m=2, k=2)
        groups, state = make_optimizer(model, cfg)
        images, labels = sample_batch(ds, 2, 2, np.random.default_rng(0))
        with pytest.raises(DivergenceError):
            train_step(model, images, labels, cfg, groups, state)


class TestTrainModel:
    def test_determinism_bitwise_after_ten_steps(self):
        def run():
            model = _tiny_model(seed=3)
            ds = _toy_dataset(seed=3, size=16)
            cfg = TrainConfig(base_lr=1e-3, iterations=10, m=2, k=2, seed=5)
            train_model(model, ds, cfg)
            return {k: v.data.copy() for k, v in model.named_parameters().items()}

        a, b = run(), run()
        for k in a:
            assert np.array_equal(a[k], b[k]), k

    def test_history_and_log_file(self, tmp_path):
        model = _tiny_model(seed=4)
        ds = _toy_dataset(seed=4, size=16)
        cfg = TrainConfig(iterations=3, m=2, k=2)
        log = tmp_path / "log.csv"
        history = train_model(model, ds, cfg, log_path=log)
        assert len(history) == 3
        lines = log.read_text().strip().splitlines()
        assert lines[0] == "step,L_metric,L_act,L_ntri,L_adv"
        assert len(lines) == 4

    def test_eval_hook_fires_on_schedule(self):
        model = _tiny_model(seed=5)
        ds = _toy_dataset(seed=5, size=16)
        calls = []
        cfg = TrainConfig(iterations=5, m=2, k=2, eval_every=2)
        train_model(model, ds, cfg, eval_hook=calls.append)
        assert calls == [2, 4, 5]

    def test_invalid_batch_geometry_rejected(self):
        with pytest.raises(ParameterError):
            TrainConfig(m=1, k=4)
        with pytest.raises(ParameterError):
            TrainConfig(m=4, k=1)
