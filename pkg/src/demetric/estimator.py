"""Scikit-learn estimator facade over the decoupled embedding model.

``fit`` trains on labeled seen-class images, ``transform`` maps images
to holistic unit-per-learner embeddings ready for cosine retrieval, so
the model drops into sklearn pipelines and neighbor searches.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import GlyphDataset
from .model import BackboneConfig, DecoupledNet, ModelConfig
from .train import TrainConfig, train_model


def _as_image_stack(X, image_size: int) -> np.ndarray:
    """Accept (n, S*S), (n, S, S) or (n, 1, S, S) and return (n, 1, S, S)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        check_array(X)
        side = int(np.sqrt(X.shape[1]))
        if side * side != X.shape[1] or side != image_size:
            raise ValueError(
                f"flat rows of length {X.shape[1]} are not {image_size}x{image_size} images")
        return X.reshape(-1, 1, image_size, image_size)
    if X.ndim == 3:
        X = X[:, None, :, :]
    if X.ndim != 4 or X.shape[1] != 1 or X.shape[2] != image_size or X.shape[3] != image_size:
        raise ValueError(f"expected (n, 1, {image_size}, {image_size}) images, got {X.shape}")
    check_array(X.reshape(X.shape[0], -1))
    return X


class DecoupledEmbedder(BaseEstimator, TransformerMixin):
    """Trainable image-to-embedding transformer.

    Parameters mirror the training protocol: ``n_scales`` object
    attention stages, ``n_branches`` channel-attention learners per
    stage, ``embedding_dim`` total width, and the three loss weights
    (adversary, activation decay, weight orthogonality).
    """

    def __init__(self, n_scales=1, n_branches=2, embedding_dim=64, iterations=200,
                 base_lr=1e-3, learner_lr_multiplier=10.0, weight_decay=2e-4,
                 adversary_weight=1.0, activation_decay_weight=0.014,
                 orthogonality_weight=0.25, batch_classes=4, batch_per_class=4,
                 walk_steps=10, image_size=32, random_state=0):
        self.n_scales = n_scales
        self.n_branches = n_branches
        self.embedding_dim = embedding_dim
        self.iterations = iterations
        self.base_lr = base_lr
        self.learner_lr_multiplier = learner_lr_multiplier
        self.weight_decay = weight_decay
        self.adversary_weight = adversary_weight
        self.activation_decay_weight = activation_decay_weight
        self.orthogonality_weight = orthogonality_weight
        self.batch_classes = batch_classes
        self.batch_per_class = batch_per_class
        self.walk_steps = walk_steps
        self.image_size = image_size
        self.random_state = random_state

    def fit(self, X, y):
        """Train the embedding on labeled seen-class images."""
        images = _as_image_stack(X, self.image_size)
        y = np.asarray(y)
        if y.shape[0] != images.shape[0]:
            raise ValueError(f"got {images.shape[0]} images but {y.shape[0]} labels")
        config = ModelConfig(I=self.n_scales, J=self.n_branches, d=self.embedding_dim,
                             walk_steps=self.walk_steps)
        self.model_ = DecoupledNet(config, BackboneConfig(), seed=self.random_state)
        cfg = TrainConfig(base_lr=self.base_lr,
                          learner_lr_multiplier=self.learner_lr_multiplier,
                          weight_decay=self.weight_decay,
                          lambda0=self.adversary_weight,
                          lambda1=self.activation_decay_weight,
                          lambda2=self.orthogonality_weight,
                          T=self.walk_steps, iterations=self.iterations,
                          m=self.batch_classes, k=self.batch_per_class,
                          seed=self.random_state)
        dataset = GlyphDataset(images=images, labels=y.astype(np.int64))
        self.history_ = train_model(self.model_, dataset, cfg)
        self.classes_ = np.unique(y)
        return self

    def transform(self, X) -> np.ndarray:
        """Holistic embeddings, one row per image."""
        check_is_fitted(self, "model_")
        images = _as_image_stack(X, self.image_size)
        return self.model_.embed_images(images)
