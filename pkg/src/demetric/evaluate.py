"""Recall@K retrieval evaluation over cosine similarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, ParameterError, SplitContaminationError
from .model import DecoupledNet


@dataclass
class RetrievalIndex:
    """Unit-norm gallery rows with labels; queries default to the
    gallery itself with self-matches excluded."""

    embeddings: np.ndarray  # (n, D), L2-normalized rows
    labels: np.ndarray
    queries: np.ndarray | None = None
    query_labels: np.ndarray | None = None


def make_index(embeddings: np.ndarray, labels) -> RetrievalIndex:
    """Normalize rows and build a self-querying index."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(embeddings, axis=1)
    if np.any(norms <= 1e-12):
        raise DegenerateVectorError("gallery embedding with (near-)zero norm")
    return RetrievalIndex(embeddings=embeddings / norms[:, None],
                          labels=np.asarray(labels))


def recall_at_k(index: RetrievalIndex, k: int) -> float:
    """Fraction of queries with a same-class gallery item among their
    K nearest neighbors (cosine similarity, ties to the lower index)."""
    gallery = index.embeddings
    n = gallery.shape[0]
    if k >= n:
        raise ParameterError(f"K = {k} must be below the gallery size {n}")
    if k < 1:
        raise ParameterError(f"K must be at least 1, got {k}")
    self_mode = index.queries is None
    queries = gallery if self_mode else index.queries
    qlabels = index.labels if self_mode else index.query_labels
    sims = queries @ gallery.T
    if self_mode:
        np.fill_diagonal(sims, -np.inf)
    # stable argsort on -sims resolves equal similarities to the lower index
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    neighbor_labels = index.labels[order]
    hits = (neighbor_labels == np.asarray(qlabels)[:, None]).any(axis=1)
    return float(hits.mean())


def recall_table(embeddings: np.ndarray, labels, ks) -> dict[int, float]:
    index = make_index(embeddings, labels)
    return {int(k): recall_at_k(index, int(k)) for k in ks}


@dataclass
class ZeroShotReport:
    recalls: dict[int, float]
    per_root_recall1: dict[int, float]
    n_images: int


def evaluate_zero_shot(model: DecoupledNet, images: np.ndarray, labels,
                       ks=(1, 2, 4, 8), seen_class_ids=None,
                       per_root: bool = True) -> ZeroShotReport:
    """Embed an unseen-class image set and compute its recall table.

    When ``seen_class_ids`` is given, any overlap with the evaluation
    labels aborts: the zero-shot protocol requires disjoint class sets.
    """
    labels = np.asarray(labels)
    if seen_class_ids is not None:
        overlap = set(labels.tolist()) & set(int(c) for c in seen_class_ids)
        if overlap:
            raise SplitContaminationError(
                f"evaluation classes overlap the training classes: {sorted(overlap)}")
    images = np.asarray(images, dtype=np.float64)
    holistic_chunks = []
    root_chunks: list[list[np.ndarray]] = [[] for _ in range(model.config.I)]
    for lo in range(0, images.shape[0], 64):
        bank = model.forward_all_scales(images[lo:lo + 64])
        holistic_chunks.append(model.holistic_embed(bank))
        if per_root:
            for i in range(model.config.I):
                root_chunks[i].append(model.root_embed(bank, i))
    holistic = np.concatenate(holistic_chunks, axis=0)
    recalls = recall_table(holistic, labels, ks)
    per_root_r1: dict[int, float] = {}
    if per_root:
        for i in range(model.config.I):
            root = np.concatenate(root_chunks[i], axis=0)
            per_root_r1[i] = recall_table(root, labels, [1])[1]
    return ZeroShotReport(recalls=recalls, per_root_recall1=per_root_r1,
                          n_images=int(images.shape[0]))
