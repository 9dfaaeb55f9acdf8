"""Hybrid-attention decoupled embedding learning for zero-shot retrieval."""

from .tensor import Tensor, gradient_check
from .optim import AdamState, ParamGroup, adam_step
from .oam import (AttentionProposal, CropBox, WeightMatrix, build_weight_matrix,
                  crop_and_zoom, crop_box, fuse_proposals, propagate)
from .cam import AdversaryNet, CamParams, adversary_loss, cam_forward, cam_gates
from .losses import (LossConfig, activation_decay, binomial_deviance,
                     ntri_regularizer, total_loss)
from .model import BackboneConfig, DecoupledNet, LearnerBank, ModelConfig
from .train import TrainConfig, sample_batch, train_model, train_step
from .evaluate import (RetrievalIndex, ZeroShotReport, evaluate_zero_shot,
                       make_index, recall_at_k, recall_table)
from .data import (GlyphDataset, GlyphSpec, ZeroShotSplit, default_split,
                   generate_dataset, load_dataset, read_image, save_dataset,
                   verify_split, write_pgm)
from .estimator import DecoupledEmbedder

__version__ = "0.1.0"

__all__ = [
    "Tensor", "gradient_check",
    "AdamState", "ParamGroup", "adam_step",
    "AttentionProposal", "CropBox", "WeightMatrix", "build_weight_matrix",
    "crop_and_zoom", "crop_box", "fuse_proposals", "propagate",
    "AdversaryNet", "CamParams", "adversary_loss", "cam_forward", "cam_gates",
    "LossConfig", "activation_decay", "binomial_deviance", "ntri_regularizer", "total_loss",
    "BackboneConfig", "DecoupledNet", "LearnerBank", "ModelConfig",
    "TrainConfig", "sample_batch", "train_model", "train_step",
    "RetrievalIndex", "ZeroShotReport", "evaluate_zero_shot", "make_index",
    "recall_at_k", "recall_table",
    "GlyphDataset", "GlyphSpec", "ZeroShotSplit", "default_split", "generate_dataset",
    "load_dataset", "read_image", "save_dataset", "verify_split", "write_pgm",
    "DecoupledEmbedder",
]
