"""Unified face age progression/regression with attention-based cyclic GANs."""

__version__ = "0.1.0"

from ._validation import DatasetDegenerateError, DivergenceError, InvalidInputError
from .data import (
    FaceRecord,
    GroupScheme,
    MORPH_SCHEME,
    OrderedPairBatch,
    UTKFACE_SCHEME,
    assign_age_group,
    load_image,
    one_hot,
    sample_ordered_pair_batch,
    split_by_subject,
)
from .estimator import AgeTranslator
from .losses import LossReport, LossWeights
from .trainer import Dataset, TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = [
    "AgeTranslator",
    "Dataset",
    "DatasetDegenerateError",
    "DivergenceError",
    "FaceRecord",
    "GroupScheme",
    "InvalidInputError",
    "LossReport",
    "LossWeights",
    "MORPH_SCHEME",
    "OrderedPairBatch",
    "TrainConfig",
    "UTKFACE_SCHEME",
    "assign_age_group",
    "fit",
    "load_checkpoint",
    "load_image",
    "one_hot",
    "sample_ordered_pair_batch",
    "save_checkpoint",
    "split_by_subject",
]
