"""Hierarchical text-interaction model for review-based rating prediction."""

from .corpus import (
    Corpus,
    DataError,
    PaddingLimits,
    PreprocessConfig,
    RawRecord,
    TrainingExample,
    Vocabulary,
    assemble_example,
    ingest_file,
    ingest_reviews,
    split_dataset,
)
from .estimators import BiasRegressor, HTIRegressor
from .model import HTIModel, HyperParams
from .numerics import ParamTape, Tensor, grad_check

__version__ = "0.1.0"

__all__ = [
    "BiasRegressor",
    "Corpus",
    "DataError",
    "HTIModel",
    "HTIRegressor",
    "HyperParams",
    "PaddingLimits",
    "ParamTape",
    "PreprocessConfig",
    "RawRecord",
    "Tensor",
    "TrainingExample",
    "Vocabulary",
    "assemble_example",
    "grad_check",
    "ingest_file",
    "ingest_reviews",
    "split_dataset",
]
