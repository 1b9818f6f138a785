"""Distribution-dependent dropout: multinomial, data-dependent and evolutional dropout."""

from .datasets import (
    Dataset,
    EmptyDatasetError,
    FormatError,
    NormalizationStats,
    ZNormalizer,
    gen_synthetic,
    read_idx,
    read_sparse_text,
    write_idx,
    write_sparse_text,
    z_normalize,
)
from .dropout import (
    DropoutMask,
    EvolutionalDropout,
    MultinomialDropout,
    SamplingDistribution,
    StandardDropout,
    StandardDropoutSpec,
    data_dependent_probs,
    minibatch_probs,
    sample_multinomial_counts,
    sample_multinomial_mask,
    sample_standard_mask,
)
from .linear import DropoutConfig, DropoutLogisticRegression, StepSizeSchedule, train_shallow
from .mlp import DropoutMLPClassifier, build_net, grad_check, load_checkpoint, save_checkpoint, train_deep
from .trace import TrainingTrace

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EmptyDatasetError", "FormatError", "NormalizationStats", "ZNormalizer",
    "gen_synthetic", "read_idx", "read_sparse_text", "write_idx", "write_sparse_text", "z_normalize",
    "DropoutMask", "EvolutionalDropout", "MultinomialDropout", "SamplingDistribution",
    "StandardDropout", "StandardDropoutSpec", "data_dependent_probs", "minibatch_probs",
    "sample_multinomial_counts", "sample_multinomial_mask", "sample_standard_mask",
    "DropoutConfig", "DropoutLogisticRegression", "StepSizeSchedule", "train_shallow",
    "DropoutMLPClassifier", "build_net", "grad_check", "load_checkpoint", "save_checkpoint", "train_deep",
    "TrainingTrace",
]
