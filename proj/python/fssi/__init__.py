"""Few-shot speaker identification: features, backbone, episodic training and scoring."""

from ._fssi import (
    EMBEDDING_DIM,
    MEL_BINS,
    ConfigError,
    DataError,
    EnrollmentDB,
    Model,
    ModelConfig,
    NumericError,
    ShapeError,
    compute_metrics,
    count_parameters,
    enroll,
    evaluate_episodic,
    generate_synthetic_corpus,
    identify,
    log_mel,
    prototypical_loss,
    read_wav,
    train,
    write_wav,
)

__all__ = [
    "EMBEDDING_DIM",
    "MEL_BINS",
    "ConfigError",
    "DataError",
    "EnrollmentDB",
    "Model",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "compute_metrics",
    "count_parameters",
    "enroll",
    "evaluate_episodic",
    "generate_synthetic_corpus",
    "identify",
    "log_mel",
    "prototypical_loss",
    "read_wav",
    "train",
    "write_wav",
]
