"""elasticdet: an elastic detection/segmentation transformer with
weight-sharing architecture search and standardized latency benchmarking."""

from . import benchkit, datasynth, evalkit, nas, training
from .errors import (
    AnnotationError,
    ArtifactDigestError,
    BenchRunnerError,
    InvalidConfigError,
    InvalidSpaceError,
    TrainingDivergedError,
    UnsupportedOperationError,
)
from .model import (
    ArchConfig,
    DetectionOutput,
    ElasticWeights,
    ModelConfig,
    load_weights,
    model_forward,
    save_weights,
)
from .nas import ParetoReport, SearchSpace, enumerate_space, pareto_frontier, sample_config

__version__ = "0.1.0"
